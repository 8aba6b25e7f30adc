"""Hierarchical key-value run configuration with a closed, typed schema.

Config files are plain text, one `section.key = value` per line, `#` for
comments.  Every key must appear in the schema below: unknown keys are
rejected (never silently ignored) and type mismatches name the key and the
expected type.  CLI `--set key=value` overrides beat file values.  The fully
resolved configuration is echoed to `resolved_config` in the output directory
for provenance; identical resolved configs plus seed give byte-identical
artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density_core import Grid1D, GridDensity, TimeGrid, gaussian_density, uniform_density
from .dynamics import (
    DiffusionSpec,
    DriftSpec,
    SolverOptions,
    builtin_drift,
    constant_diffusion,
    validate_drift,
)
from .errors import ConfigError
from .metrics import FlowMetricSpec
from .particles import SpaceTimeField, builtin_field

SCHEMA_VERSION = 1

# key -> (type tag, default).  Type tags: int, float, str, bool, floatlist.
SCHEMA = {
    "schema.version": ("int", SCHEMA_VERSION),
    "seed": ("int", 12345),
    "threads": ("int", 1),

    "drift.name": ("str", "capped_density"),
    "drift.theta": ("float", 1.0),
    "drift.kappa": ("float", 0.1),
    "drift.tau": ("float", 0.6),
    "drift.cap": ("float", 5.0),
    "drift.kernel_width": ("float", 0.2),
    "drift.gamma": ("float", 0.2),
    "drift.coeff": ("float", 0.5),
    "drift.center": ("float", 0.0),
    "drift.p2": ("float", 4.0),
    "drift.q2": ("float", 4.0),

    "diffusion.a": ("float", 2.0),

    "grid.x_min": ("float", -6.0),
    "grid.x_max": ("float", 6.0),
    "grid.cells": ("int", 2000),

    "time.T": ("float", 1.0),
    "time.refine": ("str", "geometric"),
    "time.t_min": ("float", 0.0),            # 0 -> 1e-4 * T
    "time.nodes_per_decade": ("int", 40),
    "time.uniform_nodes": ("int", 200),

    "solver.rel_dt": ("float", 0.002),
    "solver.dt_max": ("float", 0.0),          # 0 -> T / 500
    "solver.cfl": ("float", 0.5),

    "picard.tol": ("float", 1e-6),
    "picard.max_iter": ("int", 25),
    "picard.lambda0": ("float", 1.0),
    "picard.metric_p": ("float", 2.0),
    "picard.metric_k": ("float", 4.0),

    "init.kind": ("str", "gaussian"),
    "init.mean": ("float", 0.0),
    "init.sigma": ("float", 0.05),
    "init.lo": ("float", 0.0),
    "init.hi": ("float", 1.0),

    "particles.n": ("int", 100000),
    "particles.dt": ("float", 1e-3),
    "particles.bandwidth": ("float", 0.0),     # 0 -> silverman rule

    "experiment.t_lo": ("float", 1e-2),
    "experiment.t_hi": ("float", 1.0),
    "experiment.n_t": ("int", 25),
    "experiment.delta": ("float", 0.02),
    "experiment.k": ("float", 2.0),
    "experiment.headroom": ("float", 3.0),
    "experiment.slope_tol": ("float", 0.0),    # 0 -> no slope assertion
    "experiment.alphas": ("floatlist", (0.25, 0.5, 1.0, 2.0)),
    "experiment.alpha_limit": ("float", 1e-3),

    "khasminskii.f_name": ("str", "singular_power"),
    "khasminskii.c0": ("float", 0.5),
    "khasminskii.coeff": ("float", 1.0),
    "khasminskii.gamma": ("float", 0.3),
    "khasminskii.p": ("float", 4.0),
    "khasminskii.q": ("float", 4.0),
    "khasminskii.s": ("float", 0.0),
    "khasminskii.t": ("float", 1.0),
    "khasminskii.lambda_grid": ("floatlist", (0.1, 0.15, 0.22, 0.33, 0.5,
                                              0.8, 1.2, 1.8, 2.7, 4.0)),
    "khasminskii.x0": ("float", 0.0),
    "khasminskii.dt": ("float", 1e-3),
}


def _coerce(key: str, raw, kind: str):
    if kind == "floatlist":
        if isinstance(raw, (tuple, list)):
            return tuple(float(v) for v in raw)
        try:
            return tuple(float(v) for v in str(raw).split(",") if v.strip() != "")
        except ValueError:
            raise ConfigError(f"key '{key}' expects a comma-separated float list, got {raw!r}")
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind == "int":
            if isinstance(raw, float) and raw != int(raw):
                raise ValueError
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("true", "1", "yes"):
                return True
            if str(raw).lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if kind == "str":
            return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"key '{key}' expects type {kind}, got {raw!r}")
    raise ConfigError(f"key '{key}' has unknown schema type {kind}")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration (every schema key present and typed)."""

    data: dict

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key '{key}'")
        return self.data[key]

    def resolved_text(self) -> str:
        lines = []
        for key in sorted(self.data):
            v = self.data[key]
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(path: str | None = None, overrides=(), base: dict | None = None) -> RunConfig:
    """Resolve defaults, optional file, then overrides into a RunConfig.

    `overrides` are "key=value" strings (from repeated --set flags).  Unknown
    keys and malformed values raise ConfigError naming the key.
    """
    data = {k: _coerce(k, d, t) for k, (t, d) in SCHEMA.items()}
    if base:
        for k, v in base.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key '{k}'")
            data[k] = _coerce(k, v, SCHEMA[k][0])
    if path is not None:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        for ln, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{ln}: unknown key '{key}'")
            data[key] = _coerce(key, val, SCHEMA[key][0])
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override '{ov}' must look like key=value")
        key, val = (s.strip() for s in ov.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key '{key}'")
        data[key] = _coerce(key, val, SCHEMA[key][0])
    if data["schema.version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"schema.version {data['schema.version']} does not match {SCHEMA_VERSION}")
    return RunConfig(data)


# ---------------------------------------------------------------------------
# object builders shared by the CLI and the experiment harness
# ---------------------------------------------------------------------------

def build_grid(cfg: RunConfig) -> Grid1D:
    return Grid1D(cfg["grid.x_min"], cfg["grid.x_max"], cfg["grid.cells"])


def build_time_grid(cfg: RunConfig) -> TimeGrid:
    T = cfg["time.T"]
    if cfg["time.refine"] == "geometric":
        t_min = cfg["time.t_min"] or None
        return TimeGrid.geometric(T, t_min=t_min,
                                  nodes_per_decade=cfg["time.nodes_per_decade"])
    if cfg["time.refine"] == "uniform":
        return TimeGrid.uniform(T, cfg["time.uniform_nodes"])
    raise ConfigError(f"key 'time.refine' must be geometric|uniform, got {cfg['time.refine']!r}")


def build_drift(cfg: RunConfig) -> DriftSpec:
    name = cfg["drift.name"]
    if name == "linear_ou":
        params = {"theta": cfg["drift.theta"]}
    elif name == "capped_density":
        params = {"theta": cfg["drift.theta"], "kappa": cfg["drift.kappa"],
                  "tau": cfg["drift.tau"], "cap": cfg["drift.cap"]}
    elif name == "smoothed_interaction":
        params = {"theta": cfg["drift.theta"], "kappa": cfg["drift.kappa"],
                  "tau": cfg["drift.tau"], "kernel_width": cfg["drift.kernel_width"]}
    elif name == "singular_well":
        params = {"theta": cfg["drift.theta"], "gamma": cfg["drift.gamma"],
                  "coeff": cfg["drift.coeff"], "center": cfg["drift.center"],
                  "p2": cfg["drift.p2"], "q2": cfg["drift.q2"]}
    elif name == "zero":
        params = None
    else:
        raise ConfigError(f"key 'drift.name' has unknown value {name!r}")
    if name == "zero":
        drift = DriftSpec(b1=lambda t, x: np.zeros_like(x), K=0.0, name="zero")
    else:
        drift = builtin_drift(name, params)
    validate_drift(drift, cfg["time.T"], build_grid(cfg))
    return drift


def build_diffusion(cfg: RunConfig) -> DiffusionSpec:
    return constant_diffusion(cfg["diffusion.a"])


def build_solver_options(cfg: RunConfig) -> SolverOptions:
    dt_max = cfg["solver.dt_max"] or None
    return SolverOptions(rel_dt=cfg["solver.rel_dt"], dt_max=dt_max, cfl=cfg["solver.cfl"])


def build_metric_spec(cfg: RunConfig) -> FlowMetricSpec:
    return FlowMetricSpec(lam=cfg["picard.lambda0"], p=cfg["picard.metric_p"],
                          k=cfg["picard.metric_k"])


def build_init_density(cfg: RunConfig, grid: Grid1D) -> GridDensity:
    kind = cfg["init.kind"]
    if kind == "gaussian":
        return gaussian_density(grid, cfg["init.mean"], cfg["init.sigma"])
    if kind == "uniform":
        return uniform_density(grid, cfg["init.lo"], cfg["init.hi"])
    raise ConfigError(f"key 'init.kind' must be gaussian|uniform, got {kind!r}")


def build_field(cfg: RunConfig) -> SpaceTimeField:
    name = cfg["khasminskii.f_name"]
    if name == "constant":
        params = {"c0": cfg["khasminskii.c0"], "p": cfg["khasminskii.p"],
                  "q": cfg["khasminskii.q"]}
    elif name == "singular_power":
        params = {"coeff": cfg["khasminskii.coeff"], "gamma": cfg["khasminskii.gamma"],
                  "center": 0.0, "p": cfg["khasminskii.p"], "q": cfg["khasminskii.q"]}
    else:
        raise ConfigError(f"key 'khasminskii.f_name' has unknown value {name!r}")
    return builtin_field(name, params)
