"""Distances and divergences between densities and between density flows.

Transport distances use the 1D quantile representation: for cost functions
that are convex and increasing in |x - y| the monotone (quantile) coupling is
optimal, so W_q and the exponential-cost transport functional reduce to
one-dimensional integrals over the uniform quantile variable.  A small
transportation linear program is kept alongside as an independent oracle.

Entropy conventions:
  * relative entropy Ent(mu|nu) = int log(dmu/dnu) dmu, +inf when mu is not
    absolutely continuous w.r.t. nu at the resolution floor;
  * the power divergence Ent_alpha(mu|nu) = (1/alpha) log int (dmu/dnu)^alpha dmu
    (note the 1/alpha prefactor and integration against dmu); it increases in
    alpha and converges to relative entropy as alpha -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .density_core import DensityFlow, GridDensity, density_quantiles, tilde_norm
from .errors import (
    GridMismatchError,
    InvalidParameterError,
    NotAProbabilityError,
    NumericOverflowError,
)

# Densities below this floor count as zero in entropy quotients; it separates
# "true zero" from double-precision underflow.
DENSITY_FLOOR = 1e-30

# Entropies are +inf only when the numerator mass sitting on sub-floor
# denominator cells is resolvable; far-tail cells holding less than this are
# excluded from the quotient (their true contribution is below double
# precision, and treating them as support mismatches would misreport smooth
# positive densities as mutually singular).
ABSORB_MASS_TOL = 1e-12

_MASS_TOL = 1e-6


def _check_pair(mu: GridDensity, nu: GridDensity) -> None:
    if mu.grid != nu.grid:
        raise GridMismatchError("inputs live on different grids")


def _check_probability(d: GridDensity) -> None:
    if abs(d.mass() - 1.0) > _MASS_TOL:
        raise NotAProbabilityError(f"density mass {d.mass():.8f} is not 1")


def _quantile_grid(mu: GridDensity, nu: GridDensity):
    n_u = max(4 * mu.grid.n_cells, 1024)
    u = (np.arange(n_u) + 0.5) / n_u
    return density_quantiles(mu, u), density_quantiles(nu, u), n_u


def wasserstein_1d(mu: GridDensity, nu: GridDensity, q: float = 1.0) -> float:
    """q-Wasserstein distance via piecewise-linear CDF inversion.

    In one dimension the coupling infimum is attained by the monotone map, so
    W_q^q = int_0^1 |F_mu^{-1}(u) - F_nu^{-1}(u)|^q du.
    """
    if q < 1:
        raise InvalidParameterError("q must be >= 1")
    _check_pair(mu, nu)
    _check_probability(mu)
    _check_probability(nu)
    qa, qb, _ = _quantile_grid(mu, nu)
    return float(np.mean(np.abs(qa - qb) ** q) ** (1.0 / q))


def exp_wasserstein(mu: GridDensity, nu: GridDensity, c: float) -> float:
    """Exponential-cost transport functional: inf over couplings of
    log int exp(c |x-y|^2) d(pi).

    Evaluated on the monotone coupling, which is optimal in 1D because the
    cost is convex increasing in |x-y| (cross-checked against the LP oracle
    in the test suite).
    """
    if c <= 0:
        raise InvalidParameterError("c must be positive")
    _check_pair(mu, nu)
    _check_probability(mu)
    _check_probability(nu)
    qa, qb, n_u = _quantile_grid(mu, nu)
    gap2 = (qa - qb) ** 2
    if c * float(gap2.max()) > 700.0:
        raise NumericOverflowError(
            f"c * max_gap^2 = {c * gap2.max():.1f} > 700 would overflow"
        )
    return float(logsumexp(c * gap2) - np.log(n_u))


# ---------------------------------------------------------------------------
# atomic measures: exact quantile coupling and the LP oracle
# ---------------------------------------------------------------------------

def _check_atoms(xs, ws):
    xs = np.asarray(xs, dtype=np.float64)
    ws = np.asarray(ws, dtype=np.float64)
    if xs.shape != ws.shape or xs.ndim != 1:
        raise InvalidParameterError("atoms: positions and weights must be 1D and equal length")
    if np.any(ws < -1e-12) or abs(ws.sum() - 1.0) > _MASS_TOL:
        raise NotAProbabilityError("atom weights must be nonnegative and sum to 1")
    return xs, np.maximum(ws, 0.0)


def quantile_coupling_cost(xs, ws, ys, vs, cost) -> float:
    """Expected cost under the monotone coupling of two atomic measures.

    Exact: segments of the uniform variable are split at the merged CDF
    breakpoints of both measures.
    """
    xs, ws = _check_atoms(xs, ws)
    ys, vs = _check_atoms(ys, vs)
    ox, oy = np.argsort(xs, kind="stable"), np.argsort(ys, kind="stable")
    xs, ws, ys, vs = xs[ox], ws[ox], ys[oy], vs[oy]
    cw = np.concatenate(([0.0], np.cumsum(ws)))
    cv = np.concatenate(([0.0], np.cumsum(vs)))
    cw[-1] = cv[-1] = 1.0
    cuts = np.unique(np.concatenate((cw, cv)))
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-15:
            continue
        mid = 0.5 * (a + b)
        i = np.searchsorted(cw, mid, side="right") - 1
        j = np.searchsorted(cv, mid, side="right") - 1
        total += (b - a) * cost(xs[min(i, len(xs) - 1)], ys[min(j, len(ys) - 1)])
    return float(total)


def wasserstein_atoms(xs, ws, ys, vs, q: float = 1.0) -> float:
    """Exact q-Wasserstein distance between small atomic measures."""
    if q < 1:
        raise InvalidParameterError("q must be >= 1")
    cost = lambda x, y: abs(x - y) ** q
    return quantile_coupling_cost(xs, ws, ys, vs, cost) ** (1.0 / q)


def coupling_lp_cost(xs, ws, ys, vs, cost) -> float:
    """Optimal expected cost via an exact transportation linear program.

    Independent oracle for the quantile-coupling routines; supports arbitrary
    cost matrices but only desk-scale supports (<= ~50 atoms a side).
    """
    xs, ws = _check_atoms(xs, ws)
    ys, vs = _check_atoms(ys, vs)
    n, m = len(xs), len(ys)
    if n > 64 or m > 64:
        raise InvalidParameterError("LP oracle is for small supports (<= 64 atoms)")
    C = np.array([[cost(x, y) for y in ys] for x in xs])
    A_eq = []
    b_eq = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m:(i + 1) * m] = 1.0
        A_eq.append(row)
        b_eq.append(ws[i])
    for j in range(m - 1):  # last column constraint is redundant
        row = np.zeros(n * m)
        row[j::m] = 1.0
        A_eq.append(row)
        b_eq.append(vs[j])
    res = linprog(C.ravel(), A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise NotAProbabilityError(f"transportation LP infeasible: {res.message}")
    return float(res.fun)


def wasserstein_lp_oracle(xs, ws, ys, vs, q: float = 1.0) -> float:
    """Exact q-Wasserstein distance between atomic measures by linear programming."""
    if q < 1:
        raise InvalidParameterError("q must be >= 1")
    cost = lambda x, y: abs(x - y) ** q
    return coupling_lp_cost(xs, ws, ys, vs, cost) ** (1.0 / q)


# ---------------------------------------------------------------------------
# entropies
# ---------------------------------------------------------------------------

def _entropy_support(mu: GridDensity, nu: GridDensity):
    """Cells entering an entropy quotient, or None when the divergence is +inf
    (mu carries resolvable mass where nu sits at the zero floor)."""
    a, b = mu.values, nu.values
    live = a > DENSITY_FLOOR
    mismatch = live & (b <= DENSITY_FLOOR)
    if np.sum(a[mismatch]) * mu.grid.dx > ABSORB_MASS_TOL:
        return None
    return live & (b > DENSITY_FLOOR)


def relative_entropy(mu: GridDensity, nu: GridDensity) -> float:
    """int log(dmu/dnu) dmu on the grid; +inf if mu puts mass where nu has none."""
    _check_pair(mu, nu)
    keep = _entropy_support(mu, nu)
    if keep is None:
        return float("inf")
    aa, bb = mu.values[keep], nu.values[keep]
    return float(np.sum(aa * np.log(aa / bb)) * mu.grid.dx)


def renyi_entropy(mu: GridDensity, nu: GridDensity, alpha: float) -> float:
    """(1/alpha) log int (dmu/dnu)^alpha dmu with the same floor convention.

    Computed in log space through logsumexp so large density ratios stay
    representable.
    """
    if alpha <= 0:
        raise InvalidParameterError("alpha must be positive")
    _check_pair(mu, nu)
    keep = _entropy_support(mu, nu)
    if keep is None:
        return float("inf")
    la = np.log(mu.values[keep])
    lb = np.log(nu.values[keep])
    return float(logsumexp((1.0 + alpha) * la - alpha * lb + np.log(mu.grid.dx)) / alpha)


# ---------------------------------------------------------------------------
# flow metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowMetricSpec:
    """Parameters of the discounted flow metric: weight exp(-lambda t) t^e with
    e = d (k - p) / (2 p k)."""

    lam: float
    p: float
    k: float
    d_dim: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidParameterError("lambda weight must be >= 0")
        if not (1.0 <= self.p <= self.k):
            raise InvalidParameterError(f"need 1 <= p <= k, got p={self.p}, k={self.k}")

    @property
    def exponent(self) -> float:
        if np.isinf(self.k):
            return self.d_dim / (2.0 * self.p)
        return self.d_dim * (self.k - self.p) / (2.0 * self.p * self.k)


def d_lambda(gamma: DensityFlow, eta: DensityFlow, spec: FlowMetricSpec) -> float:
    """Discounted sup-in-time distance between two density flows:
    max over nodes t > 0 of exp(-lambda t) t^e ||gamma(t) - eta(t)||_{~L^k}.

    The t = 0 node is skipped whenever e > 0 (its weight has limit 0 there);
    for e = 0 it participates with weight 1.
    """
    if not np.array_equal(gamma.time_grid.nodes, eta.time_grid.nodes):
        raise GridMismatchError("flows live on different time grids")
    if gamma.grid != eta.grid:
        raise GridMismatchError("flows live on different spatial grids")
    e = spec.exponent
    start = 1 if (e > 0 or gamma.singular_t0 or eta.singular_t0) else 0
    nodes = gamma.time_grid.nodes
    best = 0.0
    for i in range(start, len(nodes)):
        t = nodes[i]
        diff = gamma.snapshots[i].values - eta.snapshots[i].values
        w = np.exp(-spec.lam * t) * (t ** e if e > 0 else 1.0)
        val = w * tilde_norm(diff, spec.k, gamma.grid)
        if val > best:
            best = val
    return float(best)


def total_variation(mu: GridDensity, nu: GridDensity) -> float:
    """Variation-norm distance sup_{|f|<=1} |mu(f) - nu(f)| = int |rho_mu - rho_nu|."""
    _check_pair(mu, nu)
    return float(np.sum(np.abs(mu.values - nu.values)) * mu.grid.dx)
