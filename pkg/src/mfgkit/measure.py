"""Discrete probability measures: Wasserstein-1 distances, flow regularity
diagnostics, and histogram estimation.

Grid densities are treated as atoms of mass m_i * h^n at the nodes, which makes
the 1D CDF formula and the transport LP agree to solver precision on the same
data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .core import Grid, MeasureFlow

__all__ = [
    "FlowRegularityReport",
    "d1_1d",
    "d1_atoms",
    "d1_lp",
    "d1_grid",
    "flow_distance",
    "second_moment",
    "second_moment_atoms",
    "flow_regularity",
    "histogram_density",
]

_MASS_TOL = 1e-6
_LP_MAX_SUPPORT = 400


def _check_density(m: np.ndarray, grid: Grid, mass_tol: float = _MASS_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != grid.shape:
        raise ValueError(f"density shape {m.shape} does not match grid {grid.shape}")
    if np.any(m < 0):
        raise ValueError(f"negative density entry {m.min():.3e}")
    mass = m.sum() * grid.cell_volume
    if abs(mass - 1.0) > mass_tol:
        raise ValueError(f"density mass {mass:.8f} deviates from 1 beyond {mass_tol:.1e}")
    return m / mass


def d1_atoms(x1: np.ndarray, w1: np.ndarray, x2: np.ndarray, w2: np.ndarray) -> float:
    """Exact 1D Kantorovich-Rubinstein distance between atomic measures:
    the integral of |F1 - F2| between consecutive support points."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    w1 = np.asarray(w1, dtype=float) / np.sum(w1)
    w2 = np.asarray(w2, dtype=float) / np.sum(w2)
    xs = np.concatenate([x1, x2])
    ws = np.concatenate([w1, -w2])
    order = np.argsort(xs, kind="stable")
    xs = xs[order]
    diff = np.cumsum(ws[order])[:-1]
    return float(np.sum(np.abs(diff) * np.diff(xs)))


def d1_1d(m1: np.ndarray, m2: np.ndarray, grid: Grid) -> float:
    """d1 between two unit-mass densities on the same 1D grid via the CDF formula."""
    if grid.dim != 1:
        raise ValueError("d1_1d needs a 1D grid")
    m1 = _check_density(m1, grid)
    m2 = _check_density(m2, grid)
    h = grid.h[0]
    diff = np.cumsum((m1 - m2) * h)[:-1]
    return float(np.sum(np.abs(diff)) * h)


def d1_lp(x1, w1, x2, w2) -> float:
    """Ground-truth transport LP: min sum gamma_ij |x_i - y_j| over couplings.

    Oracle path for small supports (<= 400 atoms each); x may be (k,) in 1D or
    (k, 2) in 2D.
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if np.any(w1 < 0) or np.any(w2 < 0):
        raise ValueError("atom masses must be nonnegative")
    s1, s2 = w1.sum(), w2.sum()
    if s1 <= 0 or s2 <= 0:
        raise ValueError("infeasible marginals: each side needs positive mass")
    w1, w2 = w1 / s1, w2 / s2  # compare as probability measures
    n1, n2 = len(w1), len(w2)
    if n1 > _LP_MAX_SUPPORT or n2 > _LP_MAX_SUPPORT:
        raise ValueError(f"transport LP limited to {_LP_MAX_SUPPORT} support points")
    if x1.ndim == 1:
        cost = np.abs(x1[:, None] - x2[None, :])
    else:
        cost = np.linalg.norm(x1[:, None, :] - x2[None, :, :], axis=-1)
    # marginal constraints; drop one redundant row for numerical rank
    rows_i = np.repeat(np.arange(n1), n2)
    rows_j = n1 + np.tile(np.arange(n2), n1)
    cols = np.arange(n1 * n2)
    A = sparse.csr_matrix(
        (np.ones(2 * n1 * n2),
         (np.concatenate([rows_i, rows_j]), np.concatenate([cols, cols]))),
        shape=(n1 + n2, n1 * n2))
    bvec = np.concatenate([w1, w2])
    res = linprog(cost.ravel(), A_eq=A[:-1], b_eq=bvec[:-1],
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def d1_grid(m1: np.ndarray, m2: np.ndarray, grid: Grid) -> float:
    """The production flow metric: exact CDF distance in 1D; in 2D the max of
    the two marginal distances (a lower bound on d1, used as the fixed-point
    monitor)."""
    if grid.dim == 1:
        return d1_1d(m1, m2, grid)
    m1 = _check_density(m1, grid)
    m2 = _check_density(m2, grid)
    best = 0.0
    for axis in (0, 1):
        other = 1 - axis
        p1 = m1.sum(axis=other) * grid.h[other]
        p2 = m2.sum(axis=other) * grid.h[other]
        h = grid.h[axis]
        diff = np.cumsum((p1 - p2) * h)[:-1]
        best = max(best, float(np.sum(np.abs(diff)) * h))
    return best


def flow_distance(flow_a: MeasureFlow, flow_b: MeasureFlow, grid: Grid) -> float:
    """rho(mu, mu') = sup over time levels of d1 (marginal-max metric in 2D)."""
    da, db = flow_a.densities, flow_b.densities
    if da.shape != db.shape:
        raise ValueError("flows have mismatched shapes")
    if grid.dim == 1:
        h = grid.h[0]
        diff = np.cumsum((da - db) * h, axis=1)[:, :-1]
        return float(np.max(np.sum(np.abs(diff), axis=1) * h))
    return max(d1_grid(da[k], db[k], grid) for k in range(da.shape[0]))


def second_moment_atoms(x: np.ndarray, w: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    sq = x ** 2 if x.ndim == 1 else (x ** 2).sum(axis=-1)
    return float(np.sum(sq * w) / np.sum(w))


def second_moment(m: np.ndarray, grid: Grid) -> float:
    """Quadrature of |x|^2 against the density."""
    m = _check_density(m, grid)
    if grid.dim == 1:
        sq = grid.axis(0) ** 2
    else:
        sq = (grid.coords() ** 2).sum(axis=-1)
    return float(np.sum(sq * m) * grid.cell_volume)


@dataclass(frozen=True)
class FlowRegularityReport:
    """Sampled membership diagnostics for the Hoelder-in-time / bounded-moment
    set of measure flows; implied_C1 is the smallest constant the flow exhibits."""

    holder_half_seminorm: float
    max_second_moment: float

    @property
    def implied_C1(self) -> float:
        return max(self.holder_half_seminorm, self.max_second_moment)

    def to_dict(self) -> dict:
        return {"holder_half_seminorm": self.holder_half_seminorm,
                "max_second_moment": self.max_second_moment,
                "implied_C1": self.implied_C1}


def flow_regularity(flow: MeasureFlow, grid: Grid) -> FlowRegularityReport:
    """sup_{s != t} d1(m(s), m(t)) / |t - s|^(1/2) and sup_t of the second moment.

    Time pairs closer than 2 dt are skipped so discretization noise does not
    dominate the quotient.
    """
    dens = flow.densities
    nt = dens.shape[0] - 1
    dt = grid.dt
    if grid.dim == 1:
        h = grid.h[0]
        cdf = np.cumsum(dens * h, axis=1)[:, :-1]
        sq = grid.axis(0) ** 2
        moments = (dens * sq).sum(axis=1) * h
    else:
        cdf = None
        sq = (grid.coords() ** 2).sum(axis=-1)
        moments = (dens * sq).sum(axis=(1, 2)) * grid.cell_volume
    worst = 0.0
    for k in range(nt + 1):
        lo = k + 2  # skip |t - s| < 2 dt
        if lo > nt:
            break
        gaps = (np.arange(lo, nt + 1) - k) * dt
        if grid.dim == 1:
            dists = np.sum(np.abs(cdf[lo:] - cdf[k]), axis=1) * h
        else:
            dists = np.array([d1_grid(dens[j], dens[k], grid)
                              for j in range(lo, nt + 1)])
        worst = max(worst, float(np.max(dists / np.sqrt(gaps))))
    return FlowRegularityReport(holder_half_seminorm=worst,
                                max_second_moment=float(np.max(moments)))


def histogram_density(points: np.ndarray, grid: Grid):
    """Cell-counting histogram normalized to unit quadrature mass.

    Points outside the box are clamped into it; returns (density, leak_fraction)
    where leak_fraction is the share of clamped points.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise ValueError("histogram needs at least one point")
    if grid.dim == 1:
        pts = np.atleast_1d(pts)
        cols = [pts]
    else:
        pts = pts.reshape(-1, 2)
        cols = [pts[:, 0], pts[:, 1]]
    n = len(cols[0])
    leak = np.zeros(n, dtype=bool)
    idx = []
    for d, c in enumerate(cols):
        lo, h = grid.x_min[d], grid.h[d]
        leak |= (c < lo) | (c > grid.x_max[d])
        i = np.clip(np.rint((c - lo) / h).astype(int), 0, grid.nx - 1)
        idx.append(i)
    if grid.dim == 1:
        counts = np.bincount(idx[0], minlength=grid.nx).astype(float)
    else:
        flat = idx[0] * grid.nx + idx[1]
        counts = np.bincount(flat, minlength=grid.nx ** 2).astype(float)
        counts = counts.reshape(grid.nx, grid.nx)
    dens = counts / (n * grid.cell_volume)
    return dens, float(leak.mean())
