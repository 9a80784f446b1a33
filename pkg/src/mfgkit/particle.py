"""Euler-Maruyama simulation of the controlled SDE against a frozen measure flow.

Randomness comes from counter-based Philox streams keyed (seed, step), with the
in-stream counter enumerating particles, so ensembles are bit-identical for a
given seed regardless of how the work is scheduled. Measure arguments are always
read from the frozen flow, never from the empirical ensemble.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .core import Grid, MeasureFlow, MeasureView, ProblemSpec, interpolate_field
from .measure import d1_grid, histogram_density

__all__ = ["ParticleEnsemble", "simulate", "compare_law", "sample_initial"]

_INIT_STREAM = 0xFFFFFFFF  # step key reserved for initial sampling


def _stream(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, step],
                                                             dtype=np.uint64)))


@dataclass(frozen=True)
class ParticleEnsemble:
    """positions[k, i] (1D) or [k, i, :] (2D) for time index k and particle i."""

    positions: np.ndarray
    n_particles: int
    seed: int
    boundary_leak: float

    def __post_init__(self):
        self.positions.flags.writeable = False
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("ensemble contains non-finite positions")

    @property
    def max_abs_position(self) -> float:
        """Proxy for the square-integrability of the paths (sup |X| over the
        ensemble; the expectation bound itself is not certified)."""
        return float(np.max(np.abs(self.positions)))


def sample_initial(density: np.ndarray, grid: Grid, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw n points from the cell histogram of a grid density: inverse CDF over
    cells in 1D, rejection in 2D; uniform placement within each cell."""
    if grid.dim == 1:
        h = grid.h[0]
        w = density * h
        cdf = np.cumsum(w)
        if cdf[-1] <= 0 or not np.isfinite(cdf[-1]):
            raise ValueError("cannot sample from a zero or malformed density")
        cdf /= cdf[-1]
        u = rng.random(n)
        cells = np.searchsorted(cdf, u, side="left")
        jitter = (rng.random(n) - 0.5) * h
        x = grid.axis(0)[cells] + jitter
        return np.clip(x, grid.x_min[0], grid.x_max[0])
    peak = density.max()
    if peak <= 0:
        raise ValueError("cannot sample from a zero density")
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        batch = max(4 * (n - filled), 1024)
        cand = np.column_stack([rng.uniform(grid.x_min[d], grid.x_max[d], batch)
                                for d in range(2)])
        ix = np.clip(np.rint((cand[:, 0] - grid.x_min[0]) / grid.h[0]).astype(int),
                     0, grid.nx - 1)
        iy = np.clip(np.rint((cand[:, 1] - grid.x_min[1]) / grid.h[1]).astype(int),
                     0, grid.nx - 1)
        accept = rng.random(batch) * peak < density[ix, iy]
        take = cand[accept][: n - filled]
        out[filled:filled + len(take)] = take
        filled += len(take)
    return out


def simulate(problem: ProblemSpec, grid: Grid, m_flow: MeasureFlow,
             policy_or_none: Union[None, np.ndarray, Callable],
             n: int, seed: int, interacting: bool = False) -> ParticleEnsemble:
    """Euler-Maruyama march of n paths from m0 under the frozen flow.

    policy_or_none: None for the uncontrolled dynamics, else per-node feedback
    controls indexed by time level (interpolated at particle positions) or a
    callable (k, positions) -> controls.

    interacting=True is an experimental mode that feeds the coefficients the
    live empirical law (histogram of the current ensemble) instead of the
    frozen flow; it is not used by any verification check.
    """
    if n < 1:
        raise ValueError("need at least one particle")
    dim, dt = problem.dim, grid.dt
    init_rng = _stream(seed, _INIT_STREAM)
    x = sample_initial(m_flow.densities[0], grid, n, init_rng)
    shape = (grid.nt + 1, n) if dim == 1 else (grid.nt + 1, n, 2)
    positions = np.empty(shape)
    positions[0] = x
    clamped = 0
    lo = np.array(grid.x_min) if dim == 2 else grid.x_min[0]
    hi = np.array(grid.x_max) if dim == 2 else grid.x_max[0]
    sqdt = np.sqrt(dt)

    for k in range(grid.nt):
        t = grid.time(k)
        if interacting:
            emp, _ = histogram_density(x, grid)
            view = MeasureView(emp, grid)
        else:
            view = m_flow.view(k)
        if policy_or_none is None:
            b = problem.drift_b0(t, x, view)
        else:
            if callable(policy_or_none):
                alpha = policy_or_none(k, x)
            elif dim == 1:
                alpha = interpolate_field(policy_or_none[k], grid, x)
            else:
                alpha = np.stack([interpolate_field(policy_or_none[k][..., d], grid, x)
                                  for d in range(2)], axis=-1)
            b = problem.drift_b0(t, x, view) + problem.drift_b1(t, x, alpha)
        sig = np.asarray(problem.diffusion_sigma(t, x, view), dtype=float)
        z = _stream(seed, k).standard_normal(x.shape)
        if dim == 1:
            x = x + np.broadcast_to(b, x.shape) * dt + sig * sqdt * z
        else:
            if sig.ndim == 2:
                noise = z @ sig.T
            else:
                noise = np.einsum("nij,nj->ni", sig, z)
            x = x + np.broadcast_to(b, x.shape) * dt + sqdt * noise
        hit = (x < lo) | (x > hi)
        clamped += int(np.count_nonzero(hit))
        x = np.clip(x, lo, hi)
        positions[k + 1] = x

    leak = clamped / (n * grid.nt * dim)
    if leak > 1e-3:
        warnings.warn(f"boundary leak fraction {leak:.2e} exceeds 1e-3; "
                      "the truncation box is too small for this dynamics",
                      UserWarning, stacklevel=2)
    return ParticleEnsemble(positions=positions, n_particles=n, seed=seed,
                            boundary_leak=leak)


def compare_law(ensemble: ParticleEnsemble, m_flow: MeasureFlow,
                grid: Grid) -> np.ndarray:
    """d1 between the empirical law and the flow at each time index (marginal-max
    metric in 2D)."""
    nt = m_flow.densities.shape[0]
    if ensemble.positions.shape[0] != nt:
        raise ValueError("ensemble and flow cover different time grids")
    out = np.empty(nt)
    for k in range(nt):
        emp, _ = histogram_density(ensemble.positions[k], grid)
        out[k] = d1_grid(emp, m_flow.densities[k], grid)
    return out
