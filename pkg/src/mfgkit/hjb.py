"""Backward semi-implicit solver for the quasilinear HJB equation under a frozen
measure flow.

Time stepping: diffusion implicit, drift and source explicit with the control
lagged through phi(t, x, Du); inner Picard sweeps restore consistency of the
lagged gradient within each step. The advection stencil blends central and
sign-upwinded differences by the mesh Peclet number, so it is second order where
diffusion resolves the drift and monotone where it does not.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .core import Grid, MeasureFlow, ProblemSpec, ValueField
from .hamiltonian import PhiEvaluator, minimize_H

__all__ = ["HjbSolverConfig", "HjbError", "CFLAdvisory", "solve_hjb"]


class HjbError(RuntimeError):
    pass


class CFLAdvisory(UserWarning):
    """Explicit drift step exceeded dt |b| / h = 1 (diffusion stays implicit)."""


@dataclass(frozen=True)
class HjbSolverConfig:
    # wall closure: "extrapolate" (cubic-extrapolated wall value, u_xxx = 0),
    # "extrapolate0" (u_xx = 0 ghosts), "onesided" (one-sided wall PDE row),
    # "neumann" (reflected ghosts)
    boundary: str = "extrapolate"
    advection: str = "hybrid"  # "hybrid" (Peclet-blended) | "upwind" | "central"
    picard_inner_iters: int = 2
    linear_solver_tol: float = 1e-10

    def __post_init__(self):
        if self.picard_inner_iters < 1:
            raise ValueError("picard_inner_iters must be >= 1")
        if self.boundary not in ("extrapolate", "extrapolate0", "onesided", "neumann"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if self.advection not in ("hybrid", "upwind", "central"):
            raise ValueError(f"unknown advection mode {self.advection!r}")


def _advective_term(u: np.ndarray, b: np.ndarray, a: np.ndarray, h: float,
                    mode: str, axis: int = 0) -> np.ndarray:
    """<b, D u> along one axis: Peclet-blended central/upwind differences.

    Upwinding follows the sign of b as it enters u_t + <Du, b> + ... = 0 marched
    backward: b > 0 couples to the forward neighbor (monotone explicit update).
    Boundary nodes use the one-sided interior difference.
    """
    u = np.moveaxis(u, axis, 0)
    b = np.moveaxis(b, axis, 0)
    a = np.moveaxis(a, axis, 0)
    fwd = np.empty_like(u)
    bwd = np.empty_like(u)
    fwd[:-1] = (u[1:] - u[:-1]) / h
    bwd[1:] = fwd[:-1]
    # second-order one-sided at the walls for every scheme
    fwd[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * h)
    bwd[-1] = fwd[-1]
    bwd[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h)
    fwd[0] = bwd[0]
    upw = np.where(b > 0, fwd, bwd)
    if mode == "upwind":
        out = b * upw
    else:
        cen = np.empty_like(u)
        cen[1:-1] = (u[2:] - u[:-2]) / (2 * h)
        cen[0] = fwd[0]
        cen[-1] = bwd[-1]
        if mode == "central":
            out = b * cen
        else:
            pe = np.abs(b) * h / np.maximum(a, 1e-300)
            w = np.clip(1.0 - 2.0 / np.maximum(pe, 1e-300), 0.0, 1.0)
            out = b * ((1.0 - w) * cen + w * upw)
    return np.moveaxis(out, 0, axis)


def _implicit_diffusion_solve(a: np.ndarray, rhs: np.ndarray, h: float, dt: float,
                              boundary: str, tol: float) -> np.ndarray:
    """Solve (I - dt a Dxx) u = rhs along the leading axis, batched over the rest.

    Wall closures: "extrapolate" slaves the wall node to cubic extrapolation
    (u_xxx = 0 there, exact for quadratic profiles), "extrapolate0" drops the
    wall diffusion (u_xx = 0 ghosts), "onesided" keeps the wall PDE with the
    second-order one-sided second difference, "neumann" reflects.
    """
    n = rhs.shape[0]
    r = a * dt / h ** 2
    flat = rhs.reshape(n, -1)
    rr = np.broadcast_to(r.reshape(n, -1), flat.shape)
    ncols = flat.shape[1]
    out = np.empty_like(flat)
    # corner rows of the wide closures reach three nodes in; interior stays tridiagonal
    bw = 3 if boundary in ("extrapolate", "onesided") else 1
    band = np.zeros((2 * bw + 1, n))
    mid = bw
    for j in range(ncols):
        rj = rr[:, j]
        band[:] = 0.0
        band[mid - 1, 1:] = -rj[:-1]          # superdiagonal
        band[mid, :] = 1.0 + 2.0 * rj         # diagonal
        band[mid + 1, :-1] = -rj[1:]          # subdiagonal
        b_rhs = flat[:, j].copy()
        if boundary == "extrapolate":
            # wall value from cubic extrapolation of the new interior solution
            band[mid, 0] = 1.0
            band[mid - 1, 1] = -3.0
            band[mid - 2, 2] = 3.0
            band[mid - 3, 3] = -1.0
            b_rhs[0] = 0.0
            band[mid, -1] = 1.0
            band[mid + 1, -2] = -3.0
            band[mid + 2, -3] = 3.0
            band[mid + 3, -4] = -1.0
            b_rhs[-1] = 0.0
        elif boundary == "onesided":
            # wall PDE with (2, -5, 4, -1) one-sided second difference
            band[mid, 0] = 1.0 - 2.0 * rj[0]
            band[mid - 1, 1] = 5.0 * rj[0]
            band[mid - 2, 2] = -4.0 * rj[0]
            band[mid - 3, 3] = rj[0]
            band[mid, -1] = 1.0 - 2.0 * rj[-1]
            band[mid + 1, -2] = 5.0 * rj[-1]
            band[mid + 2, -3] = -4.0 * rj[-1]
            band[mid + 3, -4] = rj[-1]
        elif boundary == "extrapolate0":
            band[mid, 0] = 1.0
            band[mid - 1, 1] = 0.0
            band[mid, -1] = 1.0
            band[mid + 1, -2] = 0.0
        else:  # homogeneous Neumann: reflected ghosts
            band[mid - 1, 1] = -2.0 * rj[0]
            band[mid + 1, -2] = -2.0 * rj[-1]
        out[:, j] = solve_banded((bw, bw), band, b_rhs, check_finite=False)
        res = _banded_matvec(band, bw, out[:, j]) - b_rhs
        worst = np.max(np.abs(res))
        if worst > tol * (1.0 + np.max(np.abs(b_rhs))):
            raise HjbError(f"linear solve residual {worst:.3e} exceeds tolerance")
    return out.reshape(rhs.shape)


def _banded_matvec(band: np.ndarray, bw: int, x: np.ndarray) -> np.ndarray:
    y = band[bw] * x
    for k in range(1, bw + 1):
        y[:-k] += band[bw - k, k:] * x[k:]
        y[k:] += band[bw + k, :-k] * x[:-k]
    return y


def _diffusion_fields(problem: ProblemSpec, t: float, coords, view):
    sig = np.asarray(problem.diffusion_sigma(t, coords, view), dtype=float)
    if problem.dim == 1:
        a = np.broadcast_to(0.5 * sig ** 2, (coords.shape[0],))
        return (a,), None
    shape = coords.shape[:-1]
    if sig.ndim == 2:  # constant matrix
        sig = np.broadcast_to(sig, shape + (2, 2))
    a = 0.5 * np.einsum("...ik,...jk->...ij", sig, sig)
    return (a[..., 0, 0], a[..., 1, 1]), a[..., 0, 1]


def _mixed_term(u: np.ndarray, a12: np.ndarray, h: tuple) -> np.ndarray:
    # 2 a12 u_x1x2, centered (one-sided at the rim via np.gradient)
    return 2.0 * a12 * np.gradient(np.gradient(u, h[0], axis=0), h[1], axis=1)


def solve_hjb(problem: ProblemSpec, grid: Grid, mu_flow: MeasureFlow,
              config: HjbSolverConfig = HjbSolverConfig(),
              evaluator: PhiEvaluator | None = None) -> ValueField:
    """March u backward from u(T) = g(., mu(T)) under the frozen flow mu.

    Per step: lag the control through phi(t, x, Du) starting from the gradient at
    the previous time level, assemble drift/source explicitly and diffusion
    implicitly, solve, recompute Du, and repeat picard_inner_iters times.
    """
    if mu_flow.densities.shape != (grid.nt + 1,) + grid.shape:
        raise ValueError("measure flow shape does not match the grid")
    if evaluator is None:
        evaluator = PhiEvaluator.for_problem(problem)
    coords = grid.coords()
    dt, h = grid.dt, grid.h
    values = np.empty((grid.nt + 1,) + grid.shape)
    grads = np.empty_like(values) if grid.dim == 1 else \
        np.empty((grid.nt + 1,) + grid.shape + (2,))

    view_T = mu_flow.view(grid.nt)
    gT = np.asarray(problem.terminal_g(coords, view_T), dtype=float)
    gT = np.broadcast_to(gT, grid.shape).copy()
    if not np.all(np.isfinite(gT)):
        raise HjbError("terminal data g(., mu(T)) is not finite")
    values[grid.nt] = gT
    grads[grid.nt] = _grad(gT, grid)

    cfl_worst = 0.0
    for k in range(grid.nt - 1, -1, -1):
        t = grid.time(k)
        view = mu_flow.view(k)
        diag_a, a12 = _diffusion_fields(problem, t, coords, view)
        u_old = values[k + 1]
        p_lag = grads[k + 1]
        b0 = problem.drift_b0(t, coords, view)
        f0 = problem.running_f0(t, coords, view)
        u_new = u_old
        for _ in range(config.picard_inner_iters):
            alpha = minimize_H(problem, evaluator, t, coords, p_lag)
            b = np.asarray(b0 + problem.drift_b1(t, coords, alpha), dtype=float)
            f = np.asarray(f0 + problem.running_f1(t, coords, alpha), dtype=float)
            f = np.broadcast_to(f, grid.shape)
            if grid.dim == 1:
                b1d = np.broadcast_to(b, grid.shape)
                cfl_worst = max(cfl_worst, float(np.max(np.abs(b1d))) * dt / h[0])
                adv = _advective_term(u_old, b1d, diag_a[0], h[0], config.advection)
                rhs = u_old + dt * (adv + f)
                u_new = _implicit_diffusion_solve(diag_a[0], rhs, h[0], dt,
                                                  config.boundary,
                                                  config.linear_solver_tol)
            else:
                bx = np.broadcast_to(b[..., 0], grid.shape)
                by = np.broadcast_to(b[..., 1], grid.shape)
                cfl_worst = max(cfl_worst,
                                float(np.max(np.abs(bx))) * dt / h[0],
                                float(np.max(np.abs(by))) * dt / h[1])
                adv = (_advective_term(u_old, bx, diag_a[0], h[0], config.advection, axis=0)
                       + _advective_term(u_old, by, diag_a[1], h[1], config.advection, axis=1))
                src = adv + f
                if a12 is not None and np.any(a12 != 0):
                    src = src + _mixed_term(u_old, a12, h)
                rhs = u_old + dt * src
                half = _implicit_diffusion_solve(diag_a[0], rhs, h[0], dt,
                                                 config.boundary,
                                                 config.linear_solver_tol)
                half = np.moveaxis(half, 1, 0)
                u_new = _implicit_diffusion_solve(np.moveaxis(diag_a[1], 1, 0), half,
                                                  h[1], dt, config.boundary,
                                                  config.linear_solver_tol)
                u_new = np.moveaxis(u_new, 0, 1)
            if np.any(np.isnan(u_new)):
                bad = np.argwhere(np.isnan(u_new))[0]
                raise HjbError(f"NaN in HJB solution at time index {k}, node {tuple(bad)}")
            p_lag = _grad(u_new, grid)
        values[k] = u_new
        grads[k] = p_lag

    if cfl_worst > 1.0:
        warnings.warn(f"explicit drift step reached dt|b|/h = {cfl_worst:.2f} > 1; "
                      "results may be inaccurate (diffusion remains implicit)",
                      CFLAdvisory, stacklevel=2)
    return ValueField(values, grads, grid)


def _grad(u: np.ndarray, grid: Grid) -> np.ndarray:
    if grid.dim == 1:
        return np.gradient(u, grid.h[0])
    return np.stack([np.gradient(u, grid.h[0], axis=0),
                     np.gradient(u, grid.h[1], axis=1)], axis=-1)
