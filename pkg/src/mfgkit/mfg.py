"""The fixed-point map (HJB solve, then FP solve under the induced feedback) and
the damped Picard iteration that produces the MFG solution.

The first outer step takes the full map output (the constant-in-time initial
guess is far from the fixed set); damping applies from the second step on. For
instances whose map ignores the measure this makes the iteration terminate in
exactly two steps with a zero second residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Grid, MeasureFlow, ProblemSpec, ValueField, discretize_initial_density
from .fp import FpSolverConfig, solve_fp
from .hamiltonian import PhiEvaluator, minimize_H
from .hjb import HjbSolverConfig, solve_hjb
from .measure import FlowRegularityReport, flow_distance, flow_regularity

__all__ = [
    "FixedPointConfig",
    "FixedPointReport",
    "IterationState",
    "feedback_policy",
    "apply_phi",
    "solve_mfg",
    "pde_residual",
]


@dataclass(frozen=True)
class FixedPointConfig:
    theta: float = 0.5          # damping of the Picard update
    tol: float = 1e-4           # stopping threshold on sup_t d1(mu_k(t), mu_{k+1}(t))
    max_iters: int = 100
    initial_guess: str = "m0"   # "m0" (constant-in-time) | "uncontrolled"

    def __post_init__(self):
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("damping theta must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.initial_guess not in ("m0", "uncontrolled"):
            raise ValueError(f"unknown initial guess {self.initial_guess!r}")


@dataclass
class FixedPointReport:
    residual_history: list = field(default_factory=list)
    iterations_used: int = 0
    converged: bool = False
    final_flow_regularity: Optional[FlowRegularityReport] = None
    pde_residuals: tuple = (np.nan, np.nan)

    def to_dict(self) -> dict:
        return {
            "residual_history": [float(r) for r in self.residual_history],
            "iterations_used": self.iterations_used,
            "converged": self.converged,
            "final_flow_regularity": (self.final_flow_regularity.to_dict()
                                      if self.final_flow_regularity else None),
            "pde_residuals": {"hjb": float(self.pde_residuals[0]),
                              "fp": float(self.pde_residuals[1])},
        }


@dataclass
class IterationState:
    """Resumable outer-iteration state (serialized by the CLI checkpoint)."""

    iteration: int
    mu: np.ndarray
    residual_history: list


def feedback_policy(problem: ProblemSpec, grid: Grid, u: ValueField,
                    evaluator: Optional[PhiEvaluator] = None) -> np.ndarray:
    """The closed-loop control field: the Hamiltonian minimizer evaluated at the
    stored gradient, per time level and node."""
    if evaluator is None:
        evaluator = PhiEvaluator.for_problem(problem)
    coords = grid.coords()
    shape = (grid.nt + 1,) + grid.shape + ((2,) if grid.dim == 2 else ())
    out = np.empty(shape)
    for k in range(grid.nt + 1):
        out[k] = minimize_H(problem, evaluator, grid.time(k), coords, u.du[k])
    return out


def apply_phi(problem: ProblemSpec, grid: Grid, mu: MeasureFlow,
              hjb_config: HjbSolverConfig = HjbSolverConfig(),
              fp_config: FpSolverConfig = FpSolverConfig(),
              evaluator: Optional[PhiEvaluator] = None):
    """One application of the map: solve the backward equation under mu, extract
    the feedback policy, push m0 forward under it. Returns (u, m)."""
    if evaluator is None:
        evaluator = PhiEvaluator.for_problem(problem)
    u = solve_hjb(problem, grid, mu, hjb_config, evaluator)
    policy = feedback_policy(problem, grid, u, evaluator)
    m = solve_fp(problem, grid, mu, policy, fp_config)
    return u, m


def solve_mfg(problem: ProblemSpec, grid: Grid,
              config: FixedPointConfig = FixedPointConfig(),
              hjb_config: HjbSolverConfig = HjbSolverConfig(),
              fp_config: FpSolverConfig = FpSolverConfig(),
              initial_state: Optional[IterationState] = None,
              on_iteration=None):
    """Damped Picard iteration on the measure flow.

    Non-convergence within max_iters returns the best iterate with
    converged=False (existence is known, convergence of the iteration is not).
    on_iteration(state) is called after every outer step for checkpointing;
    initial_state resumes from such a state bit-for-bit.
    """
    evaluator = PhiEvaluator.for_problem(problem)
    report = FixedPointReport()

    if initial_state is not None:
        mu = MeasureFlow(initial_state.mu.copy(), grid)
        report.residual_history = list(initial_state.residual_history)
        start = initial_state.iteration
    else:
        m0, _ = discretize_initial_density(problem, grid)
        if config.initial_guess == "uncontrolled":
            mu = solve_fp(problem, grid, None, None, fp_config)
        else:
            mu = MeasureFlow.constant_in_time(m0, grid)
        start = 0

    u = m = None
    converged = False
    it = start
    for it in range(start + 1, config.max_iters + 1):
        u, m = apply_phi(problem, grid, mu, hjb_config, fp_config, evaluator)
        if it == 1:
            mu_next = m  # full first step away from the initial guess
        else:
            mixed = (1.0 - config.theta) * mu.densities + config.theta * m.densities
            mu_next = MeasureFlow(mixed, grid)
        rho = flow_distance(mu, mu_next, grid)
        report.residual_history.append(rho)
        mu = mu_next
        if on_iteration is not None:
            on_iteration(IterationState(iteration=it, mu=mu.densities.copy(),
                                        residual_history=list(report.residual_history)))
        if rho <= config.tol:
            converged = True
            break

    report.iterations_used = it
    report.converged = converged
    if u is None:  # resumed from a state that was already converged
        u, m = apply_phi(problem, grid, mu, hjb_config, fp_config, evaluator)
    report.final_flow_regularity = flow_regularity(m, grid)
    report.pde_residuals = pde_residual(problem, grid, u, m, evaluator=evaluator)
    return u, m, report


def pde_residual(problem: ProblemSpec, grid: Grid, u: ValueField, m: MeasureFlow,
                 margin: int = 10, evaluator: Optional[PhiEvaluator] = None):
    """Centered finite-difference residuals of the coupled system evaluated on
    the computed pair, maxed over interior nodes and time levels 1..nt-1."""
    if evaluator is None:
        evaluator = PhiEvaluator.for_problem(problem)
    coords = grid.coords()
    dt = grid.dt
    uv, mv = u.values, m.densities
    hjb_worst = 0.0
    fp_worst = 0.0
    inner = (slice(margin, -margin),) * grid.dim
    for k in range(1, grid.nt):
        t = grid.time(k)
        view = m.view(k)
        alpha = minimize_H(problem, evaluator, t, coords, u.du[k])
        b = problem.drift_b0(t, coords, view) + problem.drift_b1(t, coords, alpha)
        f = problem.running_f0(t, coords, view) + problem.running_f1(t, coords, alpha)
        sig = np.asarray(problem.diffusion_sigma(t, coords, view), dtype=float)
        u_t = (uv[k + 1] - uv[k - 1]) / (2 * dt)
        m_t = (mv[k + 1] - mv[k - 1]) / (2 * dt)
        if grid.dim == 1:
            a = np.broadcast_to(0.5 * sig ** 2, grid.shape)
            h = grid.h[0]
            u_xx = _second_diff(uv[k], h)
            adv = np.broadcast_to(b, grid.shape) * u.du[k]
            r_hjb = u_t + adv + a * u_xx + np.broadcast_to(f, grid.shape)
            am_xx = _second_diff(a * mv[k], h)
            div_bm = np.gradient(np.broadcast_to(b, grid.shape) * mv[k], h)
            r_fp = m_t - am_xx + div_bm
        else:
            if sig.ndim == 2:
                sig = np.broadcast_to(sig, grid.shape + (2, 2))
            a = 0.5 * np.einsum("...ik,...jk->...ij", sig, sig)
            h1, h2 = grid.h
            u_xx = _second_diff(uv[k], h1, axis=0)
            u_yy = _second_diff(uv[k], h2, axis=1)
            u_xy = np.gradient(np.gradient(uv[k], h1, axis=0), h2, axis=1)
            adv = (b[..., 0] * u.du[k][..., 0] + b[..., 1] * u.du[k][..., 1])
            diff = a[..., 0, 0] * u_xx + a[..., 1, 1] * u_yy + 2 * a[..., 0, 1] * u_xy
            r_hjb = u_t + adv + diff + f
            q11 = _second_diff(a[..., 0, 0] * mv[k], h1, axis=0)
            q22 = _second_diff(a[..., 1, 1] * mv[k], h2, axis=1)
            q12 = np.gradient(np.gradient(a[..., 0, 1] * mv[k], h1, axis=0), h2, axis=1)
            div_bm = (np.gradient(b[..., 0] * mv[k], h1, axis=0)
                      + np.gradient(b[..., 1] * mv[k], h2, axis=1))
            r_fp = m_t - (q11 + q22 + 2 * q12) + div_bm
        hjb_worst = max(hjb_worst, float(np.max(np.abs(r_hjb[inner]))))
        fp_worst = max(fp_worst, float(np.max(np.abs(r_fp[inner]))))
    return hjb_worst, fp_worst


def _second_diff(v: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    v = np.moveaxis(v, axis, 0)
    out = np.zeros_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h ** 2
    out[0] = out[1]
    out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)
