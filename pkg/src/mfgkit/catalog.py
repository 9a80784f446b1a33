"""Built-in problem instances with their default grids, solver settings, and
oracle hooks.

All four entries are 1D with constant diffusion sqrt(2) (unit diffusion
coefficient) and truncation boxes sized so neither the density nor the
controlled dynamics reach the walls with visible mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ControlSpace, Grid, ProblemSpec, build_grid
from .mfg import FixedPointConfig

__all__ = ["CatalogEntry", "CATALOG", "get_entry", "list_catalog",
           "gaussian_density", "capped_quadratic", "heat_check_problem"]


def gaussian_density(mean: float, var: float) -> Callable:
    def m0(x):
        return np.exp(-(x - mean) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)
    return m0


def capped_quadratic(cap: float) -> Callable:
    """Smooth version of min(x^2/2, cap): cap * tanh(x^2 / (2 cap))."""
    def G(x):
        return cap * np.tanh(x * x / (2.0 * cap))
    return G


def _zero(t, x, m):
    return np.zeros_like(x)


def _sqrt2_sigma(t, x, m):
    return np.sqrt(2.0) * np.ones_like(x)


def _bump(s, s_cap=9.0):
    # smooth saturating version of s, linear near 0, bounded by s_cap
    return s_cap * np.tanh(s / s_cap)


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    description: str
    problem: ProblemSpec
    grid: Grid
    fixed_point: FixedPointConfig
    oracle: Optional[str] = None      # "hopf-cole" | "riccati" | None
    oracle_arg: Optional[float] = None
    controlled: bool = True


def _decoupled_hopfcole() -> CatalogEntry:
    cap = 25.0
    G = capped_quadratic(cap)
    problem = ProblemSpec(
        dim=1, horizon=1.0,
        drift_b0=_zero,
        drift_b1=lambda t, x, a: a,
        diffusion_sigma=_sqrt2_sigma,
        running_f0=_zero,
        running_f1=lambda t, x, a: 0.5 * a * a,
        terminal_g=lambda x, m: G(x),
        initial_density=gaussian_density(0.0, 0.25),
        control_space=ControlSpace.all_of_rn(),
        closed_form_phi=lambda t, x, p: -p,
        gamma1=1.0, gamma2=1.0, lipschitz=26.0,
        name="decoupled-hopfcole")
    grid = build_grid(1, -6.0, 6.0, 241, 1.0, 400)
    return CatalogEntry(
        name="decoupled-hopfcole",
        description="decoupled quadratic-control instance with smooth capped-"
                    "quadratic terminal cost; Hopf-Cole oracle applies",
        problem=problem, grid=grid,
        fixed_point=FixedPointConfig(theta=0.5, tol=1e-4, max_iters=50),
        oracle="hopf-cole", oracle_arg=cap)


def _lq_riccati() -> CatalogEntry:
    c = 0.5
    problem = ProblemSpec(
        dim=1, horizon=1.0,
        drift_b0=_zero,
        drift_b1=lambda t, x, a: a,
        diffusion_sigma=_sqrt2_sigma,
        running_f0=_zero,
        running_f1=lambda t, x, a: 0.5 * a * a,
        terminal_g=lambda x, m: c * x * x,
        initial_density=gaussian_density(0.0, 0.25),
        control_space=ControlSpace.all_of_rn(),
        closed_form_phi=lambda t, x, p: -p,
        gamma1=1.0, gamma2=1.0, lipschitz=36.0,
        name="lq-riccati")
    grid = build_grid(1, -6.0, 6.0, 241, 1.0, 1000)
    return CatalogEntry(
        name="lq-riccati",
        description="decoupled instance with quadratic terminal cost inside the "
                    "box; closed-form value function",
        problem=problem, grid=grid,
        fixed_point=FixedPointConfig(theta=0.5, tol=1e-4, max_iters=50),
        oracle="riccati", oracle_arg=c)


def _example5_weak(kappa: float = 0.1) -> CatalogEntry:
    G = capped_quadratic(25.0)

    def B(t, x, view):
        return 0.3 * np.tanh(view.mean - x)

    def F(t, x, view):
        return kappa * _bump((x - view.mean) ** 2)

    problem = ProblemSpec(
        dim=1, horizon=1.0,
        drift_b0=B,
        drift_b1=lambda t, x, a: a,
        diffusion_sigma=_sqrt2_sigma,
        running_f0=F,
        running_f1=lambda t, x, a: 0.5 * a * a,
        terminal_g=lambda x, m: G(x),
        initial_density=gaussian_density(0.5, 0.25),
        control_space=ControlSpace.all_of_rn(),
        closed_form_phi=lambda t, x, p: -p,
        gamma1=1.0, gamma2=1.0, lipschitz=26.0,
        name="example5-weak")
    grid = build_grid(1, -6.0, 6.0, 241, 1.0, 400)
    return CatalogEntry(
        name="example5-weak",
        description="quadratic-control instance with bounded mean-reverting "
                    "drift and weak mean-coupled running cost",
        problem=problem, grid=grid,
        fixed_point=FixedPointConfig(theta=0.5, tol=1e-4, max_iters=50))


def _uncontrolled_fp() -> CatalogEntry:
    problem = ProblemSpec(
        dim=1, horizon=1.0,
        drift_b0=lambda t, x, view: 0.5 * np.tanh(view.mean - x),
        drift_b1=lambda t, x, a: np.zeros_like(x),
        diffusion_sigma=_sqrt2_sigma,
        running_f0=_zero,
        running_f1=lambda t, x, a: np.zeros_like(x),
        terminal_g=lambda x, m: np.zeros_like(x),
        initial_density=gaussian_density(0.3, 0.25),
        control_space=ControlSpace.all_of_rn(),
        closed_form_phi=lambda t, x, p: np.zeros_like(p),
        gamma1=1.0, gamma2=1.0, lipschitz=2.0,
        name="uncontrolled-fp")
    grid = build_grid(1, -8.0, 8.0, 321, 1.0, 500)
    return CatalogEntry(
        name="uncontrolled-fp",
        description="control-free mean-coupled drift instance exercising the "
                    "forward equation and its particle dual alone",
        problem=problem, grid=grid,
        fixed_point=FixedPointConfig(theta=0.5, tol=1e-4, max_iters=50),
        controlled=False)


def heat_check_problem():
    """Zero-drift constant-diffusion instance with Gaussian initial density:
    the configuration whose forward solution is the analytic heat flow."""
    problem = ProblemSpec(
        dim=1, horizon=0.5,
        drift_b0=_zero,
        drift_b1=lambda t, x, a: np.zeros_like(x),
        diffusion_sigma=_sqrt2_sigma,
        running_f0=_zero,
        running_f1=lambda t, x, a: np.zeros_like(x),
        terminal_g=lambda x, m: np.zeros_like(x),
        initial_density=gaussian_density(0.0, 0.25),
        closed_form_phi=lambda t, x, p: np.zeros_like(p),
        gamma1=1.0, gamma2=1.0, lipschitz=2.0,
        name="heat-check")
    grid = build_grid(1, -8.0, 8.0, 321, 0.5, 500)
    return problem, grid


_BUILDERS = {
    "decoupled-hopfcole": _decoupled_hopfcole,
    "lq-riccati": _lq_riccati,
    "example5-weak": _example5_weak,
    "uncontrolled-fp": _uncontrolled_fp,
}


def get_entry(name: str) -> CatalogEntry:
    if name not in _BUILDERS:
        raise KeyError(f"unknown catalog problem {name!r}; "
                       f"choices: {', '.join(sorted(_BUILDERS))}")
    return _BUILDERS[name]()


def list_catalog() -> list:
    return [get_entry(n) for n in _BUILDERS]


CATALOG = tuple(_BUILDERS)
