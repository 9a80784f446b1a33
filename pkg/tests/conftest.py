"""Shared fixtures: catalog solves and oracle fields are expensive, so they are
computed once per session and memoized by (name, refinement, theta)."""

from __future__ import annotations

import numpy as np
import pytest

from mfgkit.catalog import get_entry
from mfgkit.fp import FpSolverConfig
from mfgkit.hjb import HjbSolverConfig
from mfgkit.mfg import FixedPointConfig, solve_mfg


class SolveCache:
    def __init__(self):
        self._cache = {}

    def get(self, name: str, refine: int = 1, theta: float = None):
        """(entry, grid, u, m, report) for a converged catalog solve."""
        key = (name, refine, theta)
        if key not in self._cache:
            entry = get_entry(name)
            grid = entry.grid if refine == 1 else entry.grid.refine(refine)
            fx = entry.fixed_point
            if theta is not None:
                fx = FixedPointConfig(theta=theta, tol=fx.tol,
                                      max_iters=fx.max_iters)
            u, m, report = solve_mfg(entry.problem, grid, fx,
                                     HjbSolverConfig(), FpSolverConfig())
            self._cache[key] = (entry, grid, u, m, report)
        return self._cache[key]


@pytest.fixture(scope="session")
def solved():
    return SolveCache()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
