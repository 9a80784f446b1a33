import numpy as np
import pytest

from mfgkit.core import MeasureFlow, build_grid, discretize_initial_density
from mfgkit.catalog import gaussian_density, get_entry
from mfgkit.cost import (evaluate_cost, expected_initial_value,
                         verify_optimality)
from mfgkit.oracle import lq_riccati_value
from mfgkit.mfg import feedback_policy
from test_particle import _problem, _flow


def _zero_policy(grid):
    return np.zeros((grid.nt + 1, grid.nx))


def test_constant_terminal_payoff():
    p = _problem(terminal_g=lambda x, m: np.full_like(x, 3.7),
                 diffusion_sigma=lambda t, x, m: np.ones_like(x),
                 gamma1=0.5, gamma2=0.5)
    g = build_grid(1, -6.0, 6.0, 121, 1.0, 50)
    est = evaluate_cost(p, g, _flow(p, g), _zero_policy(g), 500, seed=1)
    assert est.mean == pytest.approx(3.7, abs=1e-12)
    assert est.std_error <= 1e-15  # identical path costs up to accumulation round-off


def test_unit_running_cost_integrates_horizon():
    p = _problem(running_f0=lambda t, x, m: np.ones_like(x),
                 diffusion_sigma=lambda t, x, m: np.ones_like(x),
                 gamma1=0.5, gamma2=0.5)
    g = build_grid(1, -6.0, 6.0, 121, 1.0, 50)
    est = evaluate_cost(p, g, _flow(p, g), _zero_policy(g), 500, seed=1)
    assert est.mean == pytest.approx(1.0, abs=1e-12)
    assert est.std_error <= 1e-15  # identical path costs up to accumulation round-off


def test_terminal_shift_moves_mean_exactly():
    import dataclasses
    e = get_entry("lq-riccati")
    g = build_grid(1, -6.0, 6.0, 121, 1.0, 100)
    u = lq_riccati_value(0.5, g)
    pol = feedback_policy(e.problem, g, u)
    m0, _ = discretize_initial_density(e.problem, g)
    mu = MeasureFlow.constant_in_time(m0, g)
    base = evaluate_cost(e.problem, g, mu, pol, 2000, seed=5)
    shifted_problem = dataclasses.replace(
        e.problem, terminal_g=lambda x, m: 0.5 * x * x + 2.0)
    shifted = evaluate_cost(shifted_problem, g, mu, pol, 2000, seed=5)
    assert shifted.mean - base.mean == pytest.approx(2.0, abs=1e-12)
    assert shifted.std_error == pytest.approx(base.std_error, abs=1e-12)


def test_expected_initial_value_examples():
    g = build_grid(1, -6.0, 6.0, 241, 1.0, 10)
    m0 = gaussian_density(0.0, 1.0)(g.axis(0))
    m0 /= m0.sum() * g.h[0]

    class U:  # minimal stand-in with a values attribute
        pass

    u = U()
    u.values = np.full((11, 241), 2.5)
    assert expected_initial_value(u, m0, g) == pytest.approx(2.5, abs=1e-12)
    u.values = np.tile(g.axis(0), (11, 1))
    assert expected_initial_value(u, m0, g) == pytest.approx(0.0, abs=1e-12)
    u.values = np.tile(g.axis(0) ** 2, (11, 1))
    assert expected_initial_value(u, m0, g) == pytest.approx(1.0, abs=1e-3)


def test_lq_cost_matches_expected_initial_value(solved):
    e, g, u, m, _ = solved.get("lq-riccati")
    ref = lq_riccati_value(0.5, g)
    pol = feedback_policy(e.problem, g, ref)
    est = evaluate_cost(e.problem, g, m, pol, 50_000, seed=9)
    expect = expected_initial_value(ref, m.densities[0], g)
    assert abs(est.mean - expect) <= 3 * est.std_error + 2e-2


def test_zero_perturbation_is_exact_equality(solved):
    e, g, u, m, _ = solved.get("lq-riccati")
    pol = feedback_policy(e.problem, g, u)
    rep = verify_optimality(e.problem, g, u, m, n_perturbations=1,
                            n_paths=2000, seed=11, epsilons=(0.0,),
                            policy=pol)
    assert rep.perturbations[0].gap == 0.0
    assert rep.perturbations[0].cost.mean == rep.feedback_cost.mean


def test_perturbations_never_beat_feedback_significantly(solved):
    e, g, u, m, _ = solved.get("lq-riccati")
    rep = verify_optimality(e.problem, g, u, m, n_perturbations=3,
                            n_paths=20_000, seed=13)
    assert rep.value_check_passed
    assert rep.all_perturbations_passed
    assert len(rep.perturbations) == 6  # 3 directions x 2 epsilons


def test_std_error_scales_inverse_sqrt_n(solved):
    e, g, u, m, _ = solved.get("lq-riccati")
    pol = feedback_policy(e.problem, g, u)
    small = evaluate_cost(e.problem, g, m, pol, 1_000, seed=21)
    large = evaluate_cost(e.problem, g, m, pol, 25_000, seed=21)
    ratio = small.std_error / large.std_error
    assert ratio == pytest.approx(5.0, rel=0.25)  # sqrt(25)
