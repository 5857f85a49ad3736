import numpy as np
import pytest

from dtipo.market import paper_gbm_market, paper_jump_market, sample_gbm_exact
from dtipo.policy import TradingConstraints
from dtipo.reference import (PAPER_LAMBDA, AnalyticValidationError, analytic_solution, feedback_allocation,
                             mv_baseline_for_target_mean, simulate_feedback, validate_against_paper)


def test_closed_form_optimum_matches_published_value():
    a = analytic_solution(paper_gbm_market(), PAPER_LAMBDA)
    assert a.theoretical_objective == pytest.approx(1.1637, abs=5e-5)
    validate_against_paper(a)


def test_closed_form_is_consistent():
    m = paper_gbm_market()
    a = analytic_solution(m, 0.8, x0=2.0)
    excess = m.b - m.r
    rho = excess @ np.linalg.solve(m.sigma @ m.sigma.T, excess)
    assert a.rho == pytest.approx(rho)
    assert a.theoretical_objective == pytest.approx(2 * np.exp(m.r * m.T) + np.expm1(rho * m.T) / (4 * 0.8))


def test_validation_catches_a_perturbed_constant():
    a = analytic_solution(paper_gbm_market(), PAPER_LAMBDA * 1.05)
    with pytest.raises(AnalyticValidationError):
        validate_against_paper(a)


def test_feedback_rule_vanishes_at_the_target():
    a = analytic_solution(paper_gbm_market(), PAPER_LAMBDA)
    np.testing.assert_allclose(feedback_allocation(a, a.T, a.gamma), 0.0, atol=1e-14)
    out = feedback_allocation(a, 0.5, np.array([0.9, 1.0, 1.1]))
    assert out.shape == (3, 5)
    assert np.all(np.diff(out[:, 0]) < 0)


def test_target_mean_baseline():
    a = mv_baseline_for_target_mean(paper_jump_market(), 1.2)
    assert a.theoretical_mean == pytest.approx(1.2)
    with pytest.raises(ValueError):
        mv_baseline_for_target_mean(paper_jump_market(), 1.0)


def test_jumps_are_rejected():
    with pytest.raises(ValueError):
        analytic_solution(paper_jump_market(), 1.0)


def test_simulated_feedback_approaches_the_optimum():
    m = paper_gbm_market()
    a = analytic_solution(m, PAPER_LAMBDA)
    out = simulate_feedback(a, sample_gbm_exact(m, 2 ** 15, seed=4), TradingConstraints.mean_variance_benchmark())
    x = 1.0 + out.R
    U = x.mean() - PAPER_LAMBDA * x.var()
    se = x.std() / np.sqrt(x.size) * 3
    assert abs(U - a.theoretical_objective) < 0.01 + se
