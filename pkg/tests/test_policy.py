import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtipo import autodiff as ad
from dtipo.acceptance import structural_violations
from dtipo.market import paper_jump_market, sample_paths
from dtipo.options import build_price_surface, default_strike_grid
from dtipo.policy import (PolicyParams, TradingConstraints, activate_alpha0, activate_beta, activate_strikes,
                          alpha_network_forward, init_params, run_allocation, simulate_strategy)

finite = st.floats(-50, 50, allow_nan=False)
CONS = TradingConstraints()


@pytest.fixture(scope="module")
def setup():
    m = paper_jump_market()
    prices = build_price_surface(m, default_strike_grid(0.75, 1.25, 11), 20_000, 2)
    batch = sample_paths(m, 256, 3)
    return m, prices, batch


def test_parameter_count():
    assert init_params(5, 20, 10, 0).size == 10760


@given(st.lists(finite, min_size=1, max_size=10), st.floats(0, 3))
def test_beta_is_admissible(theta, beta_max):
    beta = activate_beta(np.array(theta), TradingConstraints(beta_max=beta_max)).values
    assert np.all(beta >= 0)
    assert beta.sum() <= min(1.0, beta_max) + 1e-12


def test_beta_renormalises_only_above_one():
    big = activate_beta(np.full(4, 30.0), TradingConstraints(beta_max=2.0)).values
    assert big.sum() == pytest.approx(1.0)
    small = activate_beta(np.zeros(4), TradingConstraints(beta_max=1.0)).values
    np.testing.assert_allclose(small, 0.125)


@given(st.lists(finite, min_size=1, max_size=10))
def test_strikes_in_range(theta):
    K = activate_strikes(np.array(theta), CONS).values
    assert np.all((K >= CONS.K_low) & (K <= CONS.K_high))


@given(st.lists(finite, min_size=1, max_size=5), st.floats(0.01, 5))
def test_initial_allocation_in_range(theta, x0):
    a = activate_alpha0(np.array(theta), CONS, x0).values
    assert np.all((a >= -2 * x0 - 1e-12) & (a <= 2 * x0 + 1e-12))


@settings(max_examples=20)
@given(st.integers(0, 1000), st.floats(0.05, 4))
def test_network_positions_in_range(seed, wealth):
    layer = init_params(3, 2, 0, seed).nets[0]
    rng = np.random.default_rng(seed)
    S = rng.uniform(0.2, 3, 3)
    x = np.full(4, wealth)
    units = alpha_network_forward(x, [w * 10 for w in layer], S, CONS).values
    value = units * S
    assert np.all(np.abs(value) <= 2 * wealth * (1 + 1e-12))


def test_absorbed_stock_has_no_position():
    layer = init_params(2, 2, 0, 1).nets[0]
    with pytest.raises(ZeroDivisionError):
        alpha_network_forward(np.ones(3), layer, np.array([1.0, 0.0]), CONS)
    units = alpha_network_forward(np.ones(3), layer, np.array([1.0, 0.0]), CONS, mask_absorbed=True).values
    assert np.all(units[:, 1] == 0)


@settings(max_examples=10)
@given(st.integers(0, 10_000), st.booleans())
def test_structural_invariants(seed, aggressive):
    res = structural_violations(seed, M=128, aggressive=aggressive)
    assert res["self_financing"] <= 1e-10
    assert res["budget"] <= 1e-10
    assert res["frozen_ok"]


def test_buy_and_hold_wealth_and_no_cost(setup):
    m, _, batch = setup
    units0 = np.full(5, 0.1)
    hold = lambda n, x, S_n: ad.Tensor(np.tile(units0, (batch.M, 1)))
    xN, cost, rec = run_allocation(batch, 1.0, units0, hold, TradingConstraints(C=0.005, include_initial_trade_cost=False))
    expected = 0.5 * batch.bond[-1] + batch.stocks[:, -1] @ units0
    np.testing.assert_allclose(xN.values, expected, rtol=1e-12)
    assert np.all(cost.values == 0)


def test_outcome_accounting(setup):
    m, prices, batch = setup
    p = init_params(5, m.N, 10, 7)
    p.theta_beta[:] = 1.0
    out = simulate_strategy(p, batch, prices, CONS)
    assert out.y0 == pytest.approx(out.beta.sum())
    assert out.x0_hat == pytest.approx(1.0 - out.y0)
    np.testing.assert_allclose(out.R, out.R_SB + out.R_O)
    np.testing.assert_allclose(out.R_O, out.option_pnl.sum(axis=1), atol=1e-12)
    np.testing.assert_allclose(out.R_SB, out.wealth[:, -1] - out.x0_hat - out.tc.sum(axis=1), atol=1e-12)


def test_options_can_be_disabled(setup):
    m, prices, batch = setup
    p = init_params(5, m.N, 10, 7)
    p.theta_beta[:] = 3.0
    out = simulate_strategy(p, batch, prices, TradingConstraints(options_enabled=False))
    assert out.y0 == 0 and np.all(out.R_O == 0)
    with pytest.raises(ValueError):
        simulate_strategy(p, batch, None, CONS)


def test_serialisation_roundtrip():
    p = init_params(5, 20, 10, 3)
    p.theta_K[:] = np.linspace(-1, 1, 10)
    back = PolicyParams.from_dict(p.to_dict())
    assert back.digest() == p.digest()
    d = p.to_dict()
    d["architecture"]["N"] = 10
    with pytest.raises((ValueError, KeyError)):
        PolicyParams.from_dict(d)


def test_constraint_validation():
    with pytest.raises(ValueError):
        TradingConstraints(K_low=1.3)
    with pytest.raises(ValueError):
        TradingConstraints(NB=2)
    with pytest.raises(ValueError):
        TradingConstraints.from_dict({"beta_maximum": 1})
    assert TradingConstraints.from_dict(CONS.to_dict()) == CONS
