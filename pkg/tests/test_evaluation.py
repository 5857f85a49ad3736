from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtipo import autodiff as ad
from dtipo.evaluation import (NeuralStrategy, bucketed_contributions, empirical_cdf, evaluate_strategy,
                              export_distributions, histogram, percentile_bands, robustness_eval)
from dtipo.market import paper_jump_market, sample_paths
from dtipo.objective import ObjectiveSpec
from dtipo.options import build_price_surface, default_strike_grid
from dtipo.policy import StrategyOutcome, TradingConstraints, init_params, run_allocation, simulate_strategy

MARKET = replace(paper_jump_market(), N=4)
CONS = TradingConstraints()
OBJ = ObjectiveSpec()


class AllBond:
    label = "bond"

    def simulate(self, batch, constraints, x0_IC=1.0):
        k = batch.n_stocks
        zero = lambda n, x, S: ad.Tensor(np.zeros((batch.M, k)))
        xN, cost, rec = run_allocation(batch, x0_IC, np.zeros(k), zero, constraints)
        M = batch.M
        return StrategyOutcome(returns=xN - x0_IC - cost, wealth=rec["wealth"], units=rec["units"],
                               bond_units=rec["bond_units"], beta=np.zeros(0), strikes=np.zeros(0),
                               option_prices=np.zeros(0), y0=0.0, yT=np.zeros(M), option_pnl=np.zeros((M, 0)),
                               tc=np.zeros((M, k)), R_SB=(xN - x0_IC).values, R_O=np.zeros(M), x0_hat=x0_IC)


@pytest.fixture(scope="module")
def neural():
    prices = build_price_surface(MARKET, default_strike_grid(0.75, 1.25, 11), 8192, 2)
    p = init_params(5, MARKET.N, 10, 3)
    p.theta_beta[:] = 0.5
    return NeuralStrategy(p, prices)


def test_all_bond_metrics():
    rep = evaluate_strategy(AllBond(), MARKET, CONS, OBJ, M_eval=2048, seed=4)
    growth = np.exp(MARKET.r * MARKET.T) - 1
    assert rep.mean == pytest.approx(growth, abs=1e-14)
    assert rep.var == pytest.approx(0, abs=1e-20)
    assert rep.es_lower == pytest.approx(growth) and rep.es_upper == pytest.approx(growth)
    assert rep.trading_cost_pct == 0 and rep.bankruptcy_freq == 0
    assert rep.wealth_terms["U"] == pytest.approx((1 + growth) * (1 + OBJ.lambda2 + OBJ.lambda3))
    assert len(rep.histogram["mass"]) == 1


def test_report_recomposes_and_serialises(neural, tmp_path):
    rep = evaluate_strategy(neural, MARKET, CONS, OBJ, M_eval=4096, seed=4)
    assert rep.recomposed_U() == pytest.approx(rep.U, abs=1e-12)
    assert sum(rep.histogram["mass"]) == pytest.approx(1.0)
    assert sum(b["frequency"] for b in rep.buckets) == pytest.approx(1.0)
    rep.to_json(tmp_path / "r.json")
    paths = export_distributions(rep, tmp_path / "dist")
    pdf = np.loadtxt(paths["pdf"], delimiter=",", skiprows=1)
    assert np.sum((pdf[:, 1] - pdf[:, 0]) * pdf[:, 2]) == pytest.approx(1.0)
    cdf = np.loadtxt(paths["cdf"], delimiter=",", skiprows=1)
    assert cdf[-1, 1] == 1.0 and np.all(np.diff(cdf[:, 1]) >= 0)


def test_evaluation_does_not_change_params(neural):
    before = neural.params.digest()
    evaluate_strategy(neural, MARKET, CONS, OBJ, M_eval=512, seed=4)
    assert neural.params.digest() == before


def test_unit_volatility_factor_is_plain_evaluation(neural):
    plain = evaluate_strategy(neural, MARKET, CONS, OBJ, M_eval=1024, seed=4)
    scaled = robustness_eval(neural, MARKET, CONS, OBJ, factors=(1.0,), M_eval=1024, seed=4)[1.0]
    assert np.array_equal(plain.returns, scaled.returns)
    with pytest.raises(ValueError):
        robustness_eval(neural, MARKET, CONS, OBJ, factors=(0.0,), M_eval=1024)


def test_seed_separation(neural):
    with pytest.raises(ValueError):
        evaluate_strategy(neural, MARKET, CONS, OBJ, M_eval=512, seed=3, train_seed=3)


def test_zero_option_amounts_contribute_nothing(neural):
    p = neural.params.copy()
    p.theta_beta[:] = -800.0
    out = simulate_strategy(p, sample_paths(MARKET, 256, 1), neural.prices, CONS)
    for row in bucketed_contributions(out):
        if not row["empty"]:
            assert abs(row["calls"]) < 1e-300 and abs(row["puts"]) < 1e-300


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=300))
def test_histogram_mass_and_cdf(xs):
    h = histogram(np.array(xs))
    assert sum(h["mass"]) == pytest.approx(1.0)
    assert np.all(np.diff(h["edges"]) > 0)
    knots, cdf = empirical_cdf(np.array(xs), 64)
    assert cdf[-1] == 1.0 and np.all(np.diff(cdf) >= 0)


def test_constant_sample_gives_one_bin():
    h = histogram(np.full(50, 1.2))
    assert h["mass"] == [1.0]


def test_bands_are_ordered():
    w = np.random.default_rng(0).lognormal(0, 0.2, (4096, 5))
    b = percentile_bands(w, np.linspace(0, 1, 5))
    assert all(lo <= m <= hi for lo, m, hi in zip(b["p5"], b["mean"], b["p95"]))
    assert all(se > 0 for se in b["p95_se"])


def test_bucket_edges_follow_half_open_rule():
    class Fake:
        option_kinds = []
        option_pnl = np.zeros((3, 0))
        R_SB = np.zeros(3)
        terminal_wealth = np.array([1.03, 1.1, 1.12])

    rows = bucketed_contributions(Fake())
    assert [r["count"] for r in rows] == [0, 2, 1]
    assert rows[0]["empty"] and rows[0]["R_SB"] is None
    with pytest.raises(ValueError):
        bucketed_contributions(Fake(), edges=(1.2, 1.1))
