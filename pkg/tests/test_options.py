import math

import numpy as np
import pytest

from dtipo.acceptance import black_scholes, jump_conditioned_price
from dtipo.market import MarketParams, paper_jump_market
from dtipo.options import (CALL, PUT, OptionSpec, PriceSurface, build_price_surface, default_strike_grid,
                           normalized_terminal_payoff, option_layout, price_european)


def one_stock(vol=0.25, jumps=0.0, r=0.05, T=1.0):
    return MarketParams(T=T, N=10, r=r, b=[0.1], sigma=[[vol]], jump_intensity=[jumps], jump_mean=[0.0],
                        jump_cov=[[0.04]])


def test_black_scholes_textbook_values():
    # S=42, K=40, r=10%, sigma=20%, T=6 months
    assert float(black_scholes(42 / 40, 1.0, 0.5, 0.1, 0.2)) * 40 == pytest.approx(4.7594, abs=1e-4)
    assert float(black_scholes(42 / 40, 1.0, 0.5, 0.1, 0.2, PUT)) * 40 == pytest.approx(0.8086, abs=1e-4)


def test_jump_oracle_reduces_to_black_scholes():
    p, bound = jump_conditioned_price(1.0, 0.9, 2.0, 0.06, 0.3, 0.0, 0.0, 0.2)
    assert p == pytest.approx(float(black_scholes(1.0, 0.9, 2.0, 0.06, 0.3)), rel=1e-12)
    assert bound == 0.0


@pytest.mark.parametrize("kind", [CALL, PUT])
def test_monte_carlo_matches_black_scholes(kind):
    m = one_stock()
    price, se = price_european(m, OptionSpec(kind, 0, 1.05), 200_000, seed=3)
    assert abs(price - float(black_scholes(1.0, 1.05, 1.0, 0.05, 0.25, kind))) < 4 * se


def test_monte_carlo_matches_jump_oracle():
    m = one_stock(jumps=0.8)
    price, se = price_european(m, OptionSpec(PUT, 0, 0.95), 400_000, seed=5)
    ref, bound = jump_conditioned_price(1.0, 0.95, 1.0, 0.05, 0.25, 0.8, 0.0, 0.04, PUT, max_jumps=5, nodes=32)
    assert abs(price - ref) < 4 * se + bound


def test_euler_scheme_is_available():
    price, se = price_european(one_stock(), OptionSpec(CALL, 0, 1.0), 50_000, 1, scheme="euler")
    assert abs(price - float(black_scholes(1.0, 1.0, 1.0, 0.05, 0.25))) < 4 * se + 5e-3


def test_put_call_parity_holds_on_common_numbers():
    m = paper_jump_market()
    surf = build_price_surface(m, [0.9, 1.1], 20_000, 2)
    k = m.n_stocks
    # C - P = e^{-rT}(mean S_T - K) exactly on the same draws
    diff = surf.prices[:k] - surf.prices[k:]
    np.testing.assert_allclose(np.diff(diff, axis=1), -(0.2 * math.exp(-0.12)), atol=1e-12)


def test_surface_interpolates_knots_and_is_monotone():
    surf = build_price_surface(one_stock(), default_strike_grid(0.75, 1.25, 11), 50_000, 4)
    np.testing.assert_allclose(surf.price(0, surf.strikes), surf.prices[0])
    assert np.all(surf.slope(0, np.linspace(0.76, 1.24, 30)) <= 0)
    assert np.all(surf.slope(1, np.linspace(0.76, 1.24, 30)) >= 0)
    with pytest.raises(ValueError):
        surf.price(0, 1.3)


def test_surface_prices_are_differentiable_in_strike():
    from dtipo import autodiff as ad
    surf = build_price_surface(paper_jump_market(), default_strike_grid(0.75, 1.25, 11), 20_000, 4)
    K = np.linspace(0.8, 1.2, 10)
    rev, fd = ad.gradient_check(lambda p: ad.reduce_sum(surf.prices_at(p[0]) * np.arange(1.0, 11.0)), [K])
    np.testing.assert_allclose(rev[0], fd[0], rtol=1e-5, atol=1e-8)


def test_surface_csv_roundtrip(tmp_path):
    surf = build_price_surface(paper_jump_market(), [0.8, 1.0, 1.2], 5000, 1)
    surf.to_csv(tmp_path / "s.csv")
    back = PriceSurface.from_csv(tmp_path / "s.csv")
    assert np.array_equal(back.prices, surf.prices)
    assert back.kinds == surf.kinds and back.underlyings == surf.underlyings


def test_layout_and_normalisation():
    assert option_layout(2) == [(CALL, 0), (CALL, 1), (PUT, 0), (PUT, 1)]
    spec = OptionSpec(CALL, 1, 1.0)
    s_T = np.array([[1.0, 1.5], [1.0, 0.5]])
    np.testing.assert_allclose(normalized_terminal_payoff(spec, 0.25, s_T), [2.0, 0.0])
    with pytest.raises(ValueError):
        normalized_terminal_payoff(spec, 0.0, s_T)


def test_input_validation():
    with pytest.raises(ValueError):
        OptionSpec("straddle", 0, 1.0)
    with pytest.raises(ValueError):
        price_european(one_stock(), OptionSpec(CALL, 0, 1.0), 10, 0)
    with pytest.raises(ValueError):
        build_price_surface(one_stock(), [1.0, 0.9], 2000, 0)


def test_worthless_option_is_rejected():
    m = one_stock(vol=0.01, r=0.0, T=0.1)
    with pytest.raises(ValueError):
        price_european(m, OptionSpec(CALL, 0, 3.0), 2000, 0)
