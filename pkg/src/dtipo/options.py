"""European calls and puts held statically from t=0 to T.

Option ``i < n_stocks`` is a call on stock ``i``; option ``n_stocks + i`` is
a put on stock ``i``. Prices are risk-neutral Monte Carlo estimates and every
option is normalised by its t=0 price so one unit costs exactly 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import autodiff as ad
from .market import RISK_NEUTRAL, MarketParams, sample_paths, sample_terminal_exact

CALL, PUT = "call", "put"
_CHUNK = 1 << 16


@dataclass(frozen=True)
class OptionSpec:
    kind: str
    underlying: int
    strike: float

    def __post_init__(self):
        if self.kind not in (CALL, PUT):
            raise ValueError(f"option kind must be 'call' or 'put', got {self.kind!r}")

    def payoff(self, s_T: np.ndarray) -> np.ndarray:
        s = np.asarray(s_T)[..., self.underlying]
        if self.kind == CALL:
            return np.maximum(s - self.strike, 0.0)
        return np.maximum(self.strike - s, 0.0)


def option_layout(n_stocks: int) -> list[tuple[str, int]]:
    """(kind, underlying) for every option: all calls first, then all puts."""
    return [(CALL, i) for i in range(n_stocks)] + [(PUT, i) for i in range(n_stocks)]


def _terminal_chunks(params: MarketParams, M: int, seed: int, scheme: str):
    for lo in range(0, M, _CHUNK):
        n = min(_CHUNK, M - lo)
        if scheme == "exact":
            yield sample_terminal_exact(params, n, seed, RISK_NEUTRAL, namespace="price", start=lo)
        elif scheme == "euler":
            yield sample_paths(params, n, seed, RISK_NEUTRAL, namespace="price", start=lo).stocks[:, -1]
        else:
            raise ValueError(f"unknown pricing scheme {scheme!r}")


def price_european(params: MarketParams, spec: OptionSpec, M_price: int, seed: int,
                   scheme: str = "exact") -> tuple[float, float]:
    """Discounted risk-neutral Monte Carlo price and its standard error.

    ``scheme="exact"`` samples S_T from the continuous-time law;
    ``scheme="euler"`` uses the trading-grid Euler paths.
    """
    if M_price < 1000:
        raise ValueError(f"M_price must be at least 1000, got {M_price}")
    total = total_sq = 0.0
    for s_T in _terminal_chunks(params, M_price, seed, scheme):
        pay = spec.payoff(s_T)
        total += pay.sum()
        total_sq += np.dot(pay, pay)
    mean = total / M_price
    var = max(total_sq / M_price - mean ** 2, 0.0)
    disc = np.exp(-params.r * params.T)
    price, se = disc * mean, disc * np.sqrt(var / M_price)
    if not price > 0:
        raise ValueError(f"non-positive price {price} for {spec}; strike/volatility configuration is degenerate")
    return float(price), float(se)


def normalized_terminal_payoff(spec: OptionSpec, price: float, s_T: np.ndarray) -> np.ndarray:
    """Raw payoff divided by the t=0 price."""
    if not price > 0:
        raise ValueError(f"option price must be positive, got {price}")
    return spec.payoff(s_T) / price


@dataclass
class PriceSurface:
    """t=0 prices of every option on a common strike grid.

    ``prices`` and ``std_errors`` have shape (n_options, n_knots). Each row is
    interpolated with a monotone cubic so the price is differentiable in K.
    """

    strikes: np.ndarray
    prices: np.ndarray
    std_errors: np.ndarray
    kinds: list
    underlyings: list
    M_price: int
    seed: int

    def __post_init__(self):
        self._interp = [PchipInterpolator(self.strikes, row, extrapolate=False) for row in self.prices]
        self._deriv = [f.derivative() for f in self._interp]

    @property
    def n_options(self) -> int:
        return self.prices.shape[0]

    def _check_range(self, K: np.ndarray) -> None:
        lo, hi = self.strikes[0], self.strikes[-1]
        tol = 1e-12 * max(1.0, abs(hi))
        if np.any(K < lo - tol) or np.any(K > hi + tol):
            raise ValueError(f"strike outside the priced range [{lo}, {hi}]: {K}")

    def price(self, i: int, K) -> np.ndarray:
        K = np.asarray(K, dtype=float)
        self._check_range(K)
        return self._interp[i](np.clip(K, self.strikes[0], self.strikes[-1]))

    def slope(self, i: int, K) -> np.ndarray:
        K = np.asarray(K, dtype=float)
        self._check_range(K)
        return self._deriv[i](np.clip(K, self.strikes[0], self.strikes[-1]))

    def prices_at(self, strikes) -> ad.Tensor:
        """Price of option i at strikes[i], differentiable in the strikes."""
        n = self.n_options

        def f(K):
            return np.array([self.price(i, K[i]) for i in range(n)], dtype=float)

        def df(K):
            return np.array([self.slope(i, K[i]) for i in range(n)], dtype=float)

        return ad.apply_elementwise(strikes, f, df, "price_surface")

    def spec(self, i: int, strike: float) -> OptionSpec:
        return OptionSpec(self.kinds[i], self.underlyings[i], float(strike))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["option_id", "kind", "underlying", "strike", "price", "std_error"])
            for i in range(self.n_options):
                for j, K in enumerate(self.strikes):
                    w.writerow([i, self.kinds[i], self.underlyings[i], repr(float(K)),
                                repr(float(self.prices[i, j])), repr(float(self.std_errors[i, j]))])

    @classmethod
    def from_csv(cls, path: str | Path, M_price: int = 0, seed: int = 0) -> PriceSurface:
        rows = list(csv.DictReader(open(path, newline="")))
        ids = sorted({int(r["option_id"]) for r in rows})
        strikes = np.array(sorted({float(r["strike"]) for r in rows}))
        prices = np.zeros((len(ids), len(strikes)))
        errs = np.zeros_like(prices)
        kinds, unders = [None] * len(ids), [None] * len(ids)
        col = {K: j for j, K in enumerate(strikes)}
        for r in rows:
            i, j = int(r["option_id"]), col[float(r["strike"])]
            prices[i, j], errs[i, j] = float(r["price"]), float(r["std_error"])
            kinds[i], unders[i] = r["kind"], int(r["underlying"])
        return cls(strikes, prices, errs, kinds, unders, M_price, seed)


def build_price_surface(params: MarketParams, strikes, M_price: int, seed: int,
                        scheme: str = "exact") -> PriceSurface:
    """Price all calls and puts on ``strikes`` with common random numbers."""
    strikes = np.asarray(strikes, dtype=float)
    if strikes.ndim != 1 or strikes.size < 2 or np.any(np.diff(strikes) <= 0):
        raise ValueError("strike grid needs at least 2 strictly increasing knots")
    if M_price < 1000:
        raise ValueError(f"M_price must be at least 1000, got {M_price}")
    layout = option_layout(params.n_stocks)
    n_opt = len(layout)
    total = np.zeros((n_opt, strikes.size))
    total_sq = np.zeros_like(total)
    k = params.n_stocks
    for s_T in _terminal_chunks(params, M_price, seed, scheme):
        # (n, k, knots)
        diff = s_T[:, :, None] - strikes[None, None, :]
        call = np.maximum(diff, 0.0)
        put = np.maximum(-diff, 0.0)
        total[:k] += call.sum(axis=0)
        total[k:] += put.sum(axis=0)
        total_sq[:k] += (call * call).sum(axis=0)
        total_sq[k:] += (put * put).sum(axis=0)
    disc = np.exp(-params.r * params.T)
    mean = total / M_price
    var = np.maximum(total_sq / M_price - mean ** 2, 0.0)
    prices = disc * mean
    if np.any(prices <= 0):
        raise ValueError("non-positive option price on the strike grid")
    return PriceSurface(strikes=strikes, prices=prices, std_errors=disc * np.sqrt(var / M_price),
                        kinds=[kd for kd, _ in layout], underlyings=[u for _, u in layout],
                        M_price=M_price, seed=seed)


def default_strike_grid(K_low: float = 0.75, K_high: float = 1.25, knots: int = 51) -> np.ndarray:
    return np.linspace(K_low, K_high, knots)
