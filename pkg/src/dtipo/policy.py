"""Trainable trading strategy and the Monte Carlo wealth simulator.

A strategy consists of

* static option amounts ``β`` and strikes ``K`` chosen at t=0,
* a static initial stock allocation ``α₀``,
* one small feed-forward network per rebalance date t₁..t_{N-1} mapping the
  current stock+bond wealth to new stock holdings.

Output activations map any raw parameter value into the admissible set, so
every strategy the optimiser visits satisfies the trading constraints.
"""
from __future__ import annotations

import base64
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .market import PathBatch
from .options import CALL, PriceSurface, option_layout

HIDDEN = (20, 20)


@dataclass(frozen=True)
class TradingConstraints:
    """Admissible set of the strategy.

    Stock position bounds are ``alpha_low_frac * x_n`` and ``alpha_high_frac * x_n``
    (currency value per stock) when ``alpha_wealth_proportional`` is set, and
    absolute values otherwise. ``unconstrained_alpha`` replaces the stock
    output activations by the identity.
    """

    beta_max: float = 1.0
    K_low: float = 0.75
    K_high: float = 1.25
    alpha_low_frac: float = -2.0
    alpha_high_frac: float = 2.0
    alpha_wealth_proportional: bool = True
    NB: int = 1
    C: float = 0.005
    include_initial_trade_cost: bool = True
    unconstrained_alpha: bool = False
    options_enabled: bool = True
    normalize_input: bool = False

    def __post_init__(self):
        if not self.K_low < self.K_high:
            raise ValueError(f"need K_low < K_high, got {self.K_low}, {self.K_high}")
        if self.beta_max < 0 or self.C < 0:
            raise ValueError("beta_max and C must be non-negative")
        if self.NB not in (0, 1):
            raise ValueError("NB must be 0 or 1")
        if not self.alpha_low_frac <= self.alpha_high_frac:
            raise ValueError("alpha_low_frac must not exceed alpha_high_frac")

    @classmethod
    def mean_variance_benchmark(cls) -> TradingConstraints:
        """No constraints, costs or bankruptcy rule, no options."""
        return cls(NB=0, C=0.0, unconstrained_alpha=True, options_enabled=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TradingConstraints:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown constraint fields: {sorted(unknown)}")
        return cls(**d)


# --- parameters --------------------------------------------------------------

@dataclass
class PolicyParams:
    """All trainable parameters.

    ``nets[n-1]`` holds ``[W1, b1, W2, b2, W3, b3]`` of the network used at
    date t_n. Entries are numpy arrays, or Tensors while recording a tape.
    """

    theta_beta: object
    theta_K: object
    theta_alpha0: object
    nets: list = field(default_factory=list)

    @property
    def n_options(self) -> int:
        return int(np.shape(_raw(self.theta_beta))[0])

    @property
    def n_stocks(self) -> int:
        return int(np.shape(_raw(self.theta_alpha0))[0])

    @property
    def N(self) -> int:
        return len(self.nets) + 1

    def arrays(self) -> list:
        out = [self.theta_beta, self.theta_K, self.theta_alpha0]
        for layer in self.nets:
            out.extend(layer)
        return out

    def names(self) -> list[str]:
        out = ["theta_beta", "theta_K", "theta_alpha0"]
        for n, layer in enumerate(self.nets, start=1):
            out.extend(f"net{n}.{p}" for p in ("W1", "b1", "W2", "b2", "W3", "b3")[:len(layer)])
        return out

    def with_arrays(self, arrays: list) -> PolicyParams:
        it = iter(arrays)
        beta, K, a0 = next(it), next(it), next(it)
        nets = [[next(it) for _ in layer] for layer in self.nets]
        return PolicyParams(beta, K, a0, nets)

    def on_tape(self, tape: ad.Tape) -> PolicyParams:
        return self.with_arrays([tape.leaf(a) for a in self.arrays()])

    def copy(self) -> PolicyParams:
        return self.with_arrays([np.array(_raw(a), dtype=np.float64, copy=True) for a in self.arrays()])

    @property
    def size(self) -> int:
        return int(sum(np.size(_raw(a)) for a in self.arrays()))

    def architecture(self) -> dict:
        widths = [1]
        if self.nets:
            widths += [np.shape(_raw(w))[1] for w in self.nets[0][0::2]]
        else:
            widths += list(HIDDEN) + [self.n_stocks]
        return {"n_stocks": self.n_stocks, "n_options": self.n_options, "N": self.N, "widths": widths}

    def to_dict(self) -> dict:
        return {"architecture": self.architecture(),
                "arrays": {name: encode_array(_raw(a)) for name, a in zip(self.names(), self.arrays())}}

    @classmethod
    def from_dict(cls, d: dict) -> PolicyParams:
        arch = d["architecture"]
        template = init_params(arch["n_stocks"], arch["N"], arch["n_options"], seed=0,
                               hidden=tuple(arch["widths"][1:-1]))
        if set(d["arrays"]) != set(template.names()):
            raise ValueError("stored arrays do not match the declared architecture")
        arrays = []
        for name, ref in zip(template.names(), template.arrays()):
            a = decode_array(d["arrays"][name])
            if a.shape != np.shape(ref):
                raise ValueError(f"{name}: shape {a.shape} does not match architecture {np.shape(ref)}")
            arrays.append(a)
        return template.with_arrays(arrays)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(_raw(a), dtype="<f8").tobytes())
        return h.hexdigest()


def _raw(a):
    return a.values if isinstance(a, Tensor) else a


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def init_params(n_stocks: int, N: int, n_options: int, seed: int, hidden=HIDDEN) -> PolicyParams:
    """Static parameters start at 0; network weights use fan-in uniform draws.

    Hidden layers draw from U(±sqrt(6/fan_in)) and the output layer from
    U(±sqrt(3/fan_in)); biases start at 0. Each date's network has its own
    seed stream so runs with and without options share network initialisation.
    """
    nets = []
    widths = (1, *hidden, n_stocks)
    for n in range(1, N):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1000 + n]))
        layer = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            gain = 3.0 if i == len(widths) - 2 else 6.0
            bound = np.sqrt(gain / fan_in)
            layer += [rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)]
        nets.append(layer)
    return PolicyParams(np.zeros(n_options), np.zeros(n_options), np.zeros(n_stocks), nets)


# --- activations -------------------------------------------------------------

def activate_beta(theta_beta, constraints: TradingConstraints) -> Tensor:
    """Option amounts: ``(β_max/n)·sigmoid(θ)`` rescaled by ``1/max(1, Σ)``."""
    theta = ad.as_tensor(theta_beta)
    n = theta.shape[0]
    if n == 0:
        return theta
    raw = ad.sigmoid(theta) * (constraints.beta_max / n)
    total = ad.reduce_sum(raw)
    over = total.item() > 1.0
    if theta.tape is not None:
        theta.tape.note_pattern(np.array([over]), abs(total.item() - 1.0))
    return raw / total if over else raw


def activate_strikes(theta_K, constraints: TradingConstraints) -> Tensor:
    theta = ad.as_tensor(theta_K)
    return ad.sigmoid(theta) * (constraints.K_high - constraints.K_low) + constraints.K_low


def _bounds(constraints: TradingConstraints, wealth):
    if constraints.alpha_wealth_proportional:
        return wealth * constraints.alpha_low_frac, wealth * constraints.alpha_high_frac
    return constraints.alpha_low_frac, constraints.alpha_high_frac


def activate_alpha0(theta_alpha0, constraints: TradingConstraints, x0_hat=1.0) -> Tensor:
    """Initial stock position values (= units, since S₀ = 1)."""
    theta = ad.as_tensor(theta_alpha0)
    if constraints.unconstrained_alpha:
        return theta
    lo, hi = _bounds(constraints, x0_hat)
    return ad.sigmoid(theta) * (hi - lo) + lo


def network_output(x, layer: list, normalize_input: bool = False) -> Tensor:
    """Raw output χ of one allocation network for wealth ``x`` of shape (M,)."""
    x = ad.as_tensor(x)
    h = ad.reshape(x, (x.shape[0], 1))
    if normalize_input:
        h = (h - 1.0) / 0.5
    n_layers = len(layer) // 2
    for i in range(n_layers):
        h = ad.affine(h, layer[2 * i], layer[2 * i + 1])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def alpha_network_forward(x, layer: list, S_n, constraints: TradingConstraints,
                          mask_absorbed: bool = False) -> Tensor:
    """Stock units at a rebalance date.

    Constrained mode maps χ to a position value in ``[lo, hi]`` per stock and
    divides by the stock price. Stocks absorbed at 0 have no admissible
    position; with ``mask_absorbed`` their units are set to 0, otherwise a zero
    price raises.
    """
    chi = network_output(x, layer, constraints.normalize_input)
    if constraints.unconstrained_alpha:
        return chi
    S_n = np.asarray(S_n, dtype=float)
    dead = S_n <= 0
    if np.any(dead) and not mask_absorbed:
        raise ZeroDivisionError("stock price is zero; cannot convert a position value to units")
    x = ad.as_tensor(x)
    lo, hi = _bounds(constraints, ad.reshape(x, (x.shape[0], 1)))
    value = ad.sigmoid(chi) * (hi - lo) + lo
    if np.any(dead):
        return value * Tensor(np.where(dead, 0.0, 1.0 / np.where(dead, 1.0, S_n)))
    return value / Tensor(S_n)


# --- simulation ----------------------------------------------------------------

@dataclass
class StrategyOutcome:
    """Per-path results; ``returns`` keeps the autodiff graph when recorded."""

    returns: Tensor
    wealth: np.ndarray          # (M, N+1) stock+bond value
    units: np.ndarray           # (M, N, n_stocks) stock units held over [t_n, t_{n+1})
    bond_units: np.ndarray      # (M, N)
    beta: np.ndarray
    strikes: np.ndarray
    option_prices: np.ndarray
    y0: float
    yT: np.ndarray
    option_pnl: np.ndarray      # (M, n_options): β_i (V_i(T) - 1)
    tc: np.ndarray              # (M, n_stocks)
    R_SB: np.ndarray
    R_O: np.ndarray
    x0_hat: float
    option_kinds: list = field(default_factory=list)

    @property
    def R(self) -> np.ndarray:
        return self.returns.values

    @property
    def terminal_wealth(self) -> np.ndarray:
        """x̂_{t_N} + ŷ_T: stock+bond value plus option payoffs at T."""
        return self.wealth[:, -1] + self.yT


def run_allocation(batch: PathBatch, x0_hat, units0, dynamic: Callable, constraints: TradingConstraints,
                   tape: ad.Tape | None = None):
    """Self-financing wealth recursion shared by learned and closed-form strategies.

    ``units0`` (n_stocks,) are the t₀ holdings; ``dynamic(n, x_n, S_n)`` returns
    holdings (M, n_stocks) at date t_n for n ≥ 1. Returns
    (x_N, total cost per path, record dict of numpy arrays).
    """
    M, N, k = batch.M, batch.N, batch.n_stocks
    S, B = batch.stocks, batch.bond
    T = batch.grid[-1]
    r = np.log(B[-1]) / T if T > 0 else 0.0
    x = ad.as_tensor(x0_hat) * Tensor(np.ones(M))
    units_prev = None
    cost = Tensor(np.zeros(M))
    wealth = np.empty((M, N + 1))
    units_rec = np.empty((M, N, k))
    bond_rec = np.empty((M, N))
    wealth[:, 0] = x.values
    for n in range(N):
        S_n = S[:, n]
        if n == 0:
            units = ad.as_tensor(units0) * Tensor(np.ones((M, 1)))
        else:
            units = dynamic(n, x, S_n)
        alive = None
        if constraints.NB:
            alive_mask = x.values > 0
            if tape is not None:
                tape.note_pattern(alive_mask, float(np.min(np.abs(x.values))))
            if not alive_mask.all():
                alive = Tensor(alive_mask.astype(float))
                # liquidated portfolios hold nothing
                units = units * Tensor(alive_mask[:, None].astype(float))
        stock_value = ad.reduce_sum(units * Tensor(S_n), axis=1)
        bond_units = (x - stock_value) / B[n]
        gain = bond_units * (B[n + 1] - B[n]) + ad.reduce_sum(units * Tensor(S[:, n + 1] - S_n), axis=1)
        if alive is not None:
            gain = gain * alive
        if constraints.C > 0:
            if units_prev is None:
                trade = units if constraints.include_initial_trade_cost else None
            else:
                trade = units - units_prev
            if trade is not None:
                fee = constraints.C * np.exp(r * (T - batch.grid[n]))
                cost = cost + ad.reduce_sum(ad.absolute(trade) * Tensor(S_n * fee), axis=1)
        units_prev = units
        units_rec[:, n] = units.values
        bond_rec[:, n] = bond_units.values
        x = x + gain
        wealth[:, n + 1] = x.values
    return x, cost, {"wealth": wealth, "units": units_rec, "bond_units": bond_rec}


def per_stock_costs(units: np.ndarray, stocks: np.ndarray, grid: np.ndarray, bond: np.ndarray,
                    constraints: TradingConstraints) -> np.ndarray:
    """Transaction cost per path and stock, (M, n_stocks), from recorded holdings."""
    M, N, k = units.shape
    if constraints.C == 0:
        return np.zeros((M, k))
    T = grid[-1]
    r = np.log(bond[-1]) / T
    prev = np.zeros((M, k)) if constraints.include_initial_trade_cost else units[:, 0]
    out = np.zeros((M, k))
    for n in range(N):
        out += constraints.C * np.exp(r * (T - grid[n])) * np.abs(units[:, n] - prev) * stocks[:, n]
        prev = units[:, n]
    return out


def simulate_strategy(params: PolicyParams, batch: PathBatch, prices: PriceSurface | None,
                      constraints: TradingConstraints, x0_IC: float = 1.0) -> StrategyOutcome:
    """Run the neural strategy on every path of ``batch``.

    Pass params recorded on a tape (``params.on_tape(tape)``) to obtain a
    differentiable ``returns`` tensor.
    """
    if batch.N != params.N:
        raise ValueError(f"batch has {batch.N} periods but the policy expects {params.N}")
    if batch.n_stocks != params.n_stocks:
        raise ValueError("batch and policy disagree on the number of stocks")
    if not x0_IC > 0:
        raise ValueError("initial wealth must be positive")
    tape = None
    for a in params.arrays():
        if isinstance(a, Tensor) and a.tape is not None:
            tape = a.tape
            break

    use_options = constraints.options_enabled and params.n_options > 0
    if use_options:
        if prices is None:
            raise ValueError("options are enabled but no price surface was given")
        beta = activate_beta(params.theta_beta, constraints)
        strikes = activate_strikes(params.theta_K, constraints)
        v0 = prices.prices_at(strikes)
        y0 = ad.reduce_sum(beta)
    else:
        beta = strikes = v0 = None
        y0 = Tensor(0.0)
    x0_hat = x0_IC - y0
    units0 = activate_alpha0(params.theta_alpha0, constraints, x0_hat)

    def dynamic(n, x, S_n):
        return alpha_network_forward(x, params.nets[n - 1], S_n, constraints, mask_absorbed=True)

    xN, cost, rec = run_allocation(batch, x0_hat, units0, dynamic, constraints, tape)
    R_SB = xN - x0_hat - cost

    M = batch.M
    if use_options:
        kinds = prices.kinds
        under = np.asarray(prices.underlyings)
        sign = np.array([1.0 if kd == CALL else -1.0 for kd in kinds])
        s_T = batch.stocks[:, -1][:, under]
        payoff = ad.relu((Tensor(s_T) - strikes) * Tensor(sign))
        normalized = payoff / v0
        legs = normalized * beta
        yT = ad.reduce_sum(legs, axis=1)
        R_O = yT - y0
        option_pnl = (normalized.values - 1.0) * beta.values
        beta_v, strikes_v, v0_v = beta.values, strikes.values, v0.values
    else:
        yT = Tensor(np.zeros(M))
        R_O = Tensor(np.zeros(M))
        kinds = []
        option_pnl = np.zeros((M, 0))
        beta_v = strikes_v = v0_v = np.zeros(0)

    R = R_SB + R_O
    tc = per_stock_costs(rec["units"], batch.stocks, batch.grid, batch.bond, constraints)
    return StrategyOutcome(
        returns=R, wealth=rec["wealth"], units=rec["units"], bond_units=rec["bond_units"],
        beta=beta_v, strikes=strikes_v, option_prices=v0_v, y0=float(y0.item()), yT=yT.values,
        option_pnl=option_pnl, tc=tc, R_SB=R_SB.values, R_O=R_O.values, x0_hat=float(np.asarray(_raw(x0_hat))),
        option_kinds=list(kinds),
    )


def default_option_params(n_stocks: int) -> int:
    return len(option_layout(n_stocks))


__all__ = [
    "TradingConstraints", "PolicyParams", "StrategyOutcome", "init_params", "activate_beta",
    "activate_strikes", "activate_alpha0", "alpha_network_forward", "network_output",
    "simulate_strategy", "run_allocation", "per_stock_costs", "replace",
]
