"""Acceptance checks, shared by ``dtipo verify`` and the test suite.

Each ``check_*`` function returns a :class:`CheckResult` with the measured
quantities next to the thresholds. The oracles used here (Black-Scholes, the
jump-count conditioned price, brute-force tail means) are written
independently of the production estimators.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy.special import roots_legendre
from scipy.stats import norm, poisson

from . import autodiff as ad
from .evaluation import NeuralStrategy, evaluate_strategy
from .market import (RISK_NEUTRAL, MarketParams, paper_gbm_market, paper_jump_market, sample_paths,
                     sample_terminal_exact)
from .objective import MV_ES_ES, ObjectiveSpec, empirical_es, empirical_var_at_risk, evaluate
from .options import CALL, PUT, build_price_surface, default_strike_grid
from .policy import (PolicyParams, TradingConstraints, activate_alpha0, activate_beta, activate_strikes,
                     alpha_network_forward, init_params, run_allocation, simulate_strategy)
from .reference import PAPER_LAMBDA, PAPER_OPTIMUM, analytic_solution

# printed rows: mean, var, ES-, ES+, U (all in terminal-wealth units)
PUBLISHED_ROWS = {
    "with options": (1.146, 0.0806, 0.971, 2.176, 1.609),
    "without options": (1.140, 0.0449, 0.931, 1.933, 1.583),
}
GRADIENT_REL_TOL = 1e-4
GRADIENT_FLOOR = 1e-6


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number} ({self.name}): {self.detail} [{self.seconds:.1f}s]"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --- independent oracles -------------------------------------------------------

def black_scholes(S0, K, T, r, vol, kind=CALL):
    S0, K = np.asarray(S0, dtype=float), np.asarray(K, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(S0 / K) + (r + 0.5 * vol ** 2) * T) / (vol * math.sqrt(T))
    d2 = d1 - vol * math.sqrt(T)
    disc = math.exp(-r * T)
    call = np.where(S0 > 0, S0 * norm.cdf(d1) - K * disc * norm.cdf(d2), 0.0)
    if kind == CALL:
        return call
    return call - S0 + K * disc


def jump_conditioned_price(S0, K, T, r, vol, intensity, jump_mean, jump_var, kind=CALL, max_jumps=3,
                           nodes=64) -> tuple[float, float]:
    """Price under diffusion plus Poisson(ξT) multiplicative jumps (1 + J), J ~ N(μ, s²).

    Conditions on the number of jumps n: each jump either kills the stock
    (1 + J <= 0, absorbed at 0) or scales it. Given n surviving jumps the price
    is Black-Scholes at the scaled spot. The jump integrals use Gauss-Legendre
    quadrature on the survival region. Returns (price, truncation bound).
    """
    s = math.sqrt(jump_var)
    lo, hi = -1.0, jump_mean + 12 * s
    x, w = roots_legendre(nodes)
    j = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    wj = 0.5 * (hi - lo) * w * norm.pdf(j, jump_mean, s)
    spot = S0 * math.exp(-intensity * jump_mean * T)
    dead_payoff = 0.0 if kind == CALL else K * math.exp(-r * T)
    lam = intensity * T
    price = 0.0
    for n in range(max_jumps + 1):
        pn = poisson.pmf(n, lam)
        if n == 0:
            price += pn * float(black_scholes(spot, K, T, r, vol, kind))
            continue
        factors = np.ones(1)
        weights = np.ones(1)
        for _ in range(n):
            factors = np.multiply.outer(factors, 1.0 + j).ravel()
            weights = np.multiply.outer(weights, wj).ravel()
        alive = float(np.dot(weights, black_scholes(spot * factors, K, T, r, vol, kind)))
        dead_prob = 1.0 - weights.sum()
        price += pn * (alive + dead_prob * dead_payoff)
    # remaining mass times a generous payoff scale
    bound = float(poisson.sf(max_jumps, lam)) * max(K, 2 * S0)
    return price, bound


def brute_force_tails(sample, p_low: float, p_high: float) -> tuple[float, float, float]:
    """VaR, lower and upper expected shortfall by filtering, in exact arithmetic.

    VaR_p is the smallest sample value x with #{y <= x}/M >= p. ES- averages
    all values at or below VaR_{p_low}; ES+ all values at or above VaR_{p_high}.
    A level given as a float is read as the nearest ratio with a small
    denominator, so 3/7 means exactly three sevenths.
    """
    vals = [float(v) for v in sample]
    M = len(vals)

    def quantile(p):
        level = Fraction(p).limit_denominator(10 ** 6)
        return min(x for x in vals if Fraction(sum(y <= x for y in vals), M) >= level)

    def mean(xs):
        return float(sum(Fraction(v) for v in xs) / len(xs))

    v_lo, v_hi = quantile(p_low), quantile(p_high)
    return v_lo, mean([x for x in vals if x <= v_lo]), mean([x for x in vals if x >= v_hi])


# --- random tiny instances ---------------------------------------------------------

@dataclass
class TinyInstance:
    market: MarketParams
    constraints: TradingConstraints
    objective: ObjectiveSpec
    params: PolicyParams
    batch: object
    prices: object


def tiny_instance(seed: int, n_stocks: int = 2, N: int = 3, M: int = 8) -> TinyInstance:
    """A small random market, constraint set, objective and parameter point."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    A = rng.normal(0, 0.15, (n_stocks, n_stocks))
    sigma = np.tril(A, -1) + np.diag(rng.uniform(0.1, 0.35, n_stocks))
    jumps = rng.random() < 0.5
    market = MarketParams(
        T=float(rng.uniform(0.5, 2.0)), N=N, r=float(rng.uniform(0.0, 0.08)),
        b=rng.uniform(0.02, 0.12, n_stocks), sigma=sigma,
        jump_intensity=np.full(n_stocks, 0.5 if jumps else 0.0), jump_mean=rng.uniform(-0.05, 0.05, n_stocks),
        jump_cov=np.diag(rng.uniform(0.01, 0.05, n_stocks)))
    K_low = float(rng.uniform(0.8, 0.95))
    K_high = float(rng.uniform(1.05, 1.2))
    options = rng.random() < 0.7
    constraints = TradingConstraints(
        beta_max=float(rng.uniform(0.2, 1.5)), K_low=K_low, K_high=K_high,
        alpha_low_frac=float(-rng.uniform(0.2, 2.0)), alpha_high_frac=float(rng.uniform(0.2, 2.0)),
        alpha_wealth_proportional=bool(rng.random() < 0.8), NB=int(rng.random() < 0.5),
        C=float(rng.uniform(0.0, 0.01)), include_initial_trade_cost=bool(rng.random() < 0.5),
        unconstrained_alpha=bool(rng.random() < 0.2), options_enabled=options)
    lam2, lam3 = rng.uniform(0.0, 0.5, 2)
    objective = ObjectiveSpec(kind=MV_ES_ES, lambda1=float(rng.uniform(0.1, 1.5)), lambda2=float(lam2),
                              lambda3=float(lam3), p1=float(rng.uniform(0.05, 0.45)),
                              p2=float(rng.uniform(0.55, 0.95)))
    n_opt = 2 * n_stocks if options else 0
    params = init_params(n_stocks, N, n_opt, seed)
    arrays = [a + rng.normal(0, 0.5 if i < 3 else 0.1, np.shape(a)) for i, a in enumerate(params.arrays())]
    if constraints.unconstrained_alpha:
        arrays[2] = rng.normal(0, 0.3, n_stocks)
    params = params.with_arrays(arrays)
    batch = sample_paths(market, M, seed, namespace="misc")
    prices = None
    if options:
        prices = build_price_surface(market, np.linspace(K_low, K_high, 6), 4096, seed)
    return TinyInstance(market, constraints, objective, params, batch, prices)


def _instance_loss(inst: TinyInstance, arrays, track: bool = True):
    tape = ad.Tape(track_patterns=track)
    leaves = inst.params.with_arrays(arrays).on_tape(tape)
    out = simulate_strategy(leaves, inst.batch, inst.prices, inst.constraints)
    loss = evaluate(inst.objective, out.returns).loss
    return tape, leaves, loss


def gradient_errors(inst: TinyInstance, coords_per_array: int | None = None, step: float = 1e-4,
                    rng: np.random.Generator | None = None) -> dict:
    """Reverse-mode gradient versus a 4-point central difference, per coordinate.

    Coordinates whose stencil crosses a kink (the recorded decision pattern
    changes anywhere on the stencil) are skipped. The relative error uses
    max(|reverse|, |fd|, GRADIENT_FLOOR) as denominator.
    """
    base = [np.array(a, dtype=float) for a in inst.params.arrays()]
    tape, leaves, loss = _instance_loss(inst, base)
    digest = tape.pattern_digest()
    grads = tape.backward(loss, leaves.arrays())
    names = inst.params.names()
    worst, checked, skipped = 0.0, 0, 0
    worst_where = None
    for idx, (name, a) in enumerate(zip(names, base)):
        coords = list(np.ndindex(a.shape))
        if coords_per_array is not None and len(coords) > coords_per_array:
            pick = (rng or np.random.default_rng(0)).choice(len(coords), coords_per_array, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for c in coords:
            vals = []
            same = True
            for k in (-2, -1, 1, 2):
                trial = [b.copy() for b in base]
                trial[idx][c] += k * step
                t, _, l = _instance_loss(inst, trial)
                same &= t.pattern_digest() == digest
                vals.append(l.item())
            if not same:
                skipped += 1
                continue
            fd = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * step)
            g = float(grads[idx][c])
            err = abs(g - fd) / max(abs(g), abs(fd), GRADIENT_FLOOR)
            checked += 1
            if err > worst:
                worst, worst_where = err, (name, c, g, fd)
    return {"worst": worst, "where": worst_where, "checked": checked, "skipped": skipped}


# --- criteria --------------------------------------------------------------------

@_timed
def check_analytic() -> CheckResult:
    a = analytic_solution(paper_gbm_market(), PAPER_LAMBDA)
    err = abs(a.theoretical_objective - PAPER_OPTIMUM)
    return CheckResult(1, "closed-form optimum", err <= 5e-4,
                       f"U* = {a.theoretical_objective:.6f}, published {PAPER_OPTIMUM}, |diff| = {err:.2e} <= 5e-4",
                       data={"U_star": a.theoretical_objective})


@_timed
def check_mv_convergence(workers: int = 1, M_eval: int = 2 ** 17, seed: int = 0) -> CheckResult:
    """Desk-scale training on the jump-free market against the closed form."""
    from .cli import band_comparison, load_config, preset_path
    from .reference import AnalyticStrategy
    from .trainer import train
    spec = load_config(preset_path("gbm_benchmark"), env={})
    spec = replace(spec, train=replace(spec.train, seed=seed), seeds={"train": seed, "eval": seed + 1,
                                                                      "price": seed + 2})
    params, log_ = train(spec.train, spec.market, spec.constraints, spec.objective, workers=workers)
    kw = dict(scheme="exact", train_seed=seed)
    learned = evaluate_strategy(NeuralStrategy(params), spec.market, spec.constraints, spec.objective, M_eval,
                                seed + 1, **kw)
    analytic = analytic_solution(spec.market, spec.objective.lam)
    reference = evaluate_strategy(AnalyticStrategy(analytic), spec.market, spec.constraints, spec.objective,
                                  M_eval, seed + 1, **kw)
    U = learned.wealth_terms["U"]
    gap = abs(U - PAPER_OPTIMUM) / PAPER_OPTIMUM
    bands = band_comparison(learned.bands, reference.bands)
    ok_U = gap <= 0.02
    z = bands["max_abs_z"]
    detail = (f"learned U = {U:.5f} (gap {100 * gap:.2f}% <= 2%: {ok_U}); bands within 3 SE of the closed form: "
              f"{bands['all_within']} (max |z| p5 {z['p5']:.1f}, mean {z['mean']:.1f}, p95 {z['p95']:.1f}; "
              f"M_eval={M_eval})")
    return CheckResult(2, "convergence to the closed form", ok_U and bands["all_within"], detail,
                       data={"U": U, "gap": gap, "bands": bands, "train_U": -log_.final_loss,
                             "U_analytic_sim": reference.wealth_terms["U"]})


@_timed
def check_gradients(n_instances: int = 100, coords_per_array: int | None = 4, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, checked, skipped, where = 0.0, 0, 0, None
    for i in range(n_instances):
        inst = tiny_instance(seed * 100_000 + i)
        res = gradient_errors(inst, coords_per_array, rng=rng)
        checked += res["checked"]
        skipped += res["skipped"]
        if res["worst"] > worst:
            worst, where = res["worst"], (i, res["where"])
    ok = worst < GRADIENT_REL_TOL and checked > 0
    return CheckResult(3, "reverse-mode gradients", ok,
                       f"{n_instances} instances, {checked} coordinates checked, {skipped} skipped at kinks; "
                       f"max relative error {worst:.2e} < {GRADIENT_REL_TOL:g}",
                       data={"worst": worst, "where": where})


@_timed
def check_estimators(n_samples: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    worst_ratio = 0.0
    for _ in range(n_samples):
        M = int(rng.integers(2, 13))
        sample = rng.normal(0, 1, M) * rng.uniform(0.1, 10)
        while np.unique(sample).size < M:
            sample = rng.normal(0, 1, M)
        # probe random levels and the exact multiples k/M
        k1 = int(rng.integers(1, M + 1))
        p_low = float(rng.choice([rng.uniform(0.01, 0.5), k1 / M if k1 < M else 0.5]))
        p_high = float(rng.uniform(max(p_low, 0.5), 0.99))
        v, lo, hi = brute_force_tails(sample, p_low, p_high)
        ours_v = empirical_var_at_risk(sample, p_low)
        ours_lo = empirical_es(sample, p_low, "lower").item()
        ours_hi = empirical_es(sample, p_high, "upper").item()
        if ours_v != v:
            mismatches += 1
        # a floating-point mean of M terms is exact up to M ulps of the largest term
        bound = M * np.spacing(np.abs(sample).max())
        for a, b in ((ours_lo, lo), (ours_hi, hi)):
            worst_ratio = max(worst_ratio, abs(a - b) / bound)
            if abs(a - b) > bound:
                mismatches += 1
    rows = {}
    spec = ObjectiveSpec()
    for name, (m, v, es_lo, es_hi, U) in PUBLISHED_ROWS.items():
        recomposed = m - spec.lambda1 * v + spec.lambda2 * es_lo + spec.lambda3 * es_hi
        rows[name] = (recomposed, U, abs(recomposed - U))
    rows_ok = all(d <= 1e-3 for *_, d in rows.values())
    detail = (f"{n_samples} samples: {mismatches} mismatches (VaR bitwise, ES within the summation "
              f"rounding bound of the exact rational mean, worst {worst_ratio:.2f} of the bound); published rows: " +
              ", ".join(f"{k}: {r:.4f} vs {u} (|diff| {d:.4f})" for k, (r, u, d) in rows.items()) +
              " tolerance 0.001")
    return CheckResult(4, "tail estimators and recomposition", mismatches == 0 and rows_ok, detail,
                       data={"mismatches": mismatches, "rows": rows})


def _single_stock(vol: float, T=2.0, r=0.06) -> MarketParams:
    return MarketParams(T=T, N=20, r=r, b=[r], sigma=[[vol]], jump_intensity=[0.0], jump_mean=[0.0],
                        jump_cov=[[0.0]])


@_timed
def check_pricing(M_bs: int = 2 ** 18, M_jump: int = 2 ** 20, M_mart: int = 10 ** 6, seed: int = 11) -> CheckResult:
    strikes = np.array([0.8, 0.9, 1.0, 1.1, 1.2])
    vols = [0.1, 0.2, 0.3, 0.4, 0.5]
    worst_bs = 0.0
    for vol in vols:
        m = _single_stock(vol)
        surf = build_price_surface(m, strikes, M_bs, seed)
        for i, kind in enumerate(surf.kinds):
            z = np.abs(surf.prices[i] - black_scholes(1.0, strikes, m.T, m.r, vol, kind)) / surf.std_errors[i]
            worst_bs = max(worst_bs, float(z.max()))

    jm = paper_jump_market()
    surf = build_price_surface(jm, strikes, M_jump, seed)
    worst_jump = 0.0
    for i, (kind, u) in enumerate(zip(surf.kinds, surf.underlyings)):
        vol = float(np.linalg.norm(jm.sigma[u]))
        for j, K in enumerate(strikes):
            ref, bound = jump_conditioned_price(1.0, K, jm.T, jm.r, vol, jm.jump_intensity[u], jm.jump_mean[u],
                                                jm.jump_cov[u, u], kind)
            worst_jump = max(worst_jump, (abs(surf.prices[i, j] - ref) - bound) / surf.std_errors[i, j])

    worst_mart = 0.0
    disc = math.exp(-jm.r * jm.T)
    for name, draw in (("exact", lambda lo, n: sample_terminal_exact(jm, n, seed, RISK_NEUTRAL, namespace="misc",
                                                                       start=lo)),
                       ("euler", lambda lo, n: sample_paths(jm, n, seed, RISK_NEUTRAL, namespace="misc",
                                                            start=lo).stocks[:, -1])):
        total = np.zeros(jm.n_stocks)
        total_sq = np.zeros(jm.n_stocks)
        for lo in range(0, M_mart, 1 << 16):
            s = draw(lo, min(1 << 16, M_mart - lo)) * disc
            total += s.sum(0)
            total_sq += (s * s).sum(0)
        mean = total / M_mart
        se = np.sqrt((total_sq / M_mart - mean ** 2) / M_mart)
        worst_mart = max(worst_mart, float(np.max(np.abs(mean - 1.0) / se)))
    ok = worst_bs <= 3 and worst_jump <= 3 and worst_mart <= 3
    return CheckResult(5, "option pricing", ok,
                       f"max |z|: Black-Scholes {worst_bs:.2f} (5x5 strike x vol, calls and puts), "
                       f"jump oracle {worst_jump:.2f}, discounted mean S_T {worst_mart:.2f} (M=10^6); all <= 3",
                       data={"bs": worst_bs, "jump": worst_jump, "martingale": worst_mart})


def structural_violations(seed: int, M: int = 512, vol_factor: float = 1.0, aggressive: bool = False) -> dict:
    """Self-financing, budget, NB-freeze and range checks on one random run."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    market = paper_jump_market()
    if vol_factor != 1.0:
        market = replace(market, sigma=market.sigma * vol_factor)
    frac = 20.0 if aggressive else float(rng.uniform(0.5, 3.0))
    c = TradingConstraints(beta_max=float(rng.uniform(0.1, 1.0)), alpha_low_frac=-frac, alpha_high_frac=frac,
                           NB=1, C=float(rng.uniform(0, 0.01)))
    params = init_params(5, market.N, 10, seed)
    params = params.with_arrays([a + rng.normal(0, 1.0, np.shape(a)) for a in params.arrays()])
    strikes = default_strike_grid(c.K_low, c.K_high, 11)
    prices = build_price_surface(market, strikes, 4096, seed)
    batch = sample_paths(market, M, seed, namespace="misc")
    out = simulate_strategy(params, batch, prices, c)
    S, B = batch.stocks, batch.bond
    W, U, bu = out.wealth, out.units, out.bond_units
    sf = 0.0
    frozen_ok = True
    for n in range(market.N):
        alive = W[:, n] > 0
        pre = (U[:, n] * S[:, n]).sum(1) + bu[:, n] * B[n]
        post = (U[:, n] * S[:, n + 1]).sum(1) + bu[:, n] * B[n + 1]
        # errors relative to the gross position, so leveraged paths are judged fairly
        gross = np.maximum.reduce([np.ones(len(pre)), np.abs(U[:, n] * S[:, n]).sum(1) + np.abs(bu[:, n] * B[n]),
                                   np.abs(U[:, n] * S[:, n + 1]).sum(1) + np.abs(bu[:, n] * B[n + 1])])
        sf = max(sf, float(np.max(np.abs(pre - W[:, n]) / gross)))
        sf = max(sf, float(np.max(np.abs(np.where(alive, post, W[:, n]) - W[:, n + 1]) / gross)))
        frozen_ok &= bool(np.all(U[~alive, n] == 0) and np.all(W[~alive, n + 1] == W[~alive, n]))
    budget = abs(out.y0 + float((U[0, 0] * S[0, 0]).sum() + bu[0, 0] * B[0]) - 1.0)
    return {"self_financing": sf, "budget": budget, "frozen_ok": frozen_ok,
            "bankrupt": int(np.sum(np.any(W <= 0, axis=1)))}


def range_violations(n_draws: int = 10_000, seed: int = 0) -> int:
    """Count activation outputs outside their admissible sets over random draws."""
    rng = np.random.default_rng(seed)
    bad = 0
    layer = init_params(3, 2, 6, seed).nets[0]
    for _ in range(n_draws):
        n_opt = int(rng.integers(1, 7))
        lo_frac = -float(rng.uniform(0, 3))
        c = TradingConstraints(beta_max=float(rng.uniform(0, 2)), K_low=float(rng.uniform(0.5, 1.0)),
                               K_high=float(rng.uniform(1.01, 1.5)), alpha_low_frac=lo_frac,
                               alpha_high_frac=float(rng.uniform(lo_frac, 3)))
        scale = float(rng.choice([0.1, 1.0, 10.0, 50.0]))
        beta = activate_beta(rng.normal(0, scale, n_opt), c).values
        K = activate_strikes(rng.normal(0, scale, n_opt), c).values
        x0 = float(rng.uniform(0.1, 2.0))
        a0 = activate_alpha0(rng.normal(0, scale, 3), c, x0).values
        x = rng.uniform(0.01, 3.0, 4)
        S = rng.uniform(0.2, 2.0, (4, 3))
        w = [p * scale for p in layer]
        value = alpha_network_forward(x, w, S, c).values * S
        tol = 1e-12
        bad += int(np.any(beta < 0) or np.any(beta > c.beta_max / n_opt + tol) or beta.sum() > c.beta_max + tol)
        bad += int(np.any(K < c.K_low - tol) or np.any(K > c.K_high + tol))
        bad += int(np.any(a0 < lo_frac * x0 - tol) or np.any(a0 > c.alpha_high_frac * x0 + tol))
        lo_v, hi_v = c.alpha_low_frac * x[:, None], c.alpha_high_frac * x[:, None]
        bad += int(np.any(value < lo_v - 1e-9) or np.any(value > hi_v + 1e-9))
    return bad


def no_trade_cost(seed: int) -> float:
    """Total TC of a buy-and-hold and an all-bond strategy (both must be 0)."""
    market = paper_jump_market()
    batch = sample_paths(market, 256, seed, namespace="misc")
    units0 = np.random.default_rng(seed).uniform(-0.2, 0.4, 5)
    total = 0.0
    for units, initial in ((units0, False), (np.zeros(5), True)):
        c = TradingConstraints(C=0.01, include_initial_trade_cost=initial, NB=0)
        _, cost, _ = run_allocation(batch, ad.Tensor(1.0), ad.Tensor(units),
                                    lambda n, x, S_n, u=units: ad.Tensor(np.broadcast_to(u, S_n.shape).copy()), c)
        total += float(np.abs(cost.values).max())
    return total


@_timed
def check_invariants(n_runs: int = 20, n_draws: int = 10_000) -> CheckResult:
    sf = budget = 0.0
    frozen_ok, bankrupt = True, 0
    for s in range(n_runs):
        res = structural_violations(s, aggressive=s % 2 == 1, vol_factor=3.0 if s % 2 else 1.0)
        sf, budget = max(sf, res["self_financing"]), max(budget, res["budget"])
        frozen_ok &= res["frozen_ok"]
        bankrupt += res["bankrupt"]
    ranges = range_violations(n_draws)
    tc = max(no_trade_cost(s) for s in range(5))
    ok = sf <= 1e-10 and budget <= 1e-10 and frozen_ok and bankrupt > 0 and ranges == 0 and tc == 0.0
    return CheckResult(6, "structural invariants", ok,
                       f"self-financing max relative error {sf:.1e}, t=0 budget error {budget:.1e} (<= 1e-10); "
                       f"NB freeze holds on {bankrupt} bankrupt paths: {frozen_ok}; {ranges} range violations in "
                       f"{n_draws} draws; no-trade TC = {tc}")


def trend_experiment(seed: int, workers: int = 1, M_eval: int = 2 ** 18, M_price: int = 2 ** 20) -> dict:
    """Train with and without options on the jump market, compare with the MV baseline."""
    from .cli import load_config, preset_path, run_evaluation
    from .trainer import train
    seeds = {"train": seed, "eval": seed + 1, "price": seed + 2}
    results = {}
    for name in ("jump_options", "jump_no_options"):
        spec = load_config(preset_path(name), env={})
        spec = replace(spec, seeds=seeds, train=replace(spec.train, seed=seed),
                       pricing=replace(spec.pricing, M_price=M_price))
        prices = None
        if spec.options_enabled:
            from .cli import price_surface_for
            prices = price_surface_for(spec)
        params, log_ = train(spec.train, spec.market, spec.constraints, spec.objective, prices, workers=workers)
        strat = NeuralStrategy(params, prices, label=spec.mode)
        reports = {f: run_evaluation(spec, strat, f, M_eval=M_eval)[0] for f in (1.0, 2.0, 0.5)}
        results[spec.mode] = {"spec": spec, "final_loss": log_.final_loss, "reports": reports}
    spec = results["d-tipo"]["spec"]
    target = results["d-tipo"]["reports"][1.0].wealth_terms["mean"]
    mv = {f: run_evaluation(spec, None, f, target_mean=target, use_mv=True, M_eval=M_eval)[0]
          for f in (1.0, 2.0, 0.5)}
    o, n = results["d-tipo"], results["d-tip"]
    tc = {k: r[1.0].trading_cost_pct for k, r in (("d-tipo", o["reports"]), ("d-tip", n["reports"]), ("mv", mv))}
    U = {f: {"d-tipo": o["reports"][f].wealth_terms["U"], "d-tip": n["reports"][f].wealth_terms["U"],
             "mv": mv[f].wealth_terms["U"]} for f in (1.0, 2.0, 0.5)}
    return {
        "seed": seed, "final_loss": {"d-tipo": o["final_loss"], "d-tip": n["final_loss"]},
        "trading_cost_pct": tc, "U": U,
        "a": o["final_loss"] <= n["final_loss"],
        "b": tc["d-tipo"] < tc["d-tip"] < tc["mv"],
        "c": all(U[f]["d-tipo"] > U[f]["mv"] and U[f]["d-tip"] > U[f]["mv"] for f in (2.0, 0.5)),
        "reports": {"d-tipo": o["reports"], "d-tip": n["reports"], "mv": mv},
    }


@_timed
def check_trends(seeds=(0, 1, 2), workers: int = 1, M_eval: int = 2 ** 18) -> CheckResult:
    runs = [trend_experiment(s, workers, M_eval) for s in seeds]
    votes = {k: sum(r[k] for r in runs) for k in ("a", "b", "c")}
    need = len(seeds) // 2 + 1
    ok = all(v >= need for v in votes.values())
    parts = []
    for r in runs:
        tc = r["trading_cost_pct"]
        parts.append(f"seed {r['seed']}: loss {r['final_loss']['d-tipo']:.4f}/{r['final_loss']['d-tip']:.4f}, "
                     f"TC% {tc['d-tipo']:.3f}/{tc['d-tip']:.3f}/{tc['mv']:.3f}, "
                     f"U x2 {r['U'][2.0]['d-tipo']:.3f}/{r['U'][2.0]['d-tip']:.3f}/{r['U'][2.0]['mv']:.3f}, "
                     f"U x0.5 {r['U'][0.5]['d-tipo']:.3f}/{r['U'][0.5]['d-tip']:.3f}/{r['U'][0.5]['mv']:.3f}")
    detail = (f"seeds passing (a) loss {votes['a']}/{len(seeds)}, (b) TC order {votes['b']}/{len(seeds)}, "
              f"(c) robustness {votes['c']}/{len(seeds)}; need {need} each. " + "; ".join(parts))
    return CheckResult(7, "desk-scale trends", ok, detail, data={"runs": runs, "votes": votes})


TINY_CONFIG = {
    "run_id": "tiny", "mode": "d-tipo", "seed": 3, "market": {"preset": "paper-jump"},
    "train": {"M_train": 2048, "M_batch": 1024, "M_epoch": 2},
    "pricing": {"M_price": 4096, "knots": 11},
    "evaluation": {"M_eval": 4096, "scheme": "euler"},
}
TINY_BENCHMARK = {
    "run_id": "tiny-bench", "mode": "mv-benchmark", "seed": 3, "market": {"preset": "paper-gbm"},
    "train": {"M_train": 2048, "M_batch": 1024, "M_epoch": 2, "path_scheme": "exact"},
    "evaluation": {"M_eval": 4096, "scheme": "exact"},
}


def _output_files(root) -> dict:
    from pathlib import Path
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.suffix in (".csv", ".json")}


def determinism_outputs(root, workers: int) -> dict:
    """Run every command on tiny configs under ``root``; returns CSV/JSON file bytes."""
    import contextlib
    import io
    import json
    from pathlib import Path
    from .cli import main
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    (root / "bench.json").write_text(json.dumps(TINY_BENCHMARK))
    w = ["--workers", str(workers)]
    commands = [
        ["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")] + w,
        ["evaluate", "--checkpoint", str(root / "run" / "checkpoint.json"), "--vol-factor", "2",
         "--out", str(root / "eval2")] + w,
        ["evaluate", "--checkpoint", str(root / "run" / "checkpoint.json"), "--strategy", "mv",
         "--target-mean", "1.15", "--out", str(root / "evalmv")] + w,
        ["price-options", "--config", str(root / "cfg.json"), "--out", str(root / "prices.csv")] + w,
        ["benchmark-mv", "--config", str(root / "bench.json"), "--out", str(root / "bench")] + w,
    ]
    for cmd in commands:
        with contextlib.redirect_stdout(io.StringIO()):
            code = main(cmd)
        if code != 0:
            raise RuntimeError(f"command failed: {cmd}")
    return _output_files(root)


@_timed
def check_determinism(workdir=None) -> CheckResult:
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        a = determinism_outputs(Path(tmp) / "a", workers=1)
        b = determinism_outputs(Path(tmp) / "b", workers=3)
    diff = [k for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]
    ok = not diff and len(a) > 0
    return CheckResult(8, "determinism", ok,
                       f"{len(a)} CSV/JSON outputs from train, evaluate (x2 vol, MV baseline), price-options and "
                       f"benchmark-mv compared across worker counts 1 and 3: "
                       f"{'bit-identical' if ok else 'differences in ' + ', '.join(diff)}")


def run_all(quick: bool = False, workers: int = 1) -> list[CheckResult]:
    """Every criterion; ``quick`` skips the two that train at desk scale."""
    results = [check_analytic()]
    if not quick:
        results.append(check_mv_convergence(workers))
    results += [check_gradients(), check_estimators(), check_pricing(), check_invariants()]
    if not quick:
        results.append(check_trends(workers=workers))
    results.append(check_determinism())
    return results
