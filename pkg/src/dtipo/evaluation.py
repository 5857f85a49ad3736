"""Out-of-sample evaluation of frozen strategies.

Every metric is computed on fresh paths from the ``eval`` seed namespace.
Return statistics (mean, var, ES, U) are reported on R = terminal wealth
minus initial wealth; ``wealth_terms`` repeats them shifted by x0 so they read
like terminal wealth.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objective as obj
from .market import MarketParams, PathBatch, sample_gbm_exact, sample_paths, scale_volatility
from .options import CALL, PUT, PriceSurface
from .policy import PolicyParams, StrategyOutcome, TradingConstraints, simulate_strategy

EVAL_CHUNK = 1 << 15
BAND_SECTIONS = 16
PAPER_BUCKET_EDGES = (1.03, 1.12)


class NeuralStrategy:
    """A trained policy frozen for inference."""

    def __init__(self, params: PolicyParams, prices: PriceSurface | None = None, label: str = "neural"):
        self.params = params.copy()
        self.prices = prices
        self.label = label

    def simulate(self, batch: PathBatch, constraints: TradingConstraints, x0_IC: float = 1.0) -> StrategyOutcome:
        return simulate_strategy(self.params, batch, self.prices, constraints, x0_IC)


@dataclass
class EvalReport:
    strategy: str
    seed: int
    M_eval: int
    x0_IC: float
    objective: dict
    mean: float
    var: float
    var_at_risk: float
    es_lower: float
    es_upper: float
    U: float
    trading_cost_pct: float
    bankruptcy_freq: float
    bands: dict                 # date -> p5/mean/p95 with standard errors
    histogram: dict             # edges, mass, density
    allocation: dict            # per class / stock / option mean allocations
    buckets: list
    returns: np.ndarray = field(repr=False, default=None)

    @property
    def wealth_terms(self) -> dict:
        spec = obj.ObjectiveSpec(**self.objective)
        x0 = self.x0_IC
        return {"mean": x0 + self.mean, "var": self.var, "es_lower": x0 + self.es_lower,
                "es_upper": x0 + self.es_upper, "U": self.U + spec.shift(x0)}

    def recomposed_U(self) -> float:
        return obj.recompose(obj.ObjectiveSpec(**self.objective), self.mean, self.var, self.es_lower, self.es_upper)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "strategy", "seed", "M_eval", "x0_IC", "objective", "mean", "var", "var_at_risk", "es_lower",
            "es_upper", "U", "trading_cost_pct", "bankruptcy_freq", "bands", "histogram", "allocation", "buckets")}
        d["wealth_terms"] = self.wealth_terms
        return d

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _eval_chunks(market: MarketParams, M_eval: int, seed: int, scheme: str):
    fn = sample_gbm_exact if scheme == "exact" else sample_paths
    for lo in range(0, M_eval, EVAL_CHUNK):
        yield fn(market, min(EVAL_CHUNK, M_eval - lo), seed, namespace="eval", start=lo)


def _sectioned(values: np.ndarray, stat) -> tuple[float, float]:
    """Statistic on the full sample and its standard error from equal sections."""
    full = float(stat(values))
    n = values.shape[0] // BAND_SECTIONS
    if n < 2:
        return full, float("nan")
    parts = [stat(values[i * n:(i + 1) * n]) for i in range(BAND_SECTIONS)]
    return full, float(np.std(parts, ddof=1) / math.sqrt(BAND_SECTIONS))


def percentile_bands(wealth: np.ndarray, grid: np.ndarray) -> dict:
    """5th percentile, mean and 95th percentile of wealth at every date."""
    out = {"date": [float(t) for t in grid], "p5": [], "mean": [], "p95": [],
           "p5_se": [], "mean_se": [], "p95_se": []}
    for n in range(wealth.shape[1]):
        col = wealth[:, n]
        p5, p5_se = _sectioned(col, lambda v: np.percentile(v, 5))
        p95, p95_se = _sectioned(col, lambda v: np.percentile(v, 95))
        mean = float(col.mean())
        mean_se = float(col.std() / math.sqrt(col.size))
        for key, val in (("p5", p5), ("mean", mean), ("p95", p95), ("p5_se", p5_se), ("mean_se", mean_se),
                         ("p95_se", p95_se)):
            out[key].append(val)
    return out


def histogram(sample: np.ndarray, max_bins: int = 200) -> dict:
    """Freedman-Diaconis bins on [q1, q99] plus one overflow bin on each side."""
    v = np.asarray(sample, dtype=float).ravel()
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        edges = np.array([lo - 0.5, lo + 0.5])
    else:
        q1, q25, q75, q99 = np.percentile(v, [1, 25, 75, 99])
        width = 2.0 * (q75 - q25) * v.size ** (-1.0 / 3.0)
        if q99 > q1:
            n_bins = int(math.ceil((q99 - q1) / width)) if width > 0 else int(math.ceil(math.sqrt(v.size)))
            inner = np.linspace(q1, q99, min(max(n_bins, 1), max_bins) + 1)
        else:
            inner = np.array([q1])
        edges = np.unique(np.concatenate([[lo], inner, [hi]]))
    counts, _ = np.histogram(v, edges)
    mass = counts / v.size
    return {"edges": edges.tolist(), "mass": mass.tolist(), "density": (mass / np.diff(edges)).tolist()}


def empirical_cdf(sample: np.ndarray, resolution: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Exact step CDF evaluated on ``resolution`` evenly spaced knots."""
    v = np.sort(np.asarray(sample, dtype=float).ravel())
    knots = np.linspace(v[0], v[-1], max(int(resolution), 2)) if v[-1] > v[0] else v[-1:]
    return knots, np.searchsorted(v, knots, side="right") / v.size


@dataclass
class _BucketInputs:
    terminal_wealth: np.ndarray
    R_SB: np.ndarray
    calls: np.ndarray
    puts: np.ndarray


def _bucket_inputs(outcome: StrategyOutcome) -> _BucketInputs:
    kinds = np.asarray(outcome.option_kinds)
    pnl = outcome.option_pnl
    calls = pnl[:, kinds == CALL].sum(axis=1) if kinds.size else np.zeros(len(outcome.R_SB))
    puts = pnl[:, kinds == PUT].sum(axis=1) if kinds.size else np.zeros(len(outcome.R_SB))
    return _BucketInputs(outcome.terminal_wealth, outcome.R_SB, calls, puts)


def _buckets(data: _BucketInputs, edges) -> list[dict]:
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or np.any(np.diff(edges) <= 0):
        raise ValueError("bucket edges must be strictly increasing")
    idx = np.searchsorted(edges, data.terminal_wealth, side="right")
    bounds = [None] + edges.tolist() + [None]
    out = []
    M = data.terminal_wealth.size
    for b in range(edges.size + 1):
        sel = idx == b
        n = int(sel.sum())
        row = {"lower": bounds[b], "upper": bounds[b + 1], "frequency": n / M, "count": n}
        for key in ("R_SB", "calls", "puts"):
            row[key] = float(getattr(data, key)[sel].mean()) if n else None
        row["empty"] = n == 0
        out.append(row)
    return out


def bucketed_contributions(outcome: StrategyOutcome, edges=PAPER_BUCKET_EDGES) -> list[dict]:
    """Mean stock+bond, call and put contributions per terminal-wealth bucket.

    Bucket b holds paths with edges[b-1] <= terminal wealth < edges[b].
    Empty buckets are reported with ``empty=True`` and ``None`` means.
    """
    return _buckets(_bucket_inputs(outcome), edges)


def evaluate_strategy(strategy, market: MarketParams, constraints: TradingConstraints,
                      objective: obj.ObjectiveSpec, M_eval: int = 2 ** 20, seed: int = 1, *,
                      x0_IC: float = 1.0, scheme: str = "euler", train_seed: int | None = None,
                      label: str | None = None, bucket_edges=PAPER_BUCKET_EDGES) -> EvalReport:
    """Simulate ``M_eval`` fresh paths and compute every reported metric."""
    if train_seed is not None and train_seed == seed:
        raise ValueError("evaluation seed must differ from the training seed")
    if M_eval < 2:
        raise ValueError("M_eval must be at least 2")
    R, wealth, tc_total, bankrupt = [], [], [], []
    bucket_parts = []
    stock_value = bond_value = None
    per_stock = None
    grid = None
    beta = strikes = kinds = None
    y0 = 0.0
    for batch in _eval_chunks(market, M_eval, seed, scheme):
        out = strategy.simulate(batch, constraints, x0_IC)
        R.append(out.R)
        wealth.append(out.wealth)
        tc_total.append(out.tc.sum(axis=1))
        bankrupt.append(np.any(out.wealth <= 0, axis=1))
        bucket_parts.append(_bucket_inputs(out))
        held = out.units * batch.stocks[:, :-1]
        part_stock = held.sum(axis=0)
        part_bond = (out.bond_units * batch.bond[None, :-1]).sum(axis=0)
        stock_value = part_stock if stock_value is None else stock_value + part_stock
        bond_value = part_bond if bond_value is None else bond_value + part_bond
        grid = batch.grid
        beta, strikes, kinds, y0 = out.beta, out.strikes, out.option_kinds, out.y0
    R = np.concatenate(R)
    wealth = np.concatenate(wealth)
    stock_value = stock_value / M_eval
    bond_value = bond_value / M_eval

    terms = obj.evaluate(objective, R)
    if objective.kind == obj.MV:
        es_lo = obj.empirical_es(R, objective.p1, "lower").item()
        es_hi = obj.empirical_es(R, objective.p2, "upper").item()
    else:
        es_lo, es_hi = terms.es_lower, terms.es_upper
    U = obj.recompose(objective, terms.mean, terms.var, es_lo, es_hi)

    data = _BucketInputs(*(np.concatenate([getattr(p, f) for p in bucket_parts])
                           for f in ("terminal_wealth", "R_SB", "calls", "puts")))
    allocation = {
        "date": [float(t) for t in grid[:-1]],
        "stocks": stock_value.sum(axis=1).tolist(),
        "bond": bond_value.tolist(),
        # options are held statically; reported at their purchase value
        "options": [float(y0)] * len(bond_value),
        "per_stock": stock_value.T.tolist(),
        "option_amounts": [float(b) for b in beta],
        "option_strikes": [float(k) for k in strikes],
        "option_kinds": list(kinds),
    }
    return EvalReport(
        strategy=label or getattr(strategy, "label", "strategy"), seed=int(seed), M_eval=int(M_eval),
        x0_IC=float(x0_IC), objective=objective.to_dict(), mean=terms.mean, var=terms.var,
        var_at_risk=obj.empirical_var_at_risk(R, objective.p1), es_lower=es_lo, es_upper=es_hi, U=U,
        trading_cost_pct=float(np.concatenate(tc_total).mean() / x0_IC * 100.0),
        bankruptcy_freq=float(np.concatenate(bankrupt).mean()),
        bands=percentile_bands(wealth, grid), histogram=histogram(x0_IC + R), allocation=allocation,
        buckets=_buckets(data, bucket_edges), returns=R)


def robustness_eval(strategy, market: MarketParams, constraints: TradingConstraints, objective: obj.ObjectiveSpec,
                    factors=(2.0, 0.5), M_eval: int = 2 ** 20, seed: int = 1, **kwargs) -> dict:
    """Evaluate a frozen strategy after multiplying every volatility by each factor."""
    out = {}
    for f in factors:
        if not f > 0:
            raise ValueError(f"volatility factor must be positive, got {f}")
        out[float(f)] = evaluate_strategy(strategy, scale_volatility(market, f), constraints, objective,
                                          M_eval, seed, **kwargs)
    return out


def export_distributions(report: EvalReport, out_dir: str | Path, resolution: int = 512) -> dict:
    """Write bands.csv, pdf.csv (terminal wealth) and cdf.csv (returns); returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"bands": out_dir / "bands.csv", "pdf": out_dir / "pdf.csv", "cdf": out_dir / "cdf.csv"}
    b = report.bands
    cols = ["date", "p5", "mean", "p95", "p5_se", "mean_se", "p95_se"]
    with open(paths["bands"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(b["date"])):
            w.writerow([repr(float(b[c][i])) for c in cols])
    h = report.histogram
    with open(paths["pdf"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "density"])
        for i, d in enumerate(h["density"]):
            w.writerow([repr(h["edges"][i]), repr(h["edges"][i + 1]), repr(float(d))])
    if report.returns is None:
        raise ValueError("report carries no sample; CDF cannot be exported")
    knots, cdf = empirical_cdf(report.returns, resolution)
    with open(paths["cdf"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["R", "cdf"])
        for x, c in zip(knots, cdf):
            w.writerow([repr(float(x)), repr(float(c))])
    return paths
