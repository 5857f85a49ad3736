"""Command-line entry point.

    dtipo train --config FILE [--paper-scale]
    dtipo evaluate --checkpoint FILE [--vol-factor F] [--strategy mv --target-mean M]
    dtipo benchmark-mv --config FILE
    dtipo price-options --config FILE --out CSV
    dtipo verify [--quick]

Configs are JSON. Every run directory receives ``config.json``, the fully
resolved configuration, so a run can be repeated bit for bit. The global seed
can be overridden with the ``DTIPO_SEED`` environment variable.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import NeuralStrategy, evaluate_strategy, export_distributions
from .market import MarketParams, paper_gbm_market, paper_jump_market, scale_volatility
from .objective import MV, ObjectiveSpec
from .options import PriceSurface, build_price_surface, default_strike_grid
from .policy import TradingConstraints
from .reference import (AnalyticStrategy, analytic_solution, mv_baseline_for_target_mean,
                        validate_against_paper, PAPER_LAMBDA)
from .trainer import TrainConfig, checkpoint_load, train

log = logging.getLogger("dtipo")

MODES = ("d-tipo", "d-tip", "mv-benchmark", "mv-baseline")
MARKET_PRESETS = {"paper-gbm": paper_gbm_market, "paper-jump": paper_jump_market}
SEED_ENV = "DTIPO_SEED"
PAPER_M_TRAIN = 2 ** 22
_TOP_KEYS = {"run_id", "mode", "seed", "seeds", "market", "constraints", "objective", "train", "pricing",
             "evaluation", "output_dir"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PricingConfig:
    M_price: int = 2 ** 20
    knots: int = 51
    scheme: str = "exact"

    def __post_init__(self):
        if self.M_price < 1000:
            raise ValueError("M_price must be at least 1000")
        if self.knots < 2:
            raise ValueError("knots must be at least 2")
        if self.scheme not in ("exact", "euler"):
            raise ValueError("scheme must be 'exact' or 'euler'")


@dataclass(frozen=True)
class EvalConfig:
    M_eval: int = 2 ** 20
    scheme: str = "euler"
    vol_factors: tuple = (2.0, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "vol_factors", tuple(float(f) for f in self.vol_factors))
        if self.M_eval < 2:
            raise ValueError("M_eval must be at least 2")
        if self.scheme not in ("exact", "euler"):
            raise ValueError("scheme must be 'exact' or 'euler'")
        if any(f <= 0 for f in self.vol_factors):
            raise ValueError("volatility factors must be positive")


@dataclass
class RunSpec:
    run_id: str
    mode: str
    market: MarketParams
    constraints: TradingConstraints
    objective: ObjectiveSpec
    train: TrainConfig
    pricing: PricingConfig
    evaluation: EvalConfig
    output_dir: str
    seeds: dict

    @property
    def options_enabled(self) -> bool:
        return self.mode == "d-tipo"

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id, "mode": self.mode, "seeds": dict(self.seeds),
            "market": self.market.to_dict(), "constraints": self.constraints.to_dict(),
            "objective": self.objective.to_dict(), "train": self.train.to_dict(),
            "pricing": _dc_dict(self.pricing), "evaluation": {**_dc_dict(self.evaluation),
                                                              "vol_factors": list(self.evaluation.vol_factors)},
            "output_dir": self.output_dir, "code_version": __version__,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _dc_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _build(cls, raw, where: str, **forced):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    try:
        return cls(**{**raw, **forced})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build_market(raw) -> MarketParams:
    if not isinstance(raw, dict):
        raise ConfigError("market: expected an object")
    if "preset" in raw:
        extra = sorted(set(raw) - {"preset"})
        if extra:
            raise ConfigError(f"market: 'preset' cannot be combined with {extra}")
        if raw["preset"] not in MARKET_PRESETS:
            raise ConfigError(f"market.preset: unknown preset {raw['preset']!r}; choose from {sorted(MARKET_PRESETS)}")
        return MARKET_PRESETS[raw["preset"]]()
    missing = sorted({"T", "N", "r", "b", "sigma"} - set(raw))
    if missing:
        raise ConfigError(f"market: missing field(s) {missing}")
    try:
        return MarketParams.from_dict(raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"market: {exc}") from exc


def resolve_config(raw: dict, *, paper_scale: bool = False, env: dict | None = None) -> RunSpec:
    """Validate a raw JSON config and fill in every default."""
    env = os.environ if env is None else env
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {unknown}")
    mode = raw.get("mode", "d-tipo")
    if mode not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}, got {mode!r}")

    seed = raw.get("seed", 0)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")
    seeds = {"train": seed, "eval": seed + 1, "price": seed + 2}
    if "seeds" in raw and not env.get(SEED_ENV):
        bad = sorted(set(raw["seeds"]) - set(seeds))
        if bad:
            raise ConfigError(f"seeds: unknown field(s) {bad}")
        seeds.update({k: int(v) for k, v in raw["seeds"].items()})
    if seeds["eval"] == seeds["train"]:
        raise ConfigError("seeds: the evaluation seed must differ from the training seed")

    market = _build_market(raw.get("market", {"preset": "paper-jump"}))
    if mode == "mv-benchmark":
        base = TradingConstraints.mean_variance_benchmark().to_dict()
        constraints = _build(TradingConstraints, {**base, **raw.get("constraints", {})}, "constraints")
        objective = _build(ObjectiveSpec, {"kind": MV, "lam": PAPER_LAMBDA, **raw.get("objective", {})}, "objective")
    else:
        constraints = _build(TradingConstraints, raw.get("constraints"), "constraints",
                             options_enabled=(mode == "d-tipo"))
        objective = _build(ObjectiveSpec, raw.get("objective"), "objective")
    train_raw = dict(raw.get("train", {}))
    if paper_scale:
        train_raw["M_train"] = PAPER_M_TRAIN
    if "seed" in train_raw:
        raise ConfigError("train.seed: set the top-level 'seed' or 'seeds.train' instead")
    train_cfg = _build(TrainConfig, train_raw, "train", seed=seeds["train"])
    if train_cfg.path_scheme == "exact" and market.has_jumps:
        raise ConfigError("train.path_scheme: exact sampling is only available without jumps")
    pricing = _build(PricingConfig, raw.get("pricing"), "pricing")
    evaluation = _build(EvalConfig, raw.get("evaluation"), "evaluation")
    if evaluation.scheme == "exact" and market.has_jumps:
        raise ConfigError("evaluation.scheme: exact sampling is only available without jumps")
    run_id = str(raw.get("run_id", mode))
    return RunSpec(run_id=run_id, mode=mode, market=market, constraints=constraints, objective=objective,
                   train=train_cfg, pricing=pricing, evaluation=evaluation,
                   output_dir=str(raw.get("output_dir", "runs")), seeds=seeds)


def spec_from_frozen(frozen: dict) -> RunSpec:
    """Rebuild a RunSpec from the dict written to config.json or a checkpoint."""
    raw = {k: v for k, v in frozen.items() if k in _TOP_KEYS}
    raw["train"] = {k: v for k, v in raw.get("train", {}).items() if k != "seed"}
    return resolve_config(raw, env={})


def load_config(path: str | Path, **kwargs) -> RunSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(raw, **kwargs)


def preset_path(name: str) -> Path:
    return Path(str(resources.files("dtipo") / "presets" / f"{name}.json"))


def prepare_run_dir(spec: RunSpec, out: str | Path | None) -> Path:
    """Create the run directory and freeze the resolved config in it."""
    run_dir = Path(out) if out is not None else Path(spec.output_dir) / spec.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    frozen = json.dumps(spec.to_dict(), indent=1, sort_keys=True)
    cfg_path = run_dir / "config.json"
    if cfg_path.exists() and cfg_path.read_text() != frozen:
        raise ConfigError(f"{run_dir} already holds a run with a different config; choose another --out")
    cfg_path.write_text(frozen)
    return run_dir


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _surface_to_dict(s: PriceSurface) -> dict:
    return {"strikes": s.strikes.tolist(), "prices": s.prices.tolist(), "std_errors": s.std_errors.tolist(),
            "kinds": list(s.kinds), "underlyings": list(s.underlyings), "M_price": s.M_price, "seed": s.seed}


def _surface_from_dict(d: dict) -> PriceSurface:
    return PriceSurface(np.array(d["strikes"]), np.array(d["prices"]), np.array(d["std_errors"]),
                        d["kinds"], d["underlyings"], d["M_price"], d["seed"])


def price_surface_for(spec: RunSpec, market: MarketParams | None = None) -> PriceSurface:
    c = spec.constraints
    return build_price_surface(market or spec.market, default_strike_grid(c.K_low, c.K_high, spec.pricing.knots),
                               spec.pricing.M_price, spec.seeds["price"], spec.pricing.scheme)


# --- commands --------------------------------------------------------------

def run_training(spec: RunSpec, run_dir: Path, workers: int = 1) -> dict:
    """Train the policy described by ``spec``; writes checkpoint, log and summary."""
    if spec.mode == "mv-baseline":
        raise ConfigError("mode mv-baseline has nothing to train; use 'evaluate --strategy mv'")
    prices = None
    extra = {"run": spec.to_dict()}
    if spec.options_enabled:
        prices = price_surface_for(spec)
        prices.to_csv(run_dir / "prices.csv")
        extra["price_surface"] = _surface_to_dict(prices)
    params, train_log = train(spec.train, spec.market, spec.constraints, spec.objective, prices,
                              checkpoint_path=run_dir / "checkpoint.json", workers=workers,
                              checkpoint_extra=extra)
    train_log.to_csv(run_dir / "train_log.csv")
    # wall-clock times are the only non-reproducible output; kept out of CSV/JSON
    (run_dir / "timing.txt").write_text("".join(f"{i} {t:.6f}\n" for i, t in enumerate(train_log.wall_times)))
    summary = {**train_log.summary(), "params_digest": params.digest(), "config_digest": spec.digest(),
               "n_parameters": params.size, "final_U": -train_log.final_loss,
               "final_U_wealth": -train_log.final_loss + spec.objective.shift(spec.train.x0_IC)}
    _write_json(run_dir / "summary.json", summary)
    return {"params": params, "log": train_log, "prices": prices, "summary": summary}


def cmd_train(args) -> int:
    spec = load_config(args.config, paper_scale=args.paper_scale)
    run_dir = prepare_run_dir(spec, args.out)
    res = run_training(spec, run_dir, args.workers)
    print(f"trained {spec.mode} in {run_dir}: final U = {res['summary']['final_U']:.6f} "
          f"(wealth units {res['summary']['final_U_wealth']:.6f})")
    return 0


def load_strategy(checkpoint: str | Path):
    state = checkpoint_load(checkpoint)
    extra = state["extra"]
    if "run" not in extra:
        raise ConfigError(f"{checkpoint}: checkpoint carries no run description")
    spec = spec_from_frozen(extra["run"])
    prices = _surface_from_dict(extra["price_surface"]) if "price_surface" in extra else None
    arch = state["params"].architecture()
    expected_opts = 2 * spec.market.n_stocks if spec.options_enabled else 0
    if arch["n_options"] != expected_opts or arch["n_stocks"] != spec.market.n_stocks or arch["N"] != spec.market.N:
        raise ConfigError(f"{checkpoint}: architecture {arch} does not match its run configuration")
    return spec, NeuralStrategy(state["params"], prices, label=spec.mode)


def run_evaluation(spec: RunSpec, strategy, vol_factor: float = 1.0, *, target_mean: float | None = None,
                   use_mv: bool = False, M_eval: int | None = None) -> tuple:
    """Evaluate a trained policy, or the closed-form baseline matched to ``target_mean``."""
    M = M_eval or spec.evaluation.M_eval
    kw = dict(x0_IC=spec.train.x0_IC, scheme=spec.evaluation.scheme, train_seed=spec.seeds["train"])
    constraints = spec.constraints
    if use_mv:
        if target_mean is None:
            base = evaluate_strategy(strategy, spec.market, constraints, spec.objective, M, spec.seeds["eval"], **kw)
            target_mean = base.wealth_terms["mean"]
        analytic = mv_baseline_for_target_mean(spec.market, target_mean, spec.train.x0_IC)
        strategy = AnalyticStrategy(analytic, label="mv-baseline")
        constraints = TradingConstraints.from_dict({**constraints.to_dict(), "options_enabled": False})
    market = scale_volatility(spec.market, vol_factor)
    report = evaluate_strategy(strategy, market, constraints, spec.objective, M, spec.seeds["eval"], **kw)
    meta = {"vol_factor": vol_factor, "strategy": report.strategy, "target_mean": target_mean,
            "config_digest": spec.digest()}
    if use_mv:
        meta["mv_lambda"] = strategy.analytic.lam
    return report, meta


def cmd_evaluate(args) -> int:
    if args.strategy == "mv" and args.checkpoint is None and args.config is None:
        raise ConfigError("--strategy mv needs --checkpoint or --config")
    if args.checkpoint is not None:
        spec, strategy = load_strategy(args.checkpoint)
        source = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()[:12]
    else:
        if args.strategy != "mv" or args.target_mean is None:
            raise ConfigError("without --checkpoint only '--strategy mv --target-mean M' can be evaluated")
        spec, strategy = load_config(args.config), None
        source = spec.digest()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        spec.seeds = {**spec.seeds, "eval": int(env_seed) + 1}
    try:
        report, meta = run_evaluation(spec, strategy, args.vol_factor, target_mean=args.target_mean,
                                      use_mv=args.strategy == "mv", M_eval=args.M_eval)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tag = f"eval-{args.strategy}-vol{args.vol_factor:g}-{source}"
    out = Path(args.out) if args.out else Path(spec.output_dir) / tag
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    _write_json(out / "eval_meta.json", meta)
    export_distributions(report, out)
    w = report.wealth_terms
    print(f"{report.strategy} (vol x{args.vol_factor:g}): mean {w['mean']:.4f} var {w['var']:.4f} "
          f"ES- {w['es_lower']:.4f} ES+ {w['es_upper']:.4f} U {w['U']:.4f} "
          f"trading cost {report.trading_cost_pct:.3f}% -> {out}")
    return 0


def band_comparison(learned: dict, reference: dict, n_se: float = 3.0) -> dict:
    """Per-date band differences in units of their combined standard error."""
    out = {"max_abs_z": {}, "within": {}}
    for key in ("p5", "mean", "p95"):
        diff = np.array(learned[key]) - np.array(reference[key])
        se = np.hypot(np.array(learned[key + "_se"]), np.array(reference[key + "_se"]))
        # date 0 is deterministic on both sides
        z = np.where(se > 0, np.abs(diff) / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))
        out["max_abs_z"][key] = float(z.max())
        out["within"][key] = bool(np.all(z <= n_se))
    out["all_within"] = all(out["within"].values())
    return out


def run_benchmark(spec: RunSpec, run_dir: Path, workers: int = 1, M_eval: int | None = None) -> dict:
    """Closed-form optimum versus the trained policy on the same evaluation paths."""
    analytic = analytic_solution(spec.market, spec.objective.lam, spec.train.x0_IC)
    checked = False
    if (spec.market.to_dict() == paper_gbm_market().to_dict() and spec.objective.lam == PAPER_LAMBDA
            and spec.train.x0_IC == 1.0):
        validate_against_paper(analytic)
        checked = True
    res = run_training(spec, run_dir, workers)
    M = M_eval or spec.evaluation.M_eval
    kw = dict(x0_IC=spec.train.x0_IC, scheme=spec.evaluation.scheme, train_seed=spec.seeds["train"])
    learned = evaluate_strategy(NeuralStrategy(res["params"], label="d-tip"), spec.market, spec.constraints,
                                spec.objective, M, spec.seeds["eval"], **kw)
    reference = evaluate_strategy(AnalyticStrategy(analytic), spec.market, spec.constraints, spec.objective,
                                  M, spec.seeds["eval"], **kw)
    export_distributions(learned, run_dir / "learned")
    export_distributions(reference, run_dir / "analytic")
    U_star = analytic.theoretical_objective
    U_learned = learned.wealth_terms["U"]
    comparison = {
        "U_star": U_star, "validated_against_published_optimum": checked,
        "U_learned": U_learned, "U_analytic_simulated": reference.wealth_terms["U"],
        "relative_gap": abs(U_learned - U_star) / abs(U_star),
        "train_final_U_wealth": res["summary"]["final_U_wealth"],
        "bands": band_comparison(learned.bands, reference.bands), "M_eval": M,
    }
    _write_json(run_dir / "comparison.json", comparison)
    return {**res, "learned": learned, "reference": reference, "comparison": comparison}


def cmd_benchmark_mv(args) -> int:
    spec = load_config(args.config, paper_scale=args.paper_scale)
    if spec.mode != "mv-benchmark":
        raise ConfigError(f"benchmark-mv needs mode 'mv-benchmark', got {spec.mode!r}")
    run_dir = prepare_run_dir(spec, args.out)
    res = run_benchmark(spec, run_dir, args.workers)
    c = res["comparison"]
    print(f"U* = {c['U_star']:.6f}; learned U = {c['U_learned']:.6f} (gap {100 * c['relative_gap']:.2f}%); "
          f"bands within 3 SE: {c['bands']['all_within']} -> {run_dir}")
    return 0


def cmd_price_options(args) -> int:
    spec = load_config(args.config)
    surface = price_surface_for(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    surface.to_csv(out)
    print(f"priced {surface.n_options} options on {surface.strikes.size} strikes "
          f"(M_price={surface.M_price}) -> {out}")
    return 0


def cmd_verify(args) -> int:
    from .acceptance import run_all
    results = run_all(quick=args.quick, workers=args.workers)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtipo", description="Neural trading strategies with options: "
                                "training, evaluation and verification.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="threads for path simulation (results do not depend on it)")

    sp = sub.add_parser("train", help="train a policy from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--paper-scale", action="store_true", help=f"use M_train = {PAPER_M_TRAIN}")
    sp.add_argument("--out", help="run directory (default: <output_dir>/<run_id>)")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a trained checkpoint or the closed-form MV baseline")
    sp.add_argument("--checkpoint")
    sp.add_argument("--config", help="config for '--strategy mv' without a checkpoint")
    sp.add_argument("--vol-factor", type=float, default=1.0)
    sp.add_argument("--strategy", choices=("policy", "mv"), default="policy")
    sp.add_argument("--target-mean", type=float, help="mean terminal wealth the MV baseline should match")
    sp.add_argument("--M-eval", type=int, dest="M_eval")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("benchmark-mv", help="train on the jump-free market and compare with the closed form")
    sp.add_argument("--config", required=True)
    sp.add_argument("--paper-scale", action="store_true")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_benchmark_mv)

    sp = sub.add_parser("price-options", help="write the option price surface as CSV")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_price_options)

    sp = sub.add_parser("verify", help="run the acceptance checks")
    sp.add_argument("--quick", action="store_true", help="skip the checks that train networks")
    common(sp)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
