"""Mini-batch training loop: simulate, score, backpropagate, step.

Batches inside an epoch are processed strictly in order. With
``data_mode="reuse"`` every epoch sees the same ``M_train`` paths, generated
once from the training seed; ``"regenerate"`` draws a fresh set per epoch.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .market import MarketParams, PathBatch, sample_gbm_exact, sample_paths
from .objective import ObjectiveSpec, evaluate
from .options import PriceSurface
from .policy import PolicyParams, TradingConstraints, decode_array, encode_array, init_params, simulate_strategy

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_CACHE_LIMIT_BYTES = 768 * 2 ** 20


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message: str, last_good: PolicyParams):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    M_train: int = 2 ** 18
    M_batch: int = 2 ** 12
    M_epoch: int = 10
    lr0: float = 0.01
    lr_decay_factor: float = math.exp(-0.5)
    lr_decay_unit: str = "epoch"
    lr_warm_units: int = 2
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    data_mode: str = "reuse"
    path_scheme: str = "euler"
    x0_IC: float = 1.0

    def __post_init__(self):
        for name in ("M_train", "M_batch", "M_epoch"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if self.M_train % self.M_batch:
            raise ValueError(f"M_batch={self.M_batch} does not divide M_train={self.M_train}")
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be non-negative")
        if self.lr_decay_unit not in ("epoch", "batch"):
            raise ValueError("lr_decay_unit must be 'epoch' or 'batch'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.data_mode not in ("reuse", "regenerate"):
            raise ValueError("data_mode must be 'reuse' or 'regenerate'")
        if self.path_scheme not in ("euler", "exact"):
            raise ValueError("path_scheme must be 'euler' or 'exact'")

    @property
    def K_batch(self) -> int:
        return self.M_train // self.M_batch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(config: TrainConfig, epoch_index: int, batch_index: int) -> float:
    """Learning rate for 0-based (epoch, batch-within-epoch) indices.

    The rate stays at ``lr0`` for the first ``lr_warm_units`` decay units and
    is multiplied by ``lr_decay_factor`` for every unit after that.
    """
    if epoch_index < 0 or not 0 <= batch_index < config.K_batch:
        raise IndexError("epoch or batch index out of range")
    if config.lr_decay_unit == "epoch":
        unit = epoch_index + 1
    else:
        unit = epoch_index * config.K_batch + batch_index + 1
    return config.lr0 * config.lr_decay_factor ** max(0, unit - config.lr_warm_units)


class Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list, grads: list, lr: float) -> list:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out

    def state(self) -> dict:
        return {"t": self.t, "m": [encode_array(a) for a in self.m], "v": [encode_array(a) for a in self.v]}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [decode_array(a) for a in state["m"]]
        self.v = [decode_array(a) for a in state["v"]]


class SGD:
    def __init__(self, shapes):
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        return [p - lr * g for p, g in zip(params, grads)]

    def state(self) -> dict:
        return {"t": self.t}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])


def _make_optimizer(config: TrainConfig, params: PolicyParams):
    shapes = [np.shape(a) for a in params.arrays()]
    if config.optimizer == "adam":
        return Adam(shapes, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return SGD(shapes)


LOG_FIELDS = ["epoch", "batch", "step", "lr", "loss", "U", "mean", "var", "es_lower", "es_upper", "grad_norm"]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list] = {}
        for row in self.rows:
            by_epoch.setdefault(row["epoch"], []).append(row["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses()[-1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for row in self.rows:
                w.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in LOG_FIELDS])

    def timing_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "wall_seconds"])
            for i, t in enumerate(self.wall_times):
                w.writerow([i, f"{t:.6f}"])

    def summary(self) -> dict:
        losses = self.epoch_losses()
        return {"epochs": len(losses), "steps": len(self.rows), "epoch_mean_loss": losses,
                "final_loss": losses[-1] if losses else None}


class TrainingData:
    """Supplies batch ``k`` of epoch ``e`` deterministically."""

    def __init__(self, config: TrainConfig, market: MarketParams, batch_source: Callable | None = None,
                 workers: int = 1):
        self.config = config
        self.workers = workers
        self.market = market
        self.batch_source = batch_source
        self._cache: PathBatch | None = None
        size = config.M_train * (market.N + 1) * market.n_stocks * 8
        if batch_source is None and config.data_mode == "reuse" and size <= _CACHE_LIMIT_BYTES:
            self._cache = self._sample(0, config.M_train, config.seed)

    def _sample(self, start: int, M: int, seed: int) -> PathBatch:
        fn = sample_gbm_exact if self.config.path_scheme == "exact" else sample_paths
        return fn(self.market, M, seed, namespace="train", start=start, workers=self.workers)

    def batch(self, epoch: int, k: int) -> PathBatch:
        lo = k * self.config.M_batch
        hi = lo + self.config.M_batch
        if self.batch_source is not None:
            return self.batch_source(epoch, k)
        if self._cache is not None:
            return self._cache.subset(lo, hi)
        seed = self.config.seed
        if self.config.data_mode == "regenerate":
            seed = int(np.random.SeedSequence([self.config.seed, epoch]).generate_state(1, np.uint64)[0])
        return self._sample(lo, self.config.M_batch, seed)


def loss_and_grad(params: PolicyParams, batch: PathBatch, prices: PriceSurface | None,
                  constraints: TradingConstraints, objective: ObjectiveSpec, x0_IC: float = 1.0):
    tape = ad.Tape(track_patterns=False)
    leaves = params.on_tape(tape)
    outcome = simulate_strategy(leaves, batch, prices, constraints, x0_IC)
    terms = evaluate(objective, outcome.returns)
    grads = tape.backward(terms.loss, leaves.arrays())
    return terms, grads


@dataclass
class TrainState:
    params: PolicyParams
    optimizer: object
    epoch: int
    log: TrainLog


def train(config: TrainConfig, market: MarketParams, constraints: TradingConstraints, objective: ObjectiveSpec,
          prices: PriceSurface | None = None, *, params: PolicyParams | None = None,
          resume: str | Path | None = None, checkpoint_path: str | Path | None = None,
          stop_after_epoch: int | None = None, batch_source: Callable | None = None,
          on_batch: Callable | None = None, workers: int = 1,
          checkpoint_extra: dict | None = None) -> tuple[PolicyParams, TrainLog]:
    """Run the training loop; returns the final parameters and the full log.

    ``resume`` continues from a checkpoint written by an earlier call (with the
    same configuration). ``checkpoint_path`` is rewritten after every epoch.
    ``stop_after_epoch`` ends the run early (used to test resumption).
    ``workers`` only affects speed: paths do not depend on it.
    """
    n_options = 2 * market.n_stocks if constraints.options_enabled else 0
    if constraints.options_enabled and prices is None:
        raise ValueError("options are enabled but no price surface was given")
    if prices is not None and constraints.options_enabled and prices.n_options != n_options:
        raise ValueError(f"price surface has {prices.n_options} options, expected {n_options}")

    if resume is not None:
        state = checkpoint_load(resume)
        if state["config"] != config.to_dict():
            raise CheckpointError("checkpoint was written with a different training configuration")
        params = state["params"]
        optimizer = _make_optimizer(config, params)
        optimizer.load(state["optimizer"])
        log_ = TrainLog(rows=state["log_rows"])
        first_epoch = state["epoch"]
    else:
        if params is None:
            params = init_params(market.n_stocks, market.N, n_options, config.seed)
        optimizer = _make_optimizer(config, params)
        log_ = TrainLog()
        first_epoch = 0
    if params.N != market.N or params.n_stocks != market.n_stocks or params.n_options != n_options:
        raise ValueError("policy architecture does not match the market/constraints")

    data = TrainingData(config, market, batch_source, workers)
    step = len(log_.rows)
    last_epoch = config.M_epoch if stop_after_epoch is None else min(config.M_epoch, stop_after_epoch)
    for epoch in range(first_epoch, last_epoch):
        for k in range(config.K_batch):
            t0 = time.perf_counter()
            batch = data.batch(epoch, k)
            lr = lr_schedule(config, epoch, k)
            try:
                terms, grads = loss_and_grad(params, batch, prices, constraints, objective, config.x0_IC)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, batch {k}: {exc}", params) from exc
            loss = -terms.U.item()
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {k}", params)
            new = optimizer.step([np.asarray(a) for a in params.arrays()], grads, lr)
            params = params.with_arrays(new)
            row = {"epoch": epoch, "batch": k, "step": step, "lr": lr, "loss": loss, "U": terms.U.item(),
                   "mean": terms.mean, "var": terms.var,
                   "es_lower": terms.es_lower if terms.es_lower is not None else float("nan"),
                   "es_upper": terms.es_upper if terms.es_upper is not None else float("nan"),
                   "grad_norm": gnorm}
            log_.rows.append(row)
            log_.wall_times.append(time.perf_counter() - t0)
            step += 1
            if on_batch is not None:
                on_batch(row)
        log.info("epoch %d: mean loss %.6f", epoch + 1, log_.epoch_losses()[-1])
        if checkpoint_path is not None:
            checkpoint_save(TrainState(params, optimizer, epoch + 1, log_), config, checkpoint_path,
                            constraints=constraints, market=market, objective=objective, extra=checkpoint_extra)
    return params, log_


# --- checkpoints -------------------------------------------------------------

def _checksum(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def checkpoint_save(state: TrainState, config: TrainConfig, path: str | Path, *, constraints=None,
                    market: MarketParams | None = None, objective: ObjectiveSpec | None = None,
                    extra: dict | None = None) -> None:
    """Write parameters, optimiser state and log as checksummed JSON."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "epoch": state.epoch,
        "params": state.params.to_dict(),
        "optimizer": {"kind": config.optimizer, **state.optimizer.state()},
        "log_rows": state.log.rows,
        "constraints": constraints.to_dict() if constraints is not None else None,
        "market": market.to_dict() if market is not None else None,
        "objective": objective.to_dict() if objective is not None else None,
        # batches are regenerated from (seed, epoch, index); nothing else to store
        "rng": {"seed": config.seed, "data_mode": config.data_mode},
        "extra": extra or {},
    }
    doc = {"checksum": _checksum(payload), "payload": payload}
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1, allow_nan=True))
    tmp.replace(path)


def checkpoint_load(path: str | Path, expect_architecture: dict | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
        payload = doc["payload"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint") from exc
    if doc.get("checksum") != _checksum(payload):
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or edited)")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arch = payload["params"]["architecture"]
    if expect_architecture is not None and arch != expect_architecture:
        raise CheckpointError(f"{path}: architecture {arch} does not match expected {expect_architecture}")
    return {
        "config": payload["config"],
        "epoch": int(payload["epoch"]),
        "params": PolicyParams.from_dict(payload["params"]),
        "optimizer": payload["optimizer"],
        "log_rows": payload["log_rows"],
        "constraints": TradingConstraints.from_dict(payload["constraints"]) if payload.get("constraints") else None,
        "market": MarketParams.from_dict(payload["market"]) if payload.get("market") else None,
        "objective": ObjectiveSpec(**payload["objective"]) if payload.get("objective") else None,
        "extra": payload.get("extra", {}),
    }
