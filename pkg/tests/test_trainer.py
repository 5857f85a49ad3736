import json
import math
from dataclasses import replace

import numpy as np
import pytest

from dtipo.market import paper_jump_market, sample_paths
from dtipo.objective import ObjectiveSpec
from dtipo.options import build_price_surface, default_strike_grid
from dtipo.policy import TradingConstraints
from dtipo.trainer import (Adam, CheckpointError, TrainConfig, TrainingDiverged, checkpoint_load, lr_schedule,
                           train)

MARKET = replace(paper_jump_market(), N=4)
CFG = TrainConfig(M_train=512, M_batch=128, M_epoch=3, seed=5)
CONS = TradingConstraints()
OBJ = ObjectiveSpec()


@pytest.fixture(scope="module")
def prices():
    return build_price_surface(MARKET, default_strike_grid(0.75, 1.25, 11), 8192, 9)


@pytest.mark.parametrize("unit,expected", [(1, 0.01), (2, 0.01), (3, 0.006065), (5, 0.002231)])
def test_learning_rate_per_epoch(unit, expected):
    assert lr_schedule(TrainConfig(), unit - 1, 7) == pytest.approx(expected, abs=5e-7)


def test_learning_rate_per_batch_and_constant():
    cfg = TrainConfig(M_train=64, M_batch=16, lr_decay_unit="batch")
    assert lr_schedule(cfg, 0, 1) == 0.01
    assert lr_schedule(cfg, 1, 0) == pytest.approx(0.01 * math.exp(-1.5))
    flat = TrainConfig(lr_decay_factor=1.0)
    assert {lr_schedule(flat, e, 0) for e in range(10)} == {0.01}
    with pytest.raises(IndexError):
        lr_schedule(cfg, 0, 4)


@pytest.mark.parametrize("kw", [{"M_batch": 3000}, {"M_epoch": 0}, {"lr0": -1.0}, {"optimizer": "rmsprop"},
                                {"data_mode": "stream"}, {"path_scheme": "milstein"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_roundtrip_and_unknown_fields():
    assert TrainConfig.from_dict(CFG.to_dict()) == CFG
    with pytest.raises(ValueError):
        TrainConfig.from_dict({**CFG.to_dict(), "momentum": 0.9})


def test_adam_first_step_is_lr_sized():
    opt = Adam([(3,)])
    new = opt.step([np.zeros(3)], [np.array([2.0, -0.5, 1e-3])], 0.1)[0]
    np.testing.assert_allclose(new, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_zero_learning_rate_leaves_params_unchanged(prices):
    from dtipo.policy import init_params
    p0 = init_params(5, MARKET.N, 10, CFG.seed)
    p, log = train(replace(CFG, lr0=0.0, M_epoch=1), MARKET, CONS, OBJ, prices)
    assert p.digest() == p0.digest()
    assert len(log.rows) == 4


def test_training_is_deterministic_and_improves(prices):
    p1, log1 = train(replace(CFG, M_epoch=4), MARKET, CONS, OBJ, prices)
    p2, log2 = train(replace(CFG, M_epoch=4), MARKET, CONS, OBJ, prices, workers=2)
    assert p1.digest() == p2.digest()
    assert log1.rows == log2.rows
    losses = log1.epoch_losses()
    assert losses[-1] < losses[0]


def test_resume_matches_straight_run(prices, tmp_path):
    ck = tmp_path / "ck.json"
    straight, log_s = train(CFG, MARKET, CONS, OBJ, prices)
    train(CFG, MARKET, CONS, OBJ, prices, checkpoint_path=ck, stop_after_epoch=1)
    assert checkpoint_load(ck)["epoch"] == 1
    resumed, log_r = train(CFG, MARKET, CONS, OBJ, prices, resume=ck)
    assert resumed.digest() == straight.digest()
    assert log_r.rows == log_s.rows
    with pytest.raises(CheckpointError):
        train(replace(CFG, lr0=0.02), MARKET, CONS, OBJ, prices, resume=ck)


def test_checkpoint_roundtrip_is_bitwise(prices, tmp_path):
    ck = tmp_path / "ck.json"
    p, _ = train(replace(CFG, M_epoch=1), MARKET, CONS, OBJ, prices, checkpoint_path=ck, checkpoint_extra={"k": 1})
    state = checkpoint_load(ck, expect_architecture=p.architecture())
    assert state["params"].digest() == p.digest()
    assert state["extra"] == {"k": 1}
    assert state["constraints"] == CONS


def test_checkpoint_errors(prices, tmp_path):
    ck = tmp_path / "ck.json"
    p, _ = train(replace(CFG, M_epoch=1), MARKET, CONS, OBJ, prices, checkpoint_path=ck)
    with pytest.raises(CheckpointError):
        checkpoint_load(ck, expect_architecture={**p.architecture(), "N": 20})
    doc = json.loads(ck.read_text())
    doc["payload"]["epoch"] = 2
    ck.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(ck)
    ck.write_text("{not json")
    with pytest.raises(CheckpointError):
        checkpoint_load(ck)


def test_non_finite_batch_raises_with_last_good_params(prices):
    def source(epoch, k):
        b = sample_paths(MARKET, 128, 1, start=128 * k)
        if k == 2:
            b.stocks[0, 2, 0] = np.nan
        return b

    with pytest.raises(TrainingDiverged) as info:
        train(CFG, MARKET, CONS, OBJ, prices, batch_source=source)
    assert info.value.last_good.size > 0
    assert np.all(np.isfinite(info.value.last_good.theta_alpha0))


def test_log_csv(prices, tmp_path):
    _, log = train(replace(CFG, M_epoch=1), MARKET, CONS, OBJ, prices)
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",")[:5] == ["epoch", "batch", "step", "lr", "loss"]
    assert len(lines) == 5
    assert float(lines[-1].split(",")[4]) == log.rows[-1]["loss"]


def test_options_need_prices():
    with pytest.raises(ValueError):
        train(CFG, MARKET, CONS, OBJ, None)
