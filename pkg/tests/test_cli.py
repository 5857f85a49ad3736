import json

import pytest

from dtipo.acceptance import TINY_BENCHMARK, TINY_CONFIG
from dtipo.cli import ConfigError, load_config, main, preset_path, prepare_run_dir, resolve_config
from dtipo.options import PriceSurface


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.mark.parametrize("name", ["gbm_benchmark", "jump_options", "jump_no_options"])
def test_presets_resolve(name):
    spec = load_config(preset_path(name), env={})
    assert spec.seeds["eval"] != spec.seeds["train"]
    assert spec.constraints.options_enabled == (spec.mode == "d-tipo")


def test_benchmark_mode_defaults():
    spec = resolve_config({"mode": "mv-benchmark", "market": {"preset": "paper-gbm"}}, env={})
    assert spec.objective.kind == "MV" and spec.objective.lam == 1.104
    assert spec.constraints.C == 0 and spec.constraints.unconstrained_alpha


@pytest.mark.parametrize("raw,field", [
    ({"train": {"M_batch": 3000}}, "train"),
    ({"colour": "red"}, "colour"),
    ({"objective": {"lamda": 1}}, "objective"),
    ({"mode": "tipo"}, "mode"),
    ({"train": {"seed": 4}}, "train.seed"),
    ({"train": {"path_scheme": "exact"}}, "exact"),
    ({"seeds": {"train": 1, "eval": 1}}, "seeds"),
])
def test_bad_configs_name_the_field(raw, field):
    with pytest.raises(ConfigError, match=field):
        resolve_config(raw, env={})


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    cfg = write(tmp_path, {"train": {"M_train": 1000, "M_batch": 3}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    assert "M_batch" in capsys.readouterr().err


def test_seed_environment_override():
    spec = resolve_config({"seed": 1}, env={"DTIPO_SEED": "7"})
    assert spec.seeds == {"train": 7, "eval": 8, "price": 9}
    assert spec.train.seed == 7


def test_run_dir_refuses_a_different_config(tmp_path):
    a = resolve_config({"seed": 1}, env={})
    b = resolve_config({"seed": 2}, env={})
    prepare_run_dir(a, tmp_path / "run")
    prepare_run_dir(a, tmp_path / "run")
    with pytest.raises(ConfigError):
        prepare_run_dir(b, tmp_path / "run")


def test_price_options_command(tmp_path):
    cfg = write(tmp_path, TINY_CONFIG)
    out = tmp_path / "prices.csv"
    assert main(["price-options", "--config", cfg, "--out", str(out)]) == 0
    surf = PriceSurface.from_csv(out)
    assert surf.n_options == 10 and surf.strikes.size == 11


def test_train_then_evaluate(tmp_path, monkeypatch):
    monkeypatch.delenv("DTIPO_SEED", raising=False)
    cfg = write(tmp_path, TINY_CONFIG)
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(run), "--workers", "1"]) == 0
    for f in ("config.json", "checkpoint.json", "train_log.csv", "prices.csv", "summary.json"):
        assert (run / f).exists()
    ck = str(run / "checkpoint.json")
    assert main(["evaluate", "--checkpoint", ck, "--out", str(tmp_path / "e1")]) == 0
    assert main(["evaluate", "--checkpoint", ck, "--vol-factor", "1", "--out", str(tmp_path / "e2")]) == 0
    r1 = json.loads((tmp_path / "e1" / "report.json").read_text())
    r2 = json.loads((tmp_path / "e2" / "report.json").read_text())
    assert r1 == r2
    assert main(["evaluate", "--checkpoint", ck, "--strategy", "mv", "--target-mean", "1.15",
                 "--out", str(tmp_path / "mv")]) == 0
    mv = json.loads((tmp_path / "mv" / "report.json").read_text())
    assert mv["strategy"] == "mv-baseline"
    for f in ("bands.csv", "pdf.csv", "cdf.csv", "eval_meta.json"):
        assert (tmp_path / "mv" / f).exists()


def test_benchmark_command(tmp_path):
    cfg = write(tmp_path, TINY_BENCHMARK)
    assert main(["benchmark-mv", "--config", cfg, "--out", str(tmp_path / "b"), "--workers", "1"]) == 0
    comp = json.loads((tmp_path / "b" / "comparison.json").read_text())
    assert comp["validated_against_published_optimum"]
    assert comp["U_star"] == pytest.approx(1.163749, abs=1e-6)


def test_benchmark_rejects_other_modes(tmp_path):
    cfg = write(tmp_path, TINY_CONFIG)
    assert main(["benchmark-mv", "--config", cfg, "--out", str(tmp_path / "b")]) == 2


def test_unattainable_target_mean_is_reported(tmp_path, capsys):
    cfg = write(tmp_path, TINY_CONFIG)
    assert main(["evaluate", "--config", cfg, "--strategy", "mv", "--target-mean", "1.0",
                 "--out", str(tmp_path / "x")]) == 2
    assert "not attainable" in capsys.readouterr().err
