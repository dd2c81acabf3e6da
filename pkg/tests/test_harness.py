import csv
import json
import os
import subprocess
import sys

import pytest

from vitapes import cli
from vitapes.checkpoint import load_checkpoint, read_header
from vitapes.errors import ConfigError
from vitapes.harness import (ABLATION_CELLS, apply_overrides, config_from_dict, load_config, parse_value,
                             run_config, workers)

TINY = """
mode = "{mode}"
seeds = [0]
out = "{out}"

[model]
name = "desk"
embed_dim = 16
depth = 1
heads = 2
visual_side = 16
tactile_side = 16

[data]
samples_per_class = 6

[train]
epochs = 2
batch_size = 8
lr = 1e-3
weight_decay = 0.05

[probe]
epochs = 20
"""


def write_cfg(tmp_path, mode, extra="", top=""):
    path = tmp_path / f"{mode}.toml"
    path.write_text(top + TINY.format(mode=mode, out=(tmp_path / mode).as_posix()) + extra)
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_value_and_overrides():
    assert parse_value("3") == 3 and parse_value("[1, 2]") == [1, 2] and parse_value("abc") == "abc"
    raw = apply_overrides({"train": {"epochs": 1}}, ["train.epochs=5", "model.name=\"desk\"", "seeds=[1,2]"])
    assert raw == {"train": {"epochs": 5}, "model": {"name": "desk"}, "seeds": [1, 2]}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


@pytest.mark.parametrize("raw,field", [
    ({}, "mode"),
    ({"mode": "dance"}, "mode"),
    ({"mode": "probe", "colour": 1}, "colour"),
    ({"mode": "probe", "train": {"epoch": 3}}, "train.epoch"),
    ({"mode": "probe", "model": {"name": "huge"}}, "model.name"),
    ({"mode": "probe", "model": {"depthh": 2}}, "model.depthh"),
    ({"mode": "probe", "data": {"image_side": 48}}, "data.image_side"),
    ({"mode": "probe", "mae": {"mask_ratio": 1.0}}, "mae.mask_ratio"),
    ({"mode": "probe", "seeds": []}, "seeds"),
    ({"mode": "probe", "train_fraction": 1.0}, "train_fraction"),
    ({"mode": "ablate", "ablate": {"cells": ["nope"]}}, "ablate.cells"),
    ({"mode": "scale", "scale": {"variants": ["nope"]}}, "scale.variants"),
])
def test_config_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.field == field


def test_config_defaults_follow_model(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "probe"), seed=4, out=str(tmp_path / "x"))
    assert cfg.data.image_side == 16 and cfg.data.patch_size == 8
    assert cfg.seeds == (4,) and cfg.out == str(tmp_path / "x")
    assert cfg.name == "probe-desk"


def test_ablation_cells_layout():
    assert list(ABLATION_CELLS)[0] == "vitapes_full" and len(ABLATION_CELLS) == 8
    assert ABLATION_CELLS["vision_only"]["modality"] == "vision_only"


def test_workers_env(monkeypatch):
    monkeypatch.setenv("VITAPES_WORKERS", "3")
    assert workers() == 3
    monkeypatch.setenv("VITAPES_WORKERS", "x")
    with pytest.raises(ConfigError):
        workers()


def test_cli_missing_mode_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("seeds = [0]\n")
    assert cli.main(["run", "--config", str(p)]) == 2
    assert "field: mode" in capsys.readouterr().err


def test_cli_unknown_key_exits_2(tmp_path, capsys):
    p = write_cfg(tmp_path, "probe", "\n[verify]\nbogus = 1\n")
    assert cli.main(["probe", "--config", str(p)]) == 2
    assert "verify.bogus" in capsys.readouterr().err


def test_cli_missing_file_exits_2(tmp_path):
    assert cli.main(["verify", "--config", str(tmp_path / "none.toml")]) == 2


def test_cli_verify_subprocess(tmp_path):
    out = tmp_path / "v"
    cfg = write_cfg(tmp_path, "verify", "")
    res = subprocess.run([sys.executable, "-m", "vitapes.cli", "run", "--config", str(cfg), "--out", str(out),
                          "--override", 'model.name="theory_micro"', "--override", "model.embed_dim=8",
                          "--override", "model.depth=1", "--override", "model.heads=1",
                          "--override", "model.visual_side=4", "--override", "model.tactile_side=4",
                          "--override", "verify.num_pairs=500", "--override", "verify.num_samples=10"],
                         capture_output=True, text=True, timeout=120)
    assert res.returncode == 0, res.stderr
    reports = [json.loads(line) for line in (out / "verify.jsonl").read_text().splitlines()]
    assert reports and all(r["status"] in ("pass", "diagnostic") for r in reports)


def test_verify_failure_exits_1(tmp_path, monkeypatch):
    import vitapes.harness as h
    from vitapes.theory import VerifyReport

    monkeypatch.setattr(h, "verify_battery", lambda *a, **k: [VerifyReport("x", "fail")])
    assert cli.main(["verify", "--config", str(write_cfg(tmp_path, "verify"))]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exits_3_with_checkpoint(tmp_path):
    cfg = write_cfg(tmp_path, "train_supervised")
    code = cli.main(["train_supervised", "--config", str(cfg), "--override", "train.lr=1e300",
                     "--override", "train.grad_clip=false", "--override", "train.weight_decay=0.0"])
    assert code == 3
    ck = tmp_path / "train_supervised" / "checkpoint-supervised-seed0.vtpm"
    assert ck.exists()
    header, _ = read_header(ck)
    assert header["meta"]["aborted"] is True
    metrics = rows(tmp_path / "train_supervised" / "metrics-seed0.csv")
    assert metrics == [] or set(metrics[0]) == {"run_id", "epoch", "split", "metric", "value", "seed"}


def test_train_supervised_artifacts_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, "train_supervised", "\n[audit]\nstride = 1\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(b)]) == 0
    names = sorted(os.listdir(a))
    for expect in ("metrics-seed0.csv", "verify-seed0.jsonl", "singular_values-seed0.csv",
                   "checkpoint-supervised-seed0.vtpm", "pe_cosine-seed0.pgm", "pe_global-seed0.csv",
                   "attention_mass-seed0.csv"):
        assert expect in names
    for name in ("metrics-seed0.csv", "singular_values-seed0.csv", "pe_global-seed0.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert len((a / "verify-seed0.jsonl").read_text().splitlines()) == 2
    m = rows(a / "metrics-seed0.csv")
    assert {r["metric"] for r in m} == {"supervised_loss", "accuracy"}


def test_resume_continues_training(tmp_path):
    cfg = write_cfg(tmp_path, "train_supervised", top="checkpoint_every = 1\n")
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    full = (out / "metrics-seed0.csv").read_text()
    assert cli.main(["run", "--config", str(cfg), "--out", str(out), "--override", "train.epochs=3",
                     "--override", "resume=true", "--override", "audit.enabled=false"]) == 0
    ck = load_checkpoint(out / "checkpoint-supervised-seed0.vtpm")
    assert ck.epoch == 2
    resumed = (out / "metrics-seed0.csv").read_text()
    assert resumed.startswith(full) and ",2,train,supervised_loss," in resumed


def test_pretrain_then_probe_from_checkpoint(tmp_path):
    cfg = write_cfg(tmp_path, "pretrain_mae")
    assert cli.main(["run", "--config", str(cfg)]) == 0
    ck = tmp_path / "pretrain_mae" / "checkpoint-mae-seed0.vtpm"
    assert "decoder.embed.W" in load_checkpoint(ck).model.params
    pcfg = write_cfg(tmp_path, "probe", top=f'checkpoint = "{ck.as_posix()}"\n')
    assert cli.main(["run", "--config", str(pcfg)]) == 0
    m = rows(tmp_path / "probe" / "metrics-seed0.csv")
    assert m[0]["metric"] == "probe_accuracy"


def test_zeroshot_and_sweep_modes(tmp_path):
    assert cli.main(["zeroshot", "--config", str(write_cfg(tmp_path, "zeroshot"))]) == 0
    cfg = write_cfg(tmp_path, "sweep", "\n[sweep]\nratios = [0.0, 1.0]\nmask_seeds = [0, 1]\nencoder = \"random\"\n")
    assert cli.main(["run", "--config", str(cfg)]) == 0
    sweep = rows(tmp_path / "sweep" / "sweep-seed0.csv")
    assert [r["ratio"] for r in sweep] == ["0", "1"] and sweep[0]["seeds"] == "0 1"


def test_ablation_grid(tmp_path):
    cfg = write_cfg(tmp_path, "ablate", '\n[ablate]\ncells = ["vitapes_full", "vision_only", "no_global_pe"]\n')
    assert cli.main(["run", "--config", str(cfg)]) == 0
    table = rows(tmp_path / "ablate" / "ablation.csv")
    assert [r["cell"] for r in table] == ["vitapes_full", "vision_only", "no_global_pe"]
    assert all(r["status"] == "ok" for r in table)
    assert int(table[1]["params"]) < int(table[0]["params"])


def test_scaling_grid(tmp_path):
    cfg = write_cfg(tmp_path, "scale", '\n[scale]\nvariants = ["theory_micro", "scale_micro"]\nepochs = 1\n')
    assert cli.main(["run", "--config", str(cfg)]) == 0
    table = rows(tmp_path / "scale" / "scaling.csv")
    assert [r["variant"] for r in table] == ["theory_micro", "scale_micro"]
    assert all(r["params"] == r["params_formula"] for r in table)
    assert table[0]["embed_dim"] == "8"


@pytest.mark.parametrize("name", sorted(os.listdir(os.path.join(os.path.dirname(__file__), "..", "configs"))))
def test_shipped_configs_parse(name):
    path = os.path.join(os.path.dirname(__file__), "..", "configs", name)
    cfg = load_config(path)
    assert cfg.mode in name or cfg.mode
