import json
from pathlib import Path

import pytest
import yaml

from edgeadapt.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, main
from edgeadapt.config import ExperimentConfig, apply_overrides, dump_config, from_dict, load_config
from edgeadapt.errors import ConfigError

TINY = {
    "data": {"n_per_class": 4, "num_classes": 3},
    "model": {"a_in": 16, "cr": 0.25, "hidden": 32},
    "train": {"epochs": 1, "finetune_epochs": 1, "batch_size": 8, "eval_draws": 2},
    "channel": {"snr_source": 10.0, "snr_target": -5.0},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({**TINY, "output": str(tmp_path / "run")}))
    return path


def test_defaults_match_training_table():
    cfg = ExperimentConfig()
    plan = cfg.plan()
    assert (plan.epochs, plan.finetune_epochs, plan.batch_size) == (100, 20, 16)
    assert plan.lr0 == {"sre": 1e-3, "cce": 1e-2, "decoder": 1e-2}
    assert (plan.momentum, plan.weight_decay) == (0.9, 5e-4)
    w = plan.weights
    assert (w.lam, w.lambda1, w.lambda2) == (0.1, 0.1, 0.5)


def test_precedence_flags_over_file(tiny_config):
    cfg = load_config(tiny_config, {"train.epochs": "3"})
    assert cfg.train.epochs == 3
    assert cfg.data.n_per_class == 4
    assert load_config(None).train.epochs == 100


def test_round_trip_through_yaml():
    cfg = from_dict(TINY)
    again = from_dict(yaml.safe_load(dump_config(cfg)))
    assert again == cfg


@pytest.mark.parametrize(
    "overrides",
    [
        {"model.cr": 1.5},
        {"model.cr": 0},
        {"channel.mode": "fm"},
        {"train.epochs": 2.5},
        {"train.epochs": "many"},
        {"nope.key": 1},
        {"train.nope": 1},
        {"data.k_devices": 3},
        {"data.archive": "/does/not/exist.npz"},
        {"data.source_dir": "/tmp"},
    ],
)
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_digital_config_builds_quantizer():
    cfg = load_config(None, {"channel.mode": "digital", "channel.q_b": 4})
    assert cfg.quantizer().q_b == 4
    assert cfg.source_channel().quantizer is not None
    assert load_config(None).quantizer() is None


def test_apply_overrides_types():
    cfg = ExperimentConfig()
    apply_overrides(cfg, {"train.lam": "0", "model.shared_encoder": "false", "seed": "4"})
    assert cfg.train.lam == 0.0 and isinstance(cfg.train.lam, float)
    assert cfg.model.shared_encoder is False
    assert cfg.seed == 4


# -- CLI ---------------------------------------------------------------------


def test_missing_config_file_exit_code(tmp_path, capsys):
    assert main(["train-uda", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_dataset_exit_code(tmp_path):
    assert main(["train-uda", "--archive", str(tmp_path / "none.npz"), "--output", str(tmp_path)]) == EXIT_CONFIG


def test_bad_archive_exit_code(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"junk")
    assert main(["train-uda", "--archive", str(bad), "--output", str(tmp_path / "o")]) == EXIT_DATA


def test_corrupted_checkpoint_exit_code(tiny_config, tmp_path, capsys):
    ckpt = tmp_path / "broken.pt"
    ckpt.write_bytes(b"\x00" * 64)
    assert main(["finetune-kd", "--config", str(tiny_config), "--checkpoint", str(ckpt)]) == EXIT_CHECKPOINT
    assert "checkpoint error" in capsys.readouterr().err


def test_show_config(tiny_config, capsys):
    assert main(["show-config", "--config", str(tiny_config), "--lambda", "0"]) == 0
    shown = yaml.safe_load(capsys.readouterr().out)
    assert shown["train"]["lam"] == 0.0
    assert shown["data"]["n_per_class"] == 4


def test_digital_debug_output(capsys):
    assert main(["digital-debug", "--qb", "2", "--value", "0.9", "0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["value", "index", "bits", "symbols", "received", "rx_bits", "reconstruction"]
    assert lines[1].split() == ["0.9", "3", "11", "-0.707-0.707j", "-0.707-0.707j", "11", "1"]
    assert lines[2].split()[1:3] == ["2", "10"]


def test_pipeline_and_rerun(tiny_config, tmp_path):
    cfg = ["--config", str(tiny_config)]
    run = tmp_path / "run"
    assert main(["train-uda", *cfg, "--lambda", "0", "--name", "source"]) == 0
    assert main(["train-uda", *cfg]) == 0
    assert main(["finetune-kd", *cfg]) == 0
    for method in ("test-d", "dasein-s1", "dasein"):
        assert main(["eval", *cfg, "--method", method]) == 0
    assert main(["finetune-kd", *cfg, "--finetune-epochs", "0", "--name", "copy"]) == 0
    for sub in ("checkpoints", "metrics", "plots"):
        assert (run / sub).is_dir()
    manifest = json.loads((run / "manifest.json").read_text())
    assert [r["command"] for r in manifest["runs"]][:3] == ["train-uda", "train-uda", "finetune-kd"]
    assert manifest["runs"][0]["config"]["train"]["lam"] == 0.0
    assert "torch" in manifest["build"]

    replay = tmp_path / "replay"
    assert main(["rerun", str(run / "manifest.json"), "--output", str(replay)]) == 0
    originals = sorted((run / "metrics").glob("*.csv"))
    assert len(originals) >= 8
    for path in originals:
        assert (replay / "metrics" / path.name).read_bytes() == path.read_bytes(), path.name


def test_sweep_command(tiny_config, tmp_path):
    cfg = ["--config", str(tiny_config)]
    assert main(["sweep", *cfg, "--from", "-5", "--to", "5", "--step", "10", "--seeds", "0", "--plot"]) == 0
    csv_path = tmp_path / "run" / "metrics" / "sweep_snr.csv"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "axis,method,seed,accuracy"
    assert len(lines) == 1 + 2 * 3
    assert (tmp_path / "run" / "plots" / "sweep_snr.png").exists()
    assert main(["sweep", *cfg, "--axis", "cr"]) == EXIT_CONFIG


def test_synth_then_archive(tiny_config, tmp_path):
    out = tmp_path / "d.npz"
    assert main(["synth", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert main(["show-config", "--config", str(tiny_config), "--archive", str(out)]) == 0
    assert main(["synth", "--config", str(tiny_config), "--archive", str(out)]) == EXIT_CONFIG
