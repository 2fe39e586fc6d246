"""Config parsing and the CLI end-to-end (synth -> train -> eval -> count)."""

import json
from pathlib import Path

import pytest

from patchcount.cli import main
from patchcount.config import build_train_config, config_as_dict, load_config
from patchcount.errors import ConfigError

TINY_YAML = """\
arch:
  base_channels: 4
  residual_units: 2
  input_size: 64
  fc_hidden: 128
train:
  epochs: 2
  batch_size: 4
  base_lr: 0.001
  val_fraction: 0.0
  sampling: tiles
  flip_augment: false
  seed: 3
"""


# ---------------------------------------------------------------- config


def test_config_roundtrip(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_YAML)
    cfg = build_train_config(load_config(path))
    assert cfg.arch.base_channels == 4
    assert cfg.arch.input_size == 64
    assert cfg.epochs == 2
    assert cfg.sampling == "tiles"
    as_dict = config_as_dict(cfg)
    assert as_dict["arch"]["base_channels"] == 4
    assert isinstance(as_dict["patch_sizes"], list)


def test_config_overrides_win(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_YAML)
    cfg = build_train_config(load_config(path), {"epochs": 7, "seed": 11, "base_channels": 8})
    assert cfg.epochs == 7
    assert cfg.seed == 11
    assert cfg.arch.base_channels == 8


def test_config_none_overrides_ignored(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_YAML)
    cfg = build_train_config(load_config(path), {"epochs": None, "seed": None})
    assert cfg.epochs == 2 and cfg.seed == 3


def test_config_unknown_keys_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  learning_rate: 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        build_train_config(load_config(path))
    path.write_text("arch:\n  widths: [1, 2]\n")
    with pytest.raises(ConfigError, match="widths"):
        build_train_config(load_config(path))
    path.write_text("model:\n  x: 1\n")
    with pytest.raises(ConfigError, match="model"):
        load_config(path)


def test_config_invalid_values_become_config_errors(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  epochs: 0\n")
    with pytest.raises(ConfigError):
        build_train_config(load_config(path))


def test_config_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.yaml")


def test_config_tuple_coercion(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("arch:\n  branch_out: [2, 2]\ntrain:\n  patch_sizes: [128, 256]\n")
    cfg = build_train_config(load_config(path))
    assert cfg.arch.branch_out == (2, 2)
    assert cfg.patch_sizes == (128, 256)


# ---------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> train once; later commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(
        [
            "synth", "--n", "6", "--seed", "4", "--size-min", "64", "--size-max", "90",
            "--count-min", "0", "--count-max", "10", "--out", str(data),
        ]
    )
    assert rc == 0
    cfg = root / "run.yaml"
    cfg.write_text(TINY_YAML)
    run = root / "train"
    rc = main(
        [
            "train", "--config", str(cfg), "--manifest", str(data / "manifest.jsonl"),
            "--out", str(run),
        ]
    )
    assert rc == 0
    return {"data": data, "config": cfg, "run": run}


def test_cli_synth_outputs(workspace):
    data = workspace["data"]
    manifest = data / "manifest.jsonl"
    assert manifest.is_file()
    lines = [json.loads(l) for l in manifest.read_text().splitlines() if l.strip()]
    assert len(lines) == 6
    for row in lines:
        assert (data / row["image"]).is_file()


def test_cli_train_outputs(workspace):
    run = workspace["run"]
    assert (run / "checkpoint.npz").is_file()
    assert (run / "epochs.csv").is_file()
    assert (run / "curves.png").stat().st_size > 1000
    summary = json.loads((run / "summary.json").read_text())
    assert summary["epochs"] == 2
    assert summary["n_train_images"] == 6


def test_cli_eval(workspace, tmp_path, capsys):
    rc = main(
        [
            "eval",
            "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
            "--manifest", str(workspace["data"] / "manifest.jsonl"),
            "--out", str(tmp_path),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "MAE" in out and "over 6 images" in out
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["n_images"] == 6
    assert (tmp_path / "scatter.png").is_file()


def test_cli_count(workspace, tmp_path, capsys):
    image = next(workspace["data"].glob("synth_*.png"))
    rc = main(
        ["count", "--checkpoint", str(workspace["run"] / "checkpoint.npz"),
         "--out", str(tmp_path), str(image)]
    )
    assert rc == 0
    assert f"{image.stem}:" in capsys.readouterr().out
    assert (tmp_path / f"{image.stem}_summary.json").is_file()
    assert (tmp_path / f"{image.stem}_saliency.png").is_file()
    assert (tmp_path / f"{image.stem}_figure.png").is_file()


def test_cli_resume(workspace, tmp_path, capsys):
    rc = main(
        [
            "train", "--config", str(workspace["config"]),
            "--manifest", str(workspace["data"] / "manifest.jsonl"),
            "--resume", str(workspace["run"] / "checkpoint.npz"),
            "--epochs", "3", "--out", str(tmp_path),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "epoch   2" in out  # resumed past the checkpointed epochs 0-1
    assert "epoch   0" not in out


def test_cli_gradcheck(capsys):
    rc = main(["gradcheck", "--max-per-tensor", "1", "--tol", "1e-3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "overall max rel err" in out and "OK" in out


def test_cli_error_is_json_line(tmp_path, capsys):
    rc = main(
        ["eval", "--checkpoint", str(tmp_path / "missing.npz"),
         "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]
    )
    assert rc == 1
    err = capsys.readouterr().err.strip()
    payload = json.loads(err)
    assert payload["error"] == "CheckpointError"
    assert "missing.npz" in payload["message"]


def test_cli_config_error_reported(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("train:\n  nonsense: 1\n")
    rc = main(["train", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 1
    payload = json.loads(capsys.readouterr().err.strip())
    assert payload["error"] == "ConfigError"


def test_cli_default_out_uses_env(tmp_path, monkeypatch):
    from patchcount.cli import _out_dir

    monkeypatch.setenv("PATCHCOUNT_OUT", str(tmp_path / "base"))
    out = _out_dir(None, "synth")
    assert out.parent == tmp_path / "base"
    assert out.name.startswith("synth-")
    assert _out_dir("explicit/place", "synth") == Path("explicit/place")
