"""Command-line entry points: exit codes, output, and the train/sample/eval loop."""

import json
import os

import pytest

from motionflow.cli import main
from motionflow.harness import ExperimentConfig, serialize_config


def tiny_ini(tmp_path, **kw):
    base = dict(
        seed=3, stage1_steps=30, pool_sequences=24, pool_len=4, stage1_hidden=24,
        m=16, eye_dim=4, lip_dim=4, h=24, heads=2, layers=1, radius=2, time_dim=8,
        window=8, context=2, flow_steps=20, flow_batch=8,
        train_sequences=6, train_frames=24, checkpoint_every=10,
        solver_steps=8, eval_sequences=2, eval_frames=16,
    )
    base.update(kw)
    path = tmp_path / "config.ini"
    path.write_text(serialize_config(ExperimentConfig(**base)))
    return str(path)


def test_train_sample_eval_loop(tmp_path, capsys):
    ini = tiny_ini(tmp_path)
    run_dir = str(tmp_path / "run")
    assert main(["train", "--config", ini, "--out", run_dir]) == 0
    out = capsys.readouterr().out
    assert "run complete" in out and run_dir in out

    sample_dir = str(tmp_path / "gen")
    assert main(["sample", run_dir, "--out", sample_dir, "--count", "2"]) == 0
    assert os.path.exists(os.path.join(sample_dir, "seq-001.csv"))

    assert main(["eval", sample_dir, os.path.join(run_dir, "reference")]) == 0
    out = capsys.readouterr().out
    assert "frechet_latent =" in out and "sync =" in out
    assert os.path.exists(os.path.join(sample_dir, "metrics.json"))


def test_train_flag_overrides(tmp_path, capsys):
    ini = tiny_ini(tmp_path)
    run_dir = str(tmp_path / "run")
    assert main(["train", "--config", ini, "--seed", "11",
                 "--steps", "5", "--out", run_dir]) == 0
    capsys.readouterr()
    text = open(os.path.join(run_dir, "config.ini")).read()
    assert "seed = 11" in text and "steps = 5" in text


def test_unknown_preset_fails_cleanly(capsys):
    assert main(["train", "--preset", "nope"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "unknown preset 'nope'" in err


def test_sample_without_run_dir_fails_cleanly(tmp_path, capsys):
    assert main(["sample", str(tmp_path / "missing")]) == 1
    assert "error:" in capsys.readouterr().err


def test_eval_without_config_fails_cleanly(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert main(["eval", str(a), str(b)]) == 1
    assert "config.ini" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "field-net" in out and "pass" in out and "fail" not in out


def test_probe_command(tmp_path, capsys):
    svg = str(tmp_path / "order.svg")
    assert main(["probe", "--out", svg]) == 0
    out = capsys.readouterr().out
    line = next(ln for ln in out.splitlines()
                if ln.startswith("empirical convergence order:"))
    order = float(line.split(":", 1)[1])
    assert 0.8 <= order <= 1.2
    assert os.path.exists(svg)


def test_ablate_command(tmp_path, capsys):
    ini = tiny_ini(tmp_path, flow_steps=10, eval_sequences=1, eval_frames=12)
    out_dir = str(tmp_path / "grid")
    assert main(["ablate", "--config", ini, "--cells", "fcme-flow",
                 "--seeds", "3", "--workers", "1", "--out", out_dir]) == 0
    table = capsys.readouterr().out
    assert "fcme-flow" in table and "frechet_latent" in table
    payload = json.loads(open(os.path.join(out_dir, "ablation.json")).read())
    assert payload["rows"][0]["cell"] == "fcme-flow"


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("train", "sample", "eval", "ablate", "gradcheck", "probe"):
        assert name in out
