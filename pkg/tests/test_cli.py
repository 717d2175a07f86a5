import csv
import json
import subprocess
import sys

import pytest

from gvida import __version__
from gvida.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_report, main, version_hash
from gvida.config import load_config
from gvida.data import load_dataset

TINY = ["--set", "data.geometry=blobs", "--set", "data.classes=3", "--set", "data.n_per_class=8",
        "--set", "train.batch_size=8", "--set", "train.warmup_epochs=0", "--epochs", "2"]


def _train(tmp_path, *extra):
    return main(["train", "--runs-dir", str(tmp_path), *TINY, *extra])


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "missing.json")])
    assert code == EXIT_CONFIG
    assert "missing.json" in capsys.readouterr().err


def test_bad_override_names_path(capsys):
    assert main(["train", "--set", "train.nope=1"]) == EXIT_CONFIG
    assert "train.nope" in capsys.readouterr().err
    assert main(["train", "--set", "novalue"]) == EXIT_CONFIG
    assert main(["train", "--variant", "dann"]) == EXIT_CONFIG


def test_empty_report_exits_2(tmp_path, capsys):
    assert main(["report", "--runs-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "no metric logs found" in capsys.readouterr().err
    assert main(["plot", "--runs-dir", str(tmp_path)]) == EXIT_CONFIG


def test_runtime_error_exits_3(tmp_path, capsys):
    code = _train(tmp_path, "--variant", "vida(0.0001)", "--set", "train.learning_rate=1e8",
                  "--set", "train.grad_clip=null")
    assert code == EXIT_RUNTIME
    assert "non-finite" in capsys.readouterr().err


def test_bad_checkpoint_exits_2(tmp_path, capsys):
    ckpt = tmp_path / "bad.bin"
    ckpt.write_bytes(b"\x00\x01")
    assert main(["eval", "--checkpoint", str(ckpt)]) == EXIT_CONFIG
    assert "truncated" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bin")]) == EXIT_CONFIG


def test_gen_data_and_eval(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), *TINY[:6]]) == EXIT_OK
    src = load_dataset(tmp_path / "d" / "source.csv")
    tgt = load_dataset(tmp_path / "d" / "target.csv")
    assert src.n == tgt.n == 24 and src.class_count == 3
    assert _train(tmp_path / "runs", "--variant", "cdan") == EXIT_OK
    ckpt = tmp_path / "runs" / "synthetic" / "cdan" / "seed0" / "checkpoint.bin"
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "d" / "target.csv")]) == EXIT_OK
    acc = float(capsys.readouterr().out.strip().split("=")[1])
    assert 0.0 <= acc <= 1.0


def test_run_dir_is_self_describing(tmp_path):
    assert _train(tmp_path, "--variant", "npa+0.1", "--seeds", "4", "--run-name", "exp") == EXIT_OK
    run = tmp_path / "exp" / "npa+0.1" / "seed4"
    assert {p.name for p in run.iterdir()} >= {"config.json", "run.json", "metrics.csv", "checkpoint.bin"}
    cfg = load_config(run / "config.json")
    assert cfg.variant.name == "npa+0.1" and cfg.train.seed == 4 and cfg.train.epochs == 2
    meta = json.loads((run / "run.json").read_text())
    assert meta["seeds"] == [4] and meta["version"] == __version__
    assert meta["version_hash"] == version_hash()


def test_version_hash_matches_git():
    data = __version__.encode()
    try:
        out = subprocess.run(["git", "hash-object", "--stdin"], input=data, capture_output=True, check=True)
    except (OSError, subprocess.CalledProcessError):
        pytest.skip("git not available")
    assert out.stdout.decode().strip() == version_hash()


def test_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"train": {"epochs": 5}, "output": {"runs_dir": str(tmp_path / "fromfile")}}))
    monkeypatch.setenv("GVIDA_RUNS_DIR", str(tmp_path / "fromenv"))
    assert main(["train", "--config", str(cfg_file), *TINY, "--variant", "source_only"]) == EXIT_OK
    run = tmp_path / "fromfile" / "synthetic" / "source_only" / "seed0"
    # the --epochs flag in TINY beats the file's 5
    assert load_config(run / "config.json").train.epochs == 2
    assert not (tmp_path / "fromenv").exists()


def test_env_runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("GVIDA_RUNS_DIR", str(tmp_path / "env"))
    assert main(["train", *TINY, "--variant", "source_only", "--epochs", "1"]) == EXIT_OK
    assert (tmp_path / "env" / "synthetic" / "source_only" / "seed0" / "metrics.csv").is_file()


def test_sweep_counts_and_report(tmp_path, capsys):
    code = main(["sweep", "--runs-dir", str(tmp_path), *TINY, "--epochs", "1",
                 "--variants", "source_only,cdan,gvida", "--seeds", "0,1,2,3,4"])
    assert code == EXIT_OK
    sweep = tmp_path / "synthetic"
    assert len(list(sweep.rglob("metrics.csv"))) == 15
    assert len(list(sweep.rglob("report.csv"))) == 1
    manifest = json.loads((sweep / "manifest.json").read_text())
    assert manifest["variants"] == ["source_only", "cdan", "gvida"] and len(manifest["runs"]) == 15
    with open(sweep / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 15
    for v in ("source_only", "cdan", "gvida"):
        accs = [float(r["accuracy"]) for r in rows if r["variant"] == v]
        mean = sum(accs) / len(accs)
        std = (sum((a - mean) ** 2 for a in accs) / len(accs)) ** 0.5
        assert all(float(r["mean"]) == pytest.approx(mean, abs=1e-9) for r in rows if r["variant"] == v)
        assert all(float(r["std"]) == pytest.approx(std, abs=1e-9) for r in rows if r["variant"] == v)


def test_report_is_pure(tmp_path, capsys):
    for v in ("source_only", "cdan"):
        assert _train(tmp_path, "--variant", v, "--seeds", "0,1", "--epochs", "1") == EXIT_OK
    out = tmp_path / "rep"
    assert main(["report", "--runs-dir", str(tmp_path), "--out", str(out)]) == EXIT_OK
    first = (out / "report.csv").read_bytes()
    assert main(["report", "--runs-dir", str(tmp_path), "--out", str(out)]) == EXIT_OK
    assert (out / "report.csv").read_bytes() == first
    assert build_report(tmp_path) == build_report(tmp_path)
    assert "source_only" in capsys.readouterr().out


def test_plot_writes_pngs(tmp_path):
    assert _train(tmp_path / "runs", "--variant", "gvida", "--epochs", "2") == EXIT_OK
    out = tmp_path / "figs"
    assert main(["plot", "--runs-dir", str(tmp_path / "runs"), "--out", str(out)]) == EXIT_OK
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert pngs == ["synthetic_gvida_seed0_accuracy.png", "synthetic_gvida_seed0_loss.png"]
    assert all((out / p).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in pngs)


def test_train_twice_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert _train(tmp_path / d, "--variant", "gvida") == EXIT_OK
    rel = "synthetic/gvida/seed0/metrics.csv"
    assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "gvida", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
