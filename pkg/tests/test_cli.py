import csv
import os

import numpy as np
import pytest

from densepipe.cli import main
from densepipe.checkpoint import load_checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-synth")
    assert run("synth", "--n", 60, "--seed", 7, "--architecture", "toy", "--out-dir", out) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-train")
    code = run("train", "--manifest", synth_dir / "manifest.csv", "--architecture", "toy",
               "--head", "16", "--epochs", 2, "--learning-rate", 1e-3, "--seed", 1,
               "--threads", 1, "--out-dir", out)
    assert code == 0
    return out


def test_synth_bookkeeping(synth_dir):
    assert len(list(synth_dir.glob("*.pgm"))) == 60
    rows = list(csv.reader(open(synth_dir / "manifest.csv")))
    assert len(rows) == 61


def test_train_outputs(trained):
    for name in ("model.ckpt", "history.csv", "metrics.csv", "confusion.txt", "report.txt",
                 "curves.png", "confusion.png", "train.csv", "val.csv", "test.csv"):
        assert (trained / name).exists(), name
    ckpt = load_checkpoint(trained / "model.ckpt")
    assert ckpt.config["classes"] == ["female", "male"]
    assert len(list(csv.reader(open(trained / "history.csv")))) == 3


def test_eval_reproduces_train_metrics(trained, tmp_path):
    code = run("eval", "--checkpoint", trained / "model.ckpt", "--manifest", trained / "test.csv",
               "--out-dir", tmp_path)
    assert code == 0
    assert (tmp_path / "metrics.csv").read_text() == (trained / "metrics.csv").read_text()


def test_predict_explain_bench(trained, synth_dir, tmp_path, capsys):
    images = sorted(synth_dir.glob("*.pgm"))[:3]
    assert run("predict", "--checkpoint", trained / "model.ckpt", *images) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "path,class,p_female,p_male" and len(lines) == 4
    probs = np.array([[float(v) for v in ln.split(",")[2:]] for ln in lines[1:]])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=2e-6)
    assert run("explain", "--checkpoint", trained / "model.ckpt", "--out-dir", tmp_path,
               *images[:2]) == 0
    assert len(list(tmp_path.glob("*_gradcam.png"))) == 2
    assert run("bench", "--checkpoint", trained / "model.ckpt", "--manifest",
               trained / "test.csv", "--runs", 2, "--warmup", 0, "--out-dir", tmp_path) == 0
    assert (tmp_path / "bench.csv").read_text().startswith("mean_ms,std_ms,min_ms,max_ms,runs\n")


def test_transfer_with_frozen_backbone(trained, synth_dir, tmp_path):
    code = run("train", "--manifest", synth_dir / "manifest.csv", "--base-checkpoint",
               trained / "model.ckpt", "--freeze", "backbone", "--head", "8", "--epochs", 1,
               "--out-dir", tmp_path)
    assert code == 0
    base, new = load_checkpoint(trained / "model.ckpt"), load_checkpoint(tmp_path / "model.ckpt")
    assert np.array_equal(base.tensors["block1.layer1.conv1.weight"],
                          new.tensors["block1.layer1.conv1.weight"])
    assert new.tensors["head.dense1.weight"].shape == (62, 8)


def test_crossval_plan_only(synth_dir, capsys):
    assert run("crossval", "--manifest", synth_dir / "manifest.csv", "--k", 5, "--plan-only") == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out == ["fold %d: train 48 / validation 12" % i for i in range(5)]


def test_crossval_runs(synth_dir, tmp_path):
    code = run("crossval", "--manifest", synth_dir / "manifest.csv", "--folds", 2,
               "--architecture", "toy", "--head", "8", "--epochs", 1, "--out-dir", tmp_path)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "folds.csv")))
    assert [r[0] for r in rows] == ["fold", "0", "1", "mean", "std"]


def test_exit_codes(tmp_path, synth_dir, capsys):
    assert run("train") == 2
    assert "--manifest" in capsys.readouterr().err
    assert run("bogus") == 2
    assert run("train", "--learning-rate", "abc", "--manifest", "x.csv") == 2
    assert run("train", "--config", tmp_path / "none.cfg", "--manifest", "x.csv") == 2
    assert run("train", "--manifest", tmp_path / "missing.csv") == 1
    assert run("eval", "--checkpoint", synth_dir / "manifest.csv",
               "--manifest", synth_dir / "manifest.csv") == 1
    assert run("train", "--manifest", synth_dir / "manifest.csv", "--architecture", "toy",
               "--resolution", 31, "--out-dir", tmp_path) == 2
    assert run("--version") == 0


def test_config_file_and_flags(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"manifest = {synth_dir / 'manifest.csv'}\nfolds = 3\n")
    assert run("crossval", "--config", cfg, "--plan-only") == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3
    assert run("crossval", "--config", cfg, "--folds", 4, "--plan-only") == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 4
