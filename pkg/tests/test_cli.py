import json
import subprocess
import sys

import pytest

from dust.harness.checkpoint import Checkpoint
from dust.harness.cli import main

from conftest import TINY


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--seed", 7) == 0
    out = capsys.readouterr().out
    assert out.startswith("max relative error") and "tolerance 1e-04" in out


def test_gen_train_eval_sample_sweep(tmp_path, cfg_file, capsys):
    data, ckpt, met = tmp_path / "d.dstd", tmp_path / "m.ckpt", tmp_path / "m.jsonl"
    assert run("gen-data", "--config", cfg_file, "--out", data) == 0
    assert run("train", "--config", cfg_file, "--data", data, "--out", ckpt,
               "--metrics", met, "--set", "train.steps=1") == 0
    assert Checkpoint.load(ckpt).step == 1
    assert len(met.read_text().splitlines()) == 1
    capsys.readouterr()
    assert run("eval", "--checkpoint", ckpt, "--episodes", 4, "--metrics", met) == 0
    assert "success_rate" in capsys.readouterr().out
    assert json.loads(met.read_text().splitlines()[-1])["stage"] == "eval"
    assert run("sample", "--checkpoint", ckpt, "--instruction", 2, "--position", 0.1, -0.3) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["actions"]) == 4 and out["action_updates_at"] == [1, 2, 3, 4]
    assert run("sweep", "--checkpoint", ckpt, "--n-o", "4,8", "--episodes", 2, "--mode", "both") == 0
    rows = json.loads(capsys.readouterr().out)
    assert [(r["mode"], r["N_o"]) for r in rows] == [("async", 4), ("async", 8), ("sync", 4),
                                                     ("sync", 8)]


def test_export_json(tmp_path, cfg_file):
    data, out = tmp_path / "d.dstd", tmp_path / "d.json"
    run("gen-data", "--config", cfg_file, "--out", data, "--episodes", 2)
    assert run("dataset", "export-json", "--data", data, "--out", out) == 0
    assert len(json.loads(out.read_text())["episodes"]) == 2


def test_validation_errors_exit_1(tmp_path, cfg_file, capsys):
    assert run("train", "--config", tmp_path / "missing.json", "--out", tmp_path / "x") == 1
    assert "missing.json" in capsys.readouterr().err
    assert run("train", "--config", cfg_file, "--set", "train.nope=1", "--out", tmp_path / "x") == 1
    assert run("frobnicate") == 1
    assert run() == 1
    assert run("eval", "--checkpoint", tmp_path / "none.ckpt") == 1


def test_checkpoint_model_cannot_be_overridden(tmp_path, cfg_file):
    ckpt = tmp_path / "m.ckpt"
    run("train", "--config", cfg_file, "--out", ckpt, "--set", "train.steps=1")
    assert run("eval", "--checkpoint", ckpt, "--set", "model.n_dit=0") == 1


def test_divergence_exits_2_and_keeps_last_good(tmp_path, cfg_file, capsys):
    ckpt = tmp_path / "m.ckpt"
    code = run("train", "--config", cfg_file, "--out", ckpt, "--set", "train.lr=1e6",
               "--set", "train.warmup_frac=0", "--set", "train.grad_clip_norm=0",
               "--set", "train.steps=200")
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err
    assert Checkpoint.load(str(ckpt) + ".last_good").step < 200


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "dust", "--help"], capture_output=True, text=True)
    assert p.returncode == 0 and "gradcheck" in p.stdout
