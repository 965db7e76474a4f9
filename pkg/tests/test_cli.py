import json
import subprocess
import sys

import pytest

from mls import __version__
from mls.cli import main

from _helpers import tiny_config


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(tiny_config().to_dict()))
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "run"), "--deterministic"]) == 0
    return root


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_module_entrypoint():
    out = subprocess.run([sys.executable, "-m", "mls.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


@pytest.mark.parametrize("argv", [
    ["pretrain", "--config", "/nonexistent/cfg.json"],
    ["pretrain", "--bogus"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"batch_size": ')
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    bad.write_text('{"batch_size": -3}')
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1


def test_run_layout(run):
    rd = run / "run"
    assert {p.name for p in rd.iterdir()} >= {"config.json", "manifest.json", "metrics.jsonl",
                                              "checkpoints", "dumps"}
    man = json.loads((rd / "manifest.json").read_text())
    assert man["status"] == "completed" and man["final_step"] == 8 and man["deterministic"]
    assert man["config_hash"] == tiny_config().hash()
    assert (rd / "checkpoints" / "final").is_dir()


def test_resume_and_mismatch(run, tmp_path):
    ck = run / "run" / "checkpoints" / "final"
    cfg = tiny_config(epochs=3)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    # epochs differ, so the config hash differs: refuse
    assert main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r"),
                 "--resume", str(ck)]) == 2
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["status"] == "checkpoint_mismatch"
    assert main(["pretrain", "--config", str(run / "cfg.json"), "--out", str(tmp_path / "r2"),
                 "--resume", str(ck)]) == 0


def test_eval(run, capsys, tmp_path):
    ck = str(run / "run" / "checkpoints" / "final")
    assert main(["eval", "retrieval", "--ckpt", ck, "--k", "4", "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep == json.loads((tmp_path / "r.json").read_text()) and rep["k"] == 4
    assert main(["eval", "probe", "--ckpt", ck]) == 0
    assert "mAP" in json.loads(capsys.readouterr().out)
    assert main(["eval", "retrieval", "--ckpt", ck, "--k", "64"]) == 1


def test_dumps(run, capsys):
    ck = str(run / "run" / "checkpoints" / "final")
    dumps = run / "run" / "dumps"
    assert main(["dump", "histograms", "--ckpt", ck]) == 0
    assert (dumps / "histograms.json").exists()
    assert main(["dump", "neighbors", "--ckpt", ck, "--queries", "2", "--k", "3"]) == 0
    assert json.loads((dumps / "neighbors.json").read_text())["k"] == 3
    assert main(["dump-bank", "--ckpt", ck, "--vectors"]) == 0
    bank = json.loads((dumps / "bank.json").read_text())
    assert bank["filled"] == bank["capacity"] == 32 and len(bank["Qz"]) == 32
    assert len(bank["slots"]) == 32 and {"source_index", "crop_box", "epoch"} <= set(bank["slots"][0])


def test_bad_checkpoint(tmp_path):
    assert main(["eval", "retrieval", "--ckpt", str(tmp_path)]) == 2


def test_ablate(run, capsys, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(run / "cfg.json"), "--axes", "lambda=0,0.5",
                 "--out", str(out)]) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert len(table["rows"]) == 2
    assert main(["ablate", "--config", str(run / "cfg.json"), "--axes", "tau=1"]) == 1
