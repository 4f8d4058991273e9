import json

import numpy as np
import pytest

from trclab.cli import main

CFG = {"name": "cli", "task": "regression", "syn_n": 200, "syn_d_num": 3, "syn_d_cat": 1, "width": 8,
       "bb_max_epochs": 3, "trc_max_epochs": 2, "T": 3, "tau": 0.05, "seeds": [0, 1]}


@pytest.fixture()
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(CFG))
    return p


def test_train_backbone_writes_checkpoint(cfg_path, capsys):
    assert main(["train-backbone", "--config", str(cfg_path), "--seed", "0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert (cfg_path.parent / out["checkpoint"]).exists()


def test_full_pipeline(cfg_path, capsys):
    c = str(cfg_path)
    assert main(["train-backbone", "--config", c]) == 0
    assert main(["train-trc", "--config", c]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--config", c]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert set(ev) == {"seed", "baseline", "trc"}
    assert main(["diagnose", "grad-norms", "--config", c]) == 0
    assert capsys.readouterr().out.startswith("index,norm,rank\n")


def test_sve_pipe(tmp_path, capsys):
    Z = np.random.default_rng(0).normal(size=(20, 4))
    np.savetxt(tmp_path / "z.csv", Z, delimiter=",")
    assert main(["diagnose", "sve", "--reps", str(tmp_path / "z.csv")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) == {"singular_values", "sve", "effective_rank"}
    assert rep["singular_values"] == pytest.approx(np.linalg.svd(Z, compute_uv=False).tolist())


def test_missing_config_file(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["ablate", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["ablate", "--bogus", "1"], ["diagnose"],
                                  ["report", "--seeds", "x"], ["train-trc", "--variant", "nope"]])
def test_usage_errors_exit_one(argv, cfg_path):
    assert main(argv) == 1


def test_runtime_error_exits_two(cfg_path, capsys):
    assert main(["evaluate", "--config", str(cfg_path), "--seed", "9"]) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_report_and_rerender(cfg_path, capsys):
    c = str(cfg_path)
    assert main(["report", "--config", c, "--seeds", "0", "--no-figures"]) == 0
    out = json.loads(capsys.readouterr().out)
    report = cfg_path.parent / out["files"]["json"]
    assert main(["report", "--input", str(report)]) == 0
    assert (report.parent / "metrics.png").exists()


def test_noise_study_and_oracle(cfg_path, capsys):
    c = str(cfg_path)
    assert main(["diagnose", "noise-study", "--config", c, "--ratios", "0,0.5", "--plot", "n.png"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "ratio,seed,metric" and len(lines) == 5
    assert (cfg_path.parent / "n.png").exists()
    assert main(["diagnose", "shift-oracle", "--config", c, "--epochs-heavy", "4"]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"dist_without", "dist_with"}


def test_flag_overrides_config(cfg_path, capsys):
    assert main(["ablate", "--config", str(cfg_path), "--seeds", "0", "--no-figures", "--orth-weight", "0"]) == 0
    summary = json.loads(capsys.readouterr().out)["summary"]
    assert summary["sc_only"]["median"] == summary["sc_de"]["median"]
