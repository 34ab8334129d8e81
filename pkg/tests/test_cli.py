import csv
import json

import numpy as np
import pytest

from lensformer import cli
from lensformer.metrics import read_scores_csv


def run(args):
    return cli.main([str(a) for a in args])


def simulate(tmp_path, name="data", n=40, extra=()):
    out = tmp_path / name
    code = run(["simulate", out, "--n", n, "--lens-fraction", 0.5, "--seed", 7, *extra])
    assert code == 0
    return out


@pytest.fixture()
def trained(tmp_path):
    data = simulate(tmp_path, "data", n=40)
    run_dir = tmp_path / "run"
    code = run(["train", run_dir, "--dataset", data / "manifest.jsonl",
                "--stages", "1e-3:2", "--seed", 1])
    assert code == 0
    return data, run_dir


# -- simulate ----------------------------------------------------------------------

def test_simulate_counts_and_summary(tmp_path, capsys):
    out = simulate(tmp_path, n=100)
    rows = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
    assert len(rows) == 100
    assert sum(r["label"] for r in rows) == 50
    text = capsys.readouterr().out
    assert "100 stamps" in text and "50 lenses" in text
    assert (out / "config.json").exists()
    assert (out / "run.log").exists()


def test_simulate_idempotent_outputs(tmp_path):
    a = simulate(tmp_path, "a", n=12)
    b = simulate(tmp_path, "b", n=12)
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    assert (a / "config.json").read_bytes() == (b / "config.json").read_bytes()
    for i in (0, 11):
        rel = f"stamps/{i:06d}.stamp"
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_simulate_single_band_mode(tmp_path):
    out = simulate(tmp_path, "single", n=6, extra=["--bands", 1])
    from lensformer.lenssim import load_dataset
    ds = load_dataset(out / "manifest.jsonl")
    assert ds.pixels.shape[1] == 1


def test_simulate_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"batchsize": 4}}))
    code = run(["simulate", tmp_path / "x", "--config", cfg, "--n", 4])
    assert code == 1
    assert "train.batchsize" in capsys.readouterr().err


def test_simulate_rejects_bad_ranges_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"simulate": {"ranges": {"not_a_knob": 2}}}))
    code = run(["simulate", tmp_path / "x", "--config", cfg, "--n", 4])
    assert code == 1
    assert "not_a_knob" in capsys.readouterr().err


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV_VAR, "99")
    out = tmp_path / "env"
    assert run(["simulate", out, "--n", 4]) == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 99
    # explicit flag beats the environment
    out2 = tmp_path / "flag"
    assert run(["simulate", out2, "--n", 4, "--seed", 5]) == 0
    assert json.loads((out2 / "config.json").read_text())["seed"] == 5


def test_seed_env_must_be_integer(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.SEED_ENV_VAR, "not-a-number")
    assert run(["simulate", tmp_path / "x", "--n", 4]) == 1
    assert cli.SEED_ENV_VAR in capsys.readouterr().err


# -- train -------------------------------------------------------------------------------

def test_train_writes_history_and_checkpoints(trained):
    _, run_dir = trained
    lines = (run_dir / "history.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,stage,lr,train_loss,val_loss,val_accuracy"
    assert len(lines) == 3  # 2 epochs
    assert (run_dir / "model.ckpt").exists()
    assert (run_dir / "stage1_epoch2.ckpt").exists()
    assert (run_dir / "config.json").exists()


def test_train_resume_runs_fine_tuning(tmp_path, trained):
    data, run_dir = trained
    resumed = tmp_path / "resumed"
    code = run(["train", resumed, "--dataset", data / "manifest.jsonl",
                "--resume", run_dir / "model.ckpt",
                "--stages", "1e-5:1", "--stage-offset", 1, "--seed", 1])
    assert code == 0
    rows = list(csv.DictReader((resumed / "history.csv").read_text().splitlines()))
    assert len(rows) == 1
    assert rows[0]["stage"] == "2"
    assert float(rows[0]["lr"]) == 1e-5


def test_train_invalid_stage_syntax(tmp_path, trained, capsys):
    data, _ = trained
    code = run(["train", tmp_path / "y", "--dataset", data / "manifest.jsonl",
                "--stages", "fast:often"])
    assert code == 1
    assert "stage syntax" in capsys.readouterr().err


def test_train_missing_dataset_is_data_error(tmp_path):
    code = run(["train", tmp_path / "z", "--dataset", tmp_path / "nope.jsonl",
                "--stages", "1e-4:1"])
    assert code == 2


# -- eval ---------------------------------------------------------------------------------

def test_eval_report_self_consistent(tmp_path, trained, capsys):
    data, run_dir = trained
    ev = tmp_path / "eval"
    code = run(["eval", ev, "--model", run_dir / "model.ckpt",
                "--dataset", data / "manifest.jsonl", "--stratify", "theta_e"])
    assert code == 0
    report = json.loads((ev / "report.json").read_text())
    samples = read_scores_csv(ev / "scores.csv")
    # accuracy recomputed from the emitted scores file, exactly
    correct = sum(1 for s in samples if (s.score >= 0.5) == (s.label == 1))
    assert report["accuracy"] == correct / len(samples)
    assert (ev / "roc.csv").exists() and (ev / "roc.svg").exists()
    assert "theta_e" in report["stratified"]
    assert len(report["stratified"]["theta_e"]) == 3
    assert sum(s["count"] for s in report["stratified"]["theta_e"]) == report["n"]
    out = capsys.readouterr().out
    assert "auroc=" in out and "theta_e" in out


def test_eval_band_mismatch_exits_2(tmp_path, trained, capsys):
    _, run_dir = trained
    single = simulate(tmp_path, "single2", n=6, extra=["--bands", 1])
    code = run(["eval", tmp_path / "ev2", "--model", run_dir / "model.ckpt",
                "--dataset", single / "manifest.jsonl"])
    assert code == 2
    assert "bands" in capsys.readouterr().err


def test_eval_custom_thresholds(tmp_path, trained):
    data, run_dir = trained
    ev = tmp_path / "ev3"
    code = run(["eval", ev, "--model", run_dir / "model.ckpt",
                "--dataset", data / "manifest.jsonl", "--thresholds", "0.25,0.75"])
    assert code == 0
    report = json.loads((ev / "report.json").read_text())
    assert [cm["threshold"] for cm in report["confusion_matrices"]] == [0.25, 0.75]


# -- report ------------------------------------------------------------------------------------

def eval_into(tmp_path, trained, name):
    data, run_dir = trained
    ev = tmp_path / name
    assert run(["eval", ev, "--model", run_dir / "model.ckpt",
                "--dataset", data / "manifest.jsonl"]) == 0
    return ev


def test_report_single_run(tmp_path, trained, capsys):
    ev = eval_into(tmp_path, trained, "r1")
    out_csv = tmp_path / "cmp.csv"
    assert run(["report", ev, "--out", out_csv]) == 0
    rows = list(csv.DictReader(out_csv.read_text().splitlines()))
    assert len(rows) == 1
    assert rows[0]["run"] == "r1"
    table = capsys.readouterr().out
    assert "accuracy" in table and "r1" in table


def test_report_sorts_and_skips_missing(tmp_path, trained, capsys):
    ev1 = eval_into(tmp_path, trained, "r1")
    ev2 = eval_into(tmp_path, trained, "r2")
    # make r2's tpr10 higher by editing its report copy
    report = json.loads((ev2 / "report.json").read_text())
    report["tpr10"] = 0.999
    (ev2 / "report.json").write_text(json.dumps(report))
    missing = tmp_path / "ghost"
    out_csv = tmp_path / "cmp2.csv"
    assert run(["report", ev1, ev2, missing, "--sort", "tpr10", "--out", out_csv]) == 0
    captured = capsys.readouterr()
    assert "ghost" in captured.err and "skipped" in captured.err
    rows = list(csv.DictReader(out_csv.read_text().splitlines()))
    assert [r["run"] for r in rows] == ["r2", "r1"]


def test_report_all_missing_is_error(tmp_path, capsys):
    assert run(["report", tmp_path / "none", "--out", tmp_path / "c.csv"]) == 2


def test_report_bad_sort_key(tmp_path, trained, capsys):
    ev = eval_into(tmp_path, trained, "r9")
    assert run(["report", ev, "--sort", "vibes", "--out", tmp_path / "c.csv"]) == 1


# -- usage ---------------------------------------------------------------------------------------

def test_unknown_subcommand_exits_1(capsys):
    assert run(["frobnicate"]) == 1


def test_missing_required_argument_exits_1(tmp_path, capsys):
    assert run(["train", tmp_path / "x"]) == 1
