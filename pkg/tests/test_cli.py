import csv
import json
import subprocess
import sys

import pytest

from evplan.cli import ANCHOR_COLUMNS, EVAL_COLUMNS, EVIDENCE_COLUMNS, PRIOR_COLUMNS, main
from evplan.experiments import SWEEP_COLUMNS
from evplan.metrics import REPORT_COLUMNS
from evplan.train import LOSS_LOG_COLUMNS, load_checkpoint


def header(path):
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh)))


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n-scenes", "6", "--seed", "3", "--out", str(d / "id.jsonl")]) == 0
    assert main(["gen-data", "--n-scenes", "6", "--seed", "4", "--side", "left", "--density", "8",
                 "--out", str(d / "ood.jsonl")]) == 0
    assert main(["train", "--data", str(d / "id.jsonl"), "--val-data", str(d / "id.jsonl"), "--epochs", "2",
                 "--d", "8", "--batch-size", "3", "--out", str(d / "model.npz"), "--log", str(d / "loss.csv")]) == 0
    return d


def test_gen_and_train_outputs(workdir):
    assert len((workdir / "id.jsonl").read_text().splitlines()) == 7  # header + scenes
    params, meta = load_checkpoint(workdir / "model.npz")
    assert params.cfg.d == 8 and meta["n_train"] == 6
    assert header(workdir / "loss.csv") == LOSS_LOG_COLUMNS
    assert len(rows(workdir / "loss.csv")) == 2


@pytest.mark.parametrize("mode", ["rulefuser", "il", "rh", "mix"])
def test_eval_modes(workdir, mode, capsys):
    report = workdir / f"eval_{mode}.csv"
    args = ["eval", "--data", str(workdir / "id.jsonl"), "--mode", mode, "--report", str(report), "--n-prior", "10"]
    if mode != "rh":
        args += ["--checkpoint", str(workdir / "model.npz")]
    assert main(args) == 0
    assert header(report) == EVAL_COLUMNS + REPORT_COLUMNS
    (row,) = rows(report)
    assert row["mode"] == mode and int(row["n_scenes"]) == 6
    assert "safety_score" in capsys.readouterr().out


def test_eval_requires_checkpoint(workdir):
    with pytest.raises(SystemExit):
        main(["eval", "--data", str(workdir / "id.jsonl"), "--mode", "il"])


def test_eval_rule_config_and_prior_dump(workdir):
    cfg = workdir / "rules.cfg"
    cfg.write_text("d_max = 2.5\ncollision_margin = 0.5\n")
    dump = workdir / "prior.csv"
    assert main(["eval", "--data", str(workdir / "id.jsonl"), "--planner", "rh", "--rule-config", str(cfg),
                 "--prior-dump", str(dump), "--n-prior", "40"]) == 0
    assert header(dump) == ("scene_id",) + PRIOR_COLUMNS
    got = rows(dump)
    assert len(got) == 6 * 40
    first = [r for r in got if r["scene_id"] == got[0]["scene_id"]]
    assert sum(float(r["p"]) for r in first) == pytest.approx(1.0, abs=1e-8)


def test_plan_outputs(workdir, capsys):
    out, traj, anchors, svg = (workdir / n for n in ("plan.csv", "traj.csv", "anchors.csv", "plan.svg"))
    assert main(["plan", "--data", str(workdir / "id.jsonl"), "--checkpoint", str(workdir / "model.npz"),
                 "--scene-id", "3-000002", "--n-prior", "5", "--out", str(out), "--trajectory-out", str(traj),
                 "--anchors-csv", str(anchors), "--svg", str(svg)]) == 0
    assert header(out) == ANCHOR_COLUMNS
    table = rows(out)
    assert len(table) == 40
    assert sum(float(r["q_bar"]) for r in table) == pytest.approx(1.0, abs=1e-8)
    for r in table:
        assert float(r["beta_post"]) == pytest.approx(float(r["beta_prior"]) + float(r["evidence"]), rel=1e-8)
    assert len(rows(traj)) == 6
    assert len(rows(anchors)) == 40 * 6
    assert "<svg" in svg.read_text()
    assert "3-000002" in capsys.readouterr().out


def test_plan_unknown_scene(workdir, tmp_path):
    with pytest.raises(SystemExit):
        main(["plan", "--data", str(workdir / "id.jsonl"), "--mode", "rh", "--scene-id", "nope",
              "--out", str(tmp_path / "x.csv")])


def test_sweep_and_evidence(workdir, capsys):
    out, svg, ev = workdir / "sweep.csv", workdir / "sweep.svg", workdir / "evidence.csv"
    assert main(["sweep", "--data-id", str(workdir / "id.jsonl"), "--data-ood", str(workdir / "ood.jsonl"),
                 "--checkpoint", str(workdir / "model.npz"), "--grid", "0,10,1e9", "--lambda-grid", "0.5",
                 "--out", str(out), "--svg", str(svg)]) == 0
    assert header(out) == SWEEP_COLUMNS
    assert len(rows(out)) == 3 * (2 + 3 + 1)
    assert "<svg" in svg.read_text()
    capsys.readouterr()
    assert main(["evidence", "--checkpoint", str(workdir / "model.npz"), "--data-id", str(workdir / "id.jsonl"),
                 "--data-ood", str(workdir / "ood.jsonl"), "--out", str(ev)]) == 0
    assert header(ev) == EVIDENCE_COLUMNS
    summary = json.loads(capsys.readouterr().out)
    assert summary["ratio"] == pytest.approx(summary["median_id"] / summary["median_ood"])


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "evplan.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "eval", "plan", "sweep", "evidence"):
        assert cmd in res.stdout
