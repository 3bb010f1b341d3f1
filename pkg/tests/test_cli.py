import csv
import json

import pytest

from src.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dispatch
from src.dataset import dataset_hash

GEN = ["--pos", "6", "--neg", "6", "--dim", "16", "--candidates", "10", "--seed", "1"]


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "data"
    assert dispatch(["--no-registry", "gen", str(out)] + GEN) == EXIT_OK
    return out


def train(data_dir, out, *extra):
    return dispatch(["--no-registry", "train", str(data_dir), "--out", str(out), "--k", "3", "--iters", "2"] + list(extra))


def test_gen_is_deterministic(data_dir, tmp_path):
    other = tmp_path / "again"
    assert dispatch(["--no-registry", "gen", str(other)] + GEN) == EXIT_OK
    assert dataset_hash(data_dir / "dataset.json") == dataset_hash(other / "dataset.json")
    manifest = json.loads((data_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["dataset_hash"] == dataset_hash(data_dir / "dataset.json")
    assert (data_dir / "truth.json").exists()


def test_usage_errors(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert dispatch([]) == EXIT_USAGE
    assert dispatch(["train", "x", "--out", "y", "--bogus"]) == EXIT_USAGE
    assert dispatch(["--version"]) == EXIT_OK
    assert dispatch(["--no-registry", "version"]) == EXIT_OK


def test_data_errors(data_dir, tmp_path):
    assert dispatch(["--no-registry", "train", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    # a dataset directory is not a run directory
    assert dispatch(["--no-registry", "eval", str(data_dir)]) == EXIT_DATA
    assert dispatch(["--no-registry", "-c", str(tmp_path / "nope.json"), "version"]) == EXIT_DATA


def test_train_writes_a_run_directory(data_dir, tmp_path):
    run = tmp_path / "run"
    assert train(data_dir, run) == EXIT_OK
    traj = json.loads((run / "trajectory.json").read_text())
    assert len(traj["iterations"]) == 2
    with open(run / "corloc.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["iteration"] for r in rows] == ["0", "1", "2"]
    audit = json.loads((run / "audit.json").read_text())
    assert audit["fold_violations"] == 0 and audit["ground_truth_reads"] == []
    for name in ("selections.json", "model.npz", "reloc_scores.npz", "run_manifest.json"):
        assert (run / name).exists()


def test_thread_count_does_not_change_results(data_dir, tmp_path):
    assert train(data_dir, tmp_path / "one") == EXIT_OK
    assert dispatch(["--no-registry", "--threads", "3", "train", str(data_dir), "--out", str(tmp_path / "three"),
                     "--k", "3", "--iters", "2"]) == EXIT_OK
    assert (tmp_path / "one" / "corloc.csv").read_bytes() == (tmp_path / "three" / "corloc.csv").read_bytes()
    assert (tmp_path / "one" / "selections.json").read_bytes() == (tmp_path / "three" / "selections.json").read_bytes()


def test_refine_then_eval(data_dir, tmp_path):
    run = tmp_path / "run"
    assert train(data_dir, run) == EXIT_OK
    assert dispatch(["--no-registry", "eval", str(run)]) == EXIT_OK
    report = json.loads((run / "eval_report.json").read_text())
    assert report["error_mode_freqs"]["CorrectLoc"] == pytest.approx(report["corloc"])
    assert report["refined_corloc"] is None
    assert len(report["corloc_trajectory"]) == 2
    assert 0.0 <= report["ap"] <= 1.0

    assert dispatch(["--no-registry", "refine", str(run), "--top-n", "3"]) == EXIT_OK
    assert dispatch(["--no-registry", "eval", str(run), "--protocol", "cont"]) == EXIT_OK
    report = json.loads((run / "eval_report.json").read_text())
    assert report["protocol"] == "cont"
    assert 0.0 <= report["refined_corloc"] <= 1.0
    assert (run / "pr_curve.csv").read_text().startswith("rank,image_id,confidence,precision,recall\n")


def test_standard_mode_is_not_held_to_fold_exclusion(data_dir, tmp_path):
    run = tmp_path / "std"
    assert train(data_dir, run, "--mode", "standard") == EXIT_OK
    audit = json.loads((run / "audit.json").read_text())
    assert audit["fold_exclusion"] is False
    assert audit["fold_violations"] == 0 and audit["ground_truth_reads"] == []
    assert len(audit["folds"]) == 2
    assert len(json.loads((run / "trajectory.json").read_text())["iterations"]) == 2


def test_modes(data_dir, tmp_path):
    assert train(data_dir, tmp_path / "std", "--mode", "standard") == EXIT_OK
    assert train(data_dir, tmp_path / "mixed", "--mode", "mixed", "--sup-fraction", "0.5") == EXIT_OK
    audit = json.loads((tmp_path / "mixed" / "audit.json").read_text())
    assert len(audit["supervised"]) == 3
    assert train(data_dir, tmp_path / "sup", "--mode", "supervised") == EXIT_OK


def test_registry_report(data_dir, tmp_path):
    reg = str(tmp_path / "reg.db")
    run = tmp_path / "run"
    assert dispatch(["-r", reg, "train", str(data_dir), "--out", str(run), "--k", "3", "--iters", "2"]) == EXIT_OK
    assert dispatch(["-r", reg, "eval", str(run)]) == EXIT_OK
    assert dispatch(["-r", reg, "report", "--out", str(tmp_path / "report.csv")]) == EXIT_OK
    with open(tmp_path / "report.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert {r["command"] for r in rows} == {"train", "eval"}
    assert [r["value"] for r in rows if r["command"] == "eval" and r["name"] == "corloc"]
    assert dispatch(["--no-registry", "report", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE


def read_report(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_report_filters_and_reset(data_dir, tmp_path):
    reg = str(tmp_path / "reg.db")
    run = tmp_path / "run"
    assert dispatch(["-r", reg, "train", str(data_dir), "--out", str(run), "--k", "3", "--iters", "2"]) == EXIT_OK
    assert dispatch(["-r", reg, "eval", str(run)]) == EXIT_OK

    evals = tmp_path / "evals.csv"
    assert dispatch(["-r", reg, "report", "--out", str(evals), "--command", "eval"]) == EXIT_OK
    assert {r["command"] for r in read_report(evals)} == {"eval"}
    first = tmp_path / "first.csv"
    assert dispatch(["-r", reg, "report", "--out", str(first), "--run", "1"]) == EXIT_OK
    assert {(r["run_id"], r["command"]) for r in read_report(first)} == {("1", "train")}
    assert dispatch(["-r", reg, "report", "--out", str(tmp_path / "none.csv"), "--run", "99"]) == EXIT_DATA

    assert dispatch(["-r", reg, "report", "--out", str(tmp_path / "all.csv"), "--reset"]) == EXIT_OK
    assert len(read_report(tmp_path / "all.csv")) > 0
    after = tmp_path / "after.csv"
    assert dispatch(["-r", reg, "report", "--out", str(after)]) == EXIT_OK
    assert read_report(after) == []


def test_diagnostics(data_dir, tmp_path):
    out = tmp_path / "dots.csv"
    assert dispatch(["--no-registry", "diag", "dot-hist", str(data_dir), "--sample", "20", "--bins", "8", "--out", str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 9
    run = tmp_path / "run"
    assert train(data_dir, run) == EXIT_OK
    assert dispatch(["--no-registry", "diag", "score-hist", str(run), "--bins", "5"]) == EXIT_OK
    assert (run / "score_hist.csv").exists()
    sweep = tmp_path / "c.csv"
    assert dispatch(["--no-registry", "diag", "c-sweep", str(data_dir), "--cs", "0.1,10", "--iters", "1", "--out", str(sweep)]) == EXIT_OK
    assert len(sweep.read_text().splitlines()) == 3
    assert dispatch(["--no-registry", "diag", "k-sweep", str(data_dir), "--ks", "2,3", "--iters", "1"]) == EXIT_OK
    assert dispatch(["--no-registry", "diag", "c-sweep", str(data_dir), "--cs", "a,b"]) == EXIT_USAGE
