import csv
import json
import logging

import numpy as np
import pytest

from sbparcel.cli import main
from sbparcel.prediction import CPMModel


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    assert main(["simulate", "cohort", "--out", str(out), "--n", "40", "--p", "24",
                 "--k-true", "6", "--seed", "3"]) == 0
    return str(out / "manifest.json")


FAST = ["--restarts", "2"]


def _read(path):
    return json.loads(path.read_text())


def _labels(path):
    with open(path) as fh:
        return [int(r["label"]) for r in csv.DictReader(fh)]


def test_fit_happy_path_and_determinism(manifest, tmp_path):
    for run in ("a", "b"):
        assert main(["fit", "--manifest", manifest, "--out", str(tmp_path / run), "--k", "6",
                     "--lambda", "0"] + FAST) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert len(set(_labels(a / "parcellation.csv"))) == 6
    assert (a / "parcellation.csv").read_bytes() == (b / "parcellation.csv").read_bytes()
    res = _read(a / "fit_result.json")
    assert res["config"]["K"] == 6 and res["converged"]
    CPMModel.from_dict(_read(a / "cpm_model.json"))
    cfg = _read(a / "config.json")
    assert cfg["k"] == 6 and cfg["lam"] == 0.0 and cfg["seed"] == 0


def test_fit_k_too_large(manifest, tmp_path):
    assert main(["fit", "--manifest", manifest, "--out", str(tmp_path), "--k", "25"]) == 1
    err = _read(tmp_path / "error.json")
    assert err["error"] == "KOutOfRange" and err["exit_code"] == 1


def test_usage_errors_are_validation(tmp_path):
    assert main(["fit", "--out", str(tmp_path), "--k", "3"]) == 1
    assert main(["fit", "--out", str(tmp_path), "--nonsense"]) == 1
    assert main(["tune", "--out", str(tmp_path), "--manifest", "m.json", "--k", "3",
                 "--lambda-grid", "0,x"]) == 1


def test_missing_manifest_is_validation_error(tmp_path):
    assert main(["fit", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path), "--k", "3"]) == 1
    assert _read(tmp_path / "error.json")["error"] == "ParseError"


def test_internal_failure_exits_two(tmp_path, monkeypatch):
    from sbparcel import cli

    def boom(args, out):
        raise RuntimeError("solver crashed")

    monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
    assert main(["simulate", "toy", "--out", str(tmp_path)]) == 2
    assert _read(tmp_path / "error.json")["kind"] == "runtime"


def test_config_replay_is_byte_identical(manifest, tmp_path):
    assert main(["fit", "--manifest", manifest, "--out", str(tmp_path / "a"), "--k", "4",
                 "--lambda", "0.5", "--seed", "7"] + FAST) == 0
    assert main(["fit", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")]) == 0
    for name in ("parcellation.csv", "fit_result.json", "cpm_model.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_tune_single_value_and_replay(manifest, tmp_path):
    args = ["tune", "--manifest", manifest, "--k", "4", "--lambda-grid", "0.5",
            "--folds-outer", "3", "--folds-inner", "2"] + FAST
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    rep = _read(tmp_path / "a" / "cv_report.json")
    assert rep["chosen_lambda"] == 0.5 and len(rep["outer_fold_test_r2"]) == 3
    assert main(["tune", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b"),
                 "--folds-file", str(tmp_path / "a" / "folds.json")]) == 0
    assert _read(tmp_path / "b" / "cv_report.json")["outer_fold_test_r2"] == rep["outer_fold_test_r2"]


def test_simulate_lattice_and_toy(tmp_path):
    assert main(["simulate", "lattice", "--out", str(tmp_path / "lat")]) == 0
    m = _read(tmp_path / "lat" / "metrics.json")
    assert [r["lambda"] for r in m["runs"]] == [0.0, 5.0, 10.0]
    for r in m["runs"]:
        grid = np.loadtxt(tmp_path / "lat" / r["labels_file"], delimiter=",")
        assert grid.shape == (10, 10)
    assert main(["simulate", "toy", "--out", str(tmp_path / "toy")]) == 0
    toy = _read(tmp_path / "toy" / "toy.json")
    assert (toy["homogeneity_score"], toy["supervised_score"], toy["singletons_score"]) == (0.3, 0.7, 0.5)


def test_simulated_cohort_is_consumable(tmp_path):
    out = tmp_path / "c"
    assert main(["simulate", "cohort", "--out", str(out), "--n", "12", "--p", "10", "--k-true", "2",
                 "--format", "csv"]) == 0
    assert main(["fit", "--manifest", str(out / "manifest.json"), "--out", str(tmp_path / "f"),
                 "--k", "2"] + FAST) == 0


def test_evaluate(manifest, tmp_path):
    base = ["evaluate", "--manifest", manifest, "--k", "4", "--lambda", "0"] + FAST
    assert main(base + ["--samples", "2", "--fraction", "1.0", "--out", str(tmp_path / "one")]) == 0
    assert _read(tmp_path / "one" / "dice_report.json")["weighted_mean_dice"] == 1.0
    for run in ("a", "b"):
        assert main(base + ["--samples", "3", "--out", str(tmp_path / run)]) == 0
    assert (tmp_path / "a" / "dice_report.json").read_bytes() == (tmp_path / "b" / "dice_report.json").read_bytes()
    assert len(list((tmp_path / "a" / "subsamples").glob("*.csv"))) == 3


def _write_model(path, model):
    path.write_text(json.dumps(model.to_dict()))
    return str(path)


def test_report_modes(tmp_path):
    edges = [(0, k) for k in range(1, 11)]
    model = CPMModel(11, "ridge", edges, [], {"intercept": 0.0, "edges": [0.02 * (i + 1) for i in range(10)]},
                     {e: 0.02 * (i + 1) for i, e in enumerate(edges)}, {"intercept_only": False})
    path = _write_model(tmp_path / "m.json", model)
    assert main(["report", "--model", path, "--out", str(tmp_path / "top"), "--mode", "top-fraction",
                 "--cutoff", "0.2"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "top" / "edges.csv")))
    assert len(rows) == 2
    assert main(["report", "--model", path, "--out", str(tmp_path / "thr"), "--mode", "abs-threshold",
                 "--cutoff", "0.1"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "thr" / "edges.csv")))
    assert rows and all(abs(float(r["strength"])) > 0.1 for r in rows)


def test_report_intercept_only(tmp_path, caplog):
    model = CPMModel(3, "cpm-sum", [], [], {"intercept": 1.0}, {(0, 1): 0.5, (0, 2): 0.1, (1, 2): 0.0},
                     {"intercept_only": True})
    path = _write_model(tmp_path / "m.json", model)
    with caplog.at_level(logging.WARNING):
        assert main(["report", "--model", path, "--out", str(tmp_path / "r"), "--mode", "abs-threshold",
                     "--cutoff", "0.1"]) == 0
    assert (tmp_path / "r" / "edges.csv").read_text().splitlines() == ["node_a,node_b,sign,strength"]
    assert "intercept-only" in caplog.text


def test_report_missing_model(tmp_path):
    assert main(["report", "--model", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert _read(tmp_path / "error.json")["error"] == "MissingModelArtifact"
