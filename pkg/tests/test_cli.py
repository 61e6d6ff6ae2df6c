import csv
import json

import pytest
import yaml

from tinytrain.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from tinytrain.graph import serialize
from tinytrain.graph.autodiff import saved_input_activations
from tinytrain.graph.validate import validate


def _rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "seed": 0,
        "synthetic": {"resolution": 8, "num_classes": 3, "samples_per_class": 8},
        "model": {"preset": "toy", "preset_args": {"blocks": 1, "resolution": 8,
                                                   "num_classes": 3}},
        "data": {"path": "data/target.tt", "val_fraction": 0.25},
        "optimizer": {"learning_rate": 0.02},
        "train": {"epochs": 1},
        "search": {"budget_fraction": 0.5, "population": 6, "generations": 2,
                   "probe": {"epochs": 0}},
    }
    path = root / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["make-data", "--config", str(path), "--out", str(root / "data")]) == EXIT_OK
    return root, path


def test_make_data_artifacts(workspace):
    root, _ = workspace
    meta = json.loads((root / "data" / "data.json").read_text())
    assert meta["target"] == 24 and meta["source"] == 48
    assert {"schema_version", "config_hash", "seed"} <= set(meta)


def test_compile_emits_valid_roundtrippable_graph(workspace, tmp_path):
    root, cfg = workspace
    (tmp_path / "s.json").write_text(json.dumps({"k": 3, "weights": [], "classifier": True}))
    assert main(["compile", "--config", str(cfg), "--out", str(tmp_path),
                 "--scheme", str(tmp_path / "s.json")]) == EXIT_OK
    doc = json.loads((tmp_path / "graph.json").read_text())
    g = serialize.graph_from_dict(doc["graph"])
    assert validate(g) == []
    assert serialize.graph_to_dict(g) == doc["graph"]
    assert saved_input_activations(g) == set()  # bias-only saves no activations
    assert json.loads((tmp_path / "scheme.json").read_text())["scheme"]["k"] == 3


def test_profile_scheme_smaller_than_full_and_csv_sums(workspace, tmp_path):
    root, cfg = workspace
    (tmp_path / "s.json").write_text(json.dumps({"k": 2, "weights": [], "classifier": True}))
    assert main(["profile", "--config", str(cfg), "--out", str(tmp_path),
                 "--scheme", str(tmp_path / "s.json")]) == EXIT_OK
    summary = json.loads((tmp_path / "memory.json").read_text())
    assert summary["analytic"]["total"] < summary["analytic_full"]
    rows = _rows(tmp_path / "memory.csv")
    for sched in ("naive", "reordered"):
        per_step = {}
        for r in rows:
            if r["schedule"] == sched:
                per_step[int(r["step"])] = per_step.get(int(r["step"]), 0) + int(r["bytes"])
        assert max(per_step.values()) == summary[sched]["peak_bytes"]
    assert (tmp_path / "memory.csv").read_text().startswith("# schema_version=")


def test_train_search_and_report_join(workspace, tmp_path):
    root, cfg = workspace
    runs = []
    for preset in ("classifier-only", "bias-only"):
        c = yaml.safe_load(cfg.read_text())
        c["scheme"] = {"preset": preset}
        p = root / f"{preset}.yaml"
        p.write_text(yaml.safe_dump(c))
        out = tmp_path / preset
        assert main(["train", "--config", str(p), "--out", str(out)]) == EXIT_OK
        runs.append(out)
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 1
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "rep")]
                + [str(r) for r in runs]) == EXIT_OK
    frontier = _rows(tmp_path / "rep" / "frontier.csv")
    assert len(frontier) == 2
    for row in frontier:
        result = json.loads((tmp_path / row["run"] / "result.json").read_text())
        assert int(row["analytic_bytes"]) == result["analytic_bytes"]
        assert float(row["accuracy"]) == result["accuracy"]
    out = tmp_path / "search"
    assert main(["search", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    best = json.loads((out / "scheme.json").read_text())
    assert best["memory"] <= best["budget_bytes"]
    assert _rows(out / "history.csv")


def test_empty_report_has_headers(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "frontier.csv").read_text().splitlines()
    assert lines[-1] == "run,analytic_bytes,accuracy,k,weight_layers,mode"


def test_exit_codes(workspace, tmp_path):
    root, cfg = workspace
    assert main(["compile", "--config", str(tmp_path / "missing.yaml"),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"k": 0, "weights": [[0, 1.0]]}))
    assert main(["compile", "--config", str(cfg), "--out", str(tmp_path),
                 "--scheme", str(bad)]) == EXIT_CONFIG
    assert main(["search", "--config", str(cfg), "--out", str(tmp_path),
                 "--budget-bytes", "1"]) == EXIT_INFEASIBLE
    c = yaml.safe_load(cfg.read_text())
    c["search"]["elite"] = 99
    knobs = root / "knobs.yaml"
    knobs.write_text(yaml.safe_dump(c))
    assert main(["search", "--config", str(knobs), "--out", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["compile"])  # --out is required
