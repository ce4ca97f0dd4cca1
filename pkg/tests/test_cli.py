import csv
import json
import statistics
from pathlib import Path

import pytest
import yaml

from deconfound import harness
from deconfound.cli import run
from deconfound.config import ConfigError, default_config_dict, parse_config


def tiny_config(method="standard", **overrides):
    doc = default_config_dict(method)
    small = {"n_samples": 1500, "d": 8, "signal_dims": [0, 1], "marker_dims": [2, 3], "signal_strength": 1.0}
    doc["generation"]["source"].update(small)
    doc["generation"]["target"].update(small)
    doc["generation"]["n_test"] = 1000
    doc["trainer"]["train"] = {"max_epochs": 3, "hidden_sizes": [8], "val_fraction": 0.1}
    doc["trainer"]["adversarial"] = {"joint_epochs": 3, "adversary_hidden": [8]}
    doc["diagnostics"] = {"probe_epochs": 2}
    doc["sweep"] = {"ratios": [1, 10], "n_per_view": 800, "n_target": 1000}
    doc["replicates"] = 2
    for key, value in overrides.items():
        doc[key] = value
    return doc


def write_config(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def all_files(run_dir: Path):
    return {p.relative_to(run_dir).as_posix() for p in run_dir.rglob("*") if p.is_file()} - {"manifest.json"}


def manifest_files(run_dir: Path):
    return {f["path"] for f in json.loads((run_dir / "manifest.json").read_text())["files"]}


def test_generate_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, tiny_config())
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("source.csv", "source_test.csv", "target.csv"):
        assert (tmp_path / "a/data" / name).read_bytes() == (tmp_path / "b/data" / name).read_bytes()
    assert len(rows_of(tmp_path / "a/data/source.csv")) == 1500
    assert len(rows_of(tmp_path / "a/data/source_test.csv")) == 1000


def test_missing_field_names_the_field():
    doc = default_config_dict()
    del doc["generation"]["source"]["seed"]
    with pytest.raises(ConfigError, match="generation.source.seed"):
        parse_config(doc)
    with pytest.raises(ConfigError, match="trainer.trian"):
        parse_config({**default_config_dict(), "trainer": {"method": "standard", "trian": {}}})


def test_usage_and_config_errors_exit_1(tmp_path, capsys):
    assert run(["train"]) == 1
    assert run(["frobnicate"]) == 1
    bad = write_config(tmp_path, {"generation": {}})
    assert run(["train", "--config", str(bad)]) == 1
    assert "generation.source" in capsys.readouterr().err
    assert run(["train", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert run(["report", "--out", str(tmp_path / "empty")]) == 1


def test_train_outputs(tmp_path):
    cfg = write_config(tmp_path, tiny_config())
    out = tmp_path / "run"
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    rows = rows_of(out / "metrics_standard.csv")
    keys = {(r["domain"], r["metric"]) for r in rows}
    assert ("source", "auroc") in keys and ("target", "auroc") in keys and ("source", "probe_auroc") in keys
    for key in keys:
        mine = [r for r in rows if (r["domain"], r["metric"]) == key]
        assert len(mine) == 2 + 1
        reps = [float(r["value"]) for r in mine if r["replicate"] != "summary"]
        summary = next(r for r in mine if r["replicate"] == "summary")
        # replicate values are printed to 6 significant digits
        assert float(summary["value"]) == pytest.approx(statistics.mean(reps), rel=1e-5, abs=1e-6)
        assert float(summary["std"]) == pytest.approx(statistics.stdev(reps), rel=1e-4, abs=1e-6)
    table = rows_of(out / "table_standard.csv")
    assert list(table[0]) == ["method", "source_internal", "source_internal_std", "target_external",
                              "target_external_std"]
    assert sorted(p.name for p in (out / "models").iterdir()) == ["standard_rep0.json", "standard_rep1.json"]
    assert all_files(out) == manifest_files(out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["replicate_seeds"] == [0, 10007] and manifest["complete"] is True


def test_seed_and_replicate_overrides(tmp_path):
    cfg = write_config(tmp_path, tiny_config())
    out = tmp_path / "run"
    assert run(["train", "--config", str(cfg), "--out", str(out), "--seed", "5", "--replicates", "1"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["replicate_seeds"] == [5] and manifest["master_seed"] == 5
    assert {r["replicate"] for r in rows_of(out / "metrics_standard.csv")} == {"0", "summary"}


def test_failed_replicate_exits_2_and_marks_manifest(tmp_path):
    doc = tiny_config("instance_weighting")
    doc["generation"]["nuisance"] = "continuous"
    out = tmp_path / "run"
    assert run(["train", "--config", str(write_config(tmp_path, doc)), "--out", str(out)]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["complete"] is False and "replicate 0" in manifest["failures"][0]
    assert run(["report", "--out", str(out)]) == 1  # no metric files to join


@pytest.fixture(scope="module")
def adversarial_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("adv")
    cfg = write_config(base, tiny_config("adversarial", replicates=1))
    out = base / "run"
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return base, out


def test_probe_command(adversarial_run):
    _, out = adversarial_run
    model, data = out / "models/adversarial_rep0.json", out / "data/source_test.csv"
    assert run(["probe", "--model", str(model), "--data", str(data), "--out", str(out), "--epochs", "2"]) == 0
    path = out / "probe_adversarial_rep0__source_test.csv"
    with open(path) as fh:
        assert fh.readline().strip() == "model,dataset,nuisance_kind,metric,value"
    (row,) = rows_of(path)
    assert row["metric"] == "probe_auroc" and 0 <= float(row["value"]) <= 1
    assert (out / "plots/probe_roc_adversarial_rep0__source_test.csv").exists()


def test_probe_rejects_kind_mismatch(adversarial_run, tmp_path):
    base, out = adversarial_run
    doc = tiny_config()
    doc["generation"]["nuisance"] = "continuous"
    cfg = write_config(tmp_path, doc)
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "age")]) == 0
    code = run(["probe", "--model", str(out / "models/adversarial_rep0.json"),
                "--data", str(tmp_path / "age/data/source_test.csv"), "--out", str(tmp_path / "p")])
    assert code == 1


def test_attribute_command(adversarial_run, tmp_path):
    _, out = adversarial_run
    model = out / "models/adversarial_rep0.json"
    args = ["attribute", "--model", str(model), "--data", str(out / "data/source_test.csv"), "--out", str(out),
            "--index", "3", "--n-samples", "300", "--seed", "1"]
    assert run(args) == 0
    path = out / "attributions_adversarial_rep0__source_test__3.csv"
    first = path.read_bytes()
    assert run(args) == 0
    assert path.read_bytes() == first
    rows = rows_of(path)
    assert [int(r["feature_index"]) for r in rows] == list(range(8))
    assert (out / "attributions_clipped_adversarial_rep0__source_test__3.csv").exists()
    check = {r["metric"]: r["value"] for r in rows_of(out / "attribution_check_adversarial_rep0__source_test__3.csv")}
    assert set(check) == {"sum_attributions", "score_minus_reference_mean", "completeness_gap", "n_samples"}
    assert run(args[:-4] + ["--index", "99999"]) == 1

    # a sample that is its own only reference gets zero attribution
    single = tmp_path / "one.csv"
    lines = (out / "data/source_test.csv").read_text().splitlines()
    single.write_text("\n".join(lines[:2]) + "\n")
    assert run(["attribute", "--model", str(model), "--data", str(single), "--out", str(tmp_path / "o"),
                "--index", "0", "--n-samples", "50"]) == 0
    zero = rows_of(tmp_path / "o/attributions_adversarial_rep0__one__0.csv")
    assert all(float(r["value"]) == 0.0 for r in zero)


def test_report_join_and_idempotence(adversarial_run):
    _, out = adversarial_run
    code = run(["report", "--out", str(out)])
    assert code in (0, 3)
    first = (out / "summary.csv").read_bytes()
    manifest = json.loads((out / "manifest.json").read_text())
    metric_rows = sum(len(rows_of(out / f["path"])) for f in manifest["files"] if f["kind"] == "metrics")
    assert len(rows_of(out / "summary.csv")) == metric_rows
    assert run(["report", "--out", str(out)]) == code
    assert (out / "summary.csv").read_bytes() == first


def test_report_exit_3_on_failed_check(tmp_path):
    out = tmp_path / "run"
    manifest = harness.Manifest(out)
    manifest.record(harness.write_csv(out / "metrics_x.csv", ["metric", "value"], [["auroc", "0.5"]]), "metrics")
    manifest.record(harness.write_checks(out / "checks_x.csv", [("some_check", False, 0.7, "")]), "checks")
    manifest.save()
    assert run(["report", "--out", str(out)]) == 3
    (out / "manifest.json").write_text("{not json")
    assert run(["report", "--out", str(out)]) == 1


def test_sweep_command(tmp_path):
    cfg = write_config(tmp_path, tiny_config(replicates=1))
    out = tmp_path / "sweep"
    assert run(["sweep-imbalance", "--config", str(cfg), "--out", str(out)]) == 0
    rows = rows_of(out / "sweep.csv")
    assert list(rows[0]) == ["ratio", "target_auroc", "probe_auroc", "seed"]
    assert [r["ratio"] for r in rows] == ["1", "10"]
    assert {r["check"] for r in rows_of(out / "checks_sweep.csv")} == {"target_auroc_non_increasing",
                                                                      "probe_auroc_non_decreasing"}
    bad = tiny_config()
    bad["sweep"]["ratios"] = [1, 1e6]
    bad["sweep"]["overall_rate"] = 0.9
    assert run(["sweep-imbalance", "--config", str(write_config(tmp_path, bad, "bad.yaml")), "--out",
                str(tmp_path / "bad")]) == 1


def test_monotone_with_tolerance():
    assert harness.monotone_with_tolerance([0.7, 0.6, 0.5], "decreasing", 0.01)
    assert harness.monotone_with_tolerance([0.7, 0.705, 0.5], "decreasing", 0.01)
    assert not harness.monotone_with_tolerance([0.7, 0.72, 0.5], "decreasing", 0.01)
    assert not harness.monotone_with_tolerance([0.5, 0.49, 0.6, 0.595], "increasing", 0.01)


def test_module_entry_point():
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "deconfound", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep-imbalance" in proc.stdout
