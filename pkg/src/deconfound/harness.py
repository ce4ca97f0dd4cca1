"""Reproducible experiment runs: data generation, training, probing, attribution and sweeps.

Each command writes its outputs under a run directory and records every file
in ``manifest.json`` there. Metric CSVs carry no timings, so two runs with the
same config and seed produce byte-identical metric files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, synthgen, trainers
from .config import ConfigError, ExperimentConfig
from .synthgen import Dataset

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class RunFailure(RuntimeError):
    """A command failed after it started writing outputs."""


def g6(x) -> str:
    return format(float(x), ".6g")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class Manifest:
    """File inventory and provenance of one run directory."""

    def __init__(self, run_dir, data: dict | None = None):
        self.run_dir = Path(run_dir)
        self.data = data or {"software": f"deconfound {__version__}", "config_hash": None, "master_seed": None,
                             "replicate_seeds": [], "complete": True, "commands": [], "files": [],
                             "timings": {}, "failures": []}

    @classmethod
    def load(cls, run_dir) -> "Manifest":
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            return cls(run_dir)
        try:
            return cls(run_dir, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: corrupt manifest ({exc})") from None

    def record(self, path, kind: str) -> Path:
        path = Path(path)
        rel = path.resolve().relative_to(self.run_dir.resolve()).as_posix()
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.data["files"] = [f for f in self.data["files"] if f["path"] != rel]
        self.data["files"].append({"path": rel, "kind": kind, "sha256": digest})
        self.data["files"].sort(key=lambda f: f["path"])
        return path

    def files(self, kind: str | None = None) -> list[dict]:
        return [f for f in self.data["files"] if kind is None or f["kind"] == kind]

    def begin(self, command: str, config: ExperimentConfig | None = None) -> None:
        if config is not None:
            self.data["config_hash"] = config.digest()
            self.data["master_seed"] = config.seed
            self.data["replicate_seeds"] = config.replicate_seeds()
        if command not in self.data["commands"]:
            self.data["commands"].append(command)

    def fail(self, message: str) -> None:
        self.data["complete"] = False
        self.data["failures"].append(message)
        self.save()

    def save(self) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / MANIFEST
        path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv(path) -> tuple[list[str], list[dict]]:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def monotone_violations(values, direction: str, tol: float) -> tuple[int, bool]:
    """Count adjacent steps against ``direction``; second value is False if any exceeds ``tol``."""
    values = list(values)
    sign = 1.0 if direction == "increasing" else -1.0
    bad = [sign * (b - a) for a, b in zip(values[:-1], values[1:]) if sign * (b - a) < 0]
    return len(bad), all(-d <= tol for d in bad)


def monotone_with_tolerance(values, direction: str, tol: float, max_violations: int = 1) -> bool:
    n_bad, within = monotone_violations(values, direction, tol)
    return n_bad == 0 or (n_bad <= max_violations and within)


# data

def data_paths(run_dir) -> dict[str, Path]:
    d = Path(run_dir) / "data"
    return {"source": d / "source.csv", "source_test": d / "source_test.csv", "target": d / "target.csv"}


def build_datasets(config: ExperimentConfig) -> dict[str, Dataset]:
    gen = config.generation
    src_cfg = gen.source.gen_config("source")
    tgt_cfg = gen.target.gen_config("target")
    test_cfg = replace(src_cfg, n_samples=gen.n_test, seed=derive_seed(gen.source.seed, 1))
    if gen.nuisance == "binary":
        try:
            source, target = synthgen.make_source_target_pair(src_cfg, tgt_cfg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        source_test = synthgen.generate(test_cfg)
    else:
        source = synthgen.continuous_nuisance_variant(src_cfg, gen.source.age_effect)
        source_test = synthgen.continuous_nuisance_variant(test_cfg, gen.source.age_effect)
        target = synthgen.continuous_nuisance_variant(tgt_cfg, gen.target.age_effect)
    return {"source": source, "source_test": source_test, "target": target}


def cmd_generate(config: ExperimentConfig, run_dir) -> dict[str, Path]:
    run_dir = Path(run_dir)
    manifest = Manifest.load(run_dir)
    manifest.begin("generate", config)
    t0 = time.perf_counter()
    datasets = build_datasets(config)
    paths = data_paths(run_dir)
    paths["source"].parent.mkdir(parents=True, exist_ok=True)
    for name, ds in datasets.items():
        synthgen.save_csv(ds, paths[name])
        manifest.record(paths[name], "data")
        log.info("wrote %s (%d rows)", paths[name], len(ds))
    manifest.data["timings"]["generate"] = round(time.perf_counter() - t0, 3)
    manifest.save()
    return paths


def load_datasets(config: ExperimentConfig, run_dir) -> dict[str, Dataset]:
    paths = data_paths(run_dir)
    if not all(p.exists() for p in paths.values()):
        log.info("datasets missing under %s; generating them", run_dir)
        cmd_generate(config, run_dir)
    d = config.generation.source.d
    return {name: synthgen.load_csv(p, d) for name, p in paths.items()}


# train

def model_scores(model: trainers.TrainedModel, dataset: Dataset) -> np.ndarray:
    if model.has_covariate:
        return trainers.eval_covariate(model, dataset)
    return model.scores(dataset.X)


def evaluate_replicate(model, datasets, config: ExperimentConfig, seed: int, run_dir, tag: str,
                       manifest: Manifest) -> list[tuple[str, str, float]]:
    """AUROC on source-test and target plus the configured diagnostics."""
    diag = config.diagnostics
    (Path(run_dir) / "plots").mkdir(parents=True, exist_ok=True)
    test, target = datasets["source_test"], datasets["target"]
    s_test, s_target = model_scores(model, test), model_scores(model, target)
    rows = [("source", "auroc", diagnostics.auroc(s_test, test.y)),
            ("target", "auroc", diagnostics.auroc(s_target, target.y))]
    if diag.probe:
        probe = diagnostics.probe_nuisance(s_test, test.v, seed=seed, epochs=diag.probe_epochs,
                                           nuisance_kind=test.nuisance_kind)
        rows += [("source", name, value) for name, value in probe.metrics().items()]
        if probe.roc is not None:
            manifest.record(diagnostics.write_roc_csv(probe.roc, Path(run_dir) / "plots" / f"probe_roc_{tag}.csv"),
                            "plot-data")
    if diag.ks and test.nuisance_kind == "continuous":
        pairs = diagnostics.pairwise_subgroup_ks(s_test, test.v)
        manifest.record(diagnostics.write_ks_csv(pairs, Path(run_dir) / "plots" / f"ks_{tag}.csv"), "plot-data")
        rows += [("source", f"ks_{a}_vs_{b}", r.d_statistic) for (a, b), r in pairs]
    if diag.orthogonality and test.nuisance_kind == "binary":
        rep = diagnostics.orthogonality(model.hidden(test.X), test.v, test.y)
        rows.append(("source", "orthogonality_r", rep.r))
    if diag.export_embedding and test.nuisance_kind == "binary":
        pca = diagnostics.pca_embed(model.hidden(test.X), 2)
        manifest.record(diagnostics.write_embedding_csv(pca.embedding, test.v, test.y,
                                                        Path(run_dir) / "plots" / f"embedding_{tag}.csv"), "plot-data")
    if diag.export_scores:
        score_rows = [["source", g6(s), int(y), g6(v)] for s, y, v in zip(s_test, test.y, test.v)]
        score_rows += [["target", g6(s), int(y), g6(v)] for s, y, v in zip(s_target, target.y, target.v)]
        manifest.record(write_csv(Path(run_dir) / "plots" / f"scores_{tag}.csv",
                                  ["domain", "score", "label", "nuisance"], score_rows), "plot-data")
    return rows


def summarize(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else float("nan")
    return float(arr.mean()), std


def cmd_train(config: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    datasets = load_datasets(config, run_dir)
    manifest = Manifest.load(run_dir)
    manifest.begin("train", config)
    method = config.trainer.method
    kind = datasets["source"].nuisance_kind
    t0 = time.perf_counter()
    per_rep: list[list[tuple[str, str, float]]] = []
    for i, seed in enumerate(config.replicate_seeds()):
        tag = f"{method}_rep{i}"
        try:
            train_cfg = config.trainer.train.train_config(seed)
            adv_cfg = config.trainer.adversarial.adv_config(kind)
            model = trainers.train(method, datasets["source"], train_cfg, adv_cfg)
            model.config_hash = config.digest()
            manifest.record(trainers.save_model(model, _mkparent(run_dir / "models" / f"{tag}.json")), "model")
            per_rep.append(evaluate_replicate(model, datasets, config, seed, run_dir, tag, manifest))
        except Exception as exc:
            manifest.fail(f"replicate {i} (seed {seed}): {type(exc).__name__}: {exc}")
            raise RunFailure(f"replicate {i} (seed {seed}) failed: {exc}") from exc
        log.info("%s replicate %d: %s", method, i,
                 ", ".join(f"{d}/{m}={g6(v)}" for d, m, v in per_rep[-1]))

    rows = []
    for i, rep in enumerate(per_rep):
        rows += [[method, i, d, m, g6(v), ""] for d, m, v in rep]
    summary = {}
    for d, m, _ in per_rep[0]:
        mean, std = summarize([v for rep in per_rep for dd, mm, v in rep if (dd, mm) == (d, m)])
        summary[(d, m)] = (mean, std)
        rows.append([method, "summary", d, m, g6(mean), g6(std)])
    metrics_path = write_csv(run_dir / f"metrics_{method}.csv",
                             ["method", "replicate", "domain", "metric", "value", "std"], rows)
    manifest.record(metrics_path, "metrics")
    src, tgt = summary[("source", "auroc")], summary[("target", "auroc")]
    manifest.record(write_csv(run_dir / f"table_{method}.csv",
                              ["method", "source_internal", "source_internal_std", "target_external",
                               "target_external_std"],
                              [[method, g6(src[0]), g6(src[1]), g6(tgt[0]), g6(tgt[1])]]), "table")
    checks = train_checks(method, per_rep)
    if checks:
        manifest.record(write_checks(run_dir / f"checks_{method}.csv", checks), "checks")
    manifest.data["timings"][f"train_{method}"] = round(time.perf_counter() - t0, 3)
    manifest.save()
    return metrics_path


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def train_checks(method: str, per_rep) -> list[tuple[str, bool, float, str]]:
    if method != "adversarial":
        return []
    probes = [v for rep in per_rep for d, m, v in rep if m == "probe_auroc"]
    if not probes:
        return []
    ok = all(0.45 <= p <= 0.58 for p in probes)
    return [("adversarial_probe_auroc_in_[0.45,0.58]", ok, max(probes, key=lambda p: abs(p - 0.5)),
             "all replicates")]


def write_checks(path, checks) -> Path:
    return write_csv(path, ["check", "passed", "value", "detail"],
                     [[name, "true" if ok else "false", g6(value), detail] for name, ok, value, detail in checks])


# probe / attribute

def _stem(path) -> str:
    return Path(path).stem


def cmd_probe(model_path, dataset_path, run_dir, seed: int = 0, epochs: int = 40) -> Path:
    run_dir = Path(run_dir)
    model = trainers.load_model(model_path)
    dataset = synthgen.load_csv(dataset_path)
    if model.adversary is not None and (model.adversary.loss_kind == "bce") != (dataset.nuisance_kind == "binary"):
        raise ConfigError(f"model was trained against a {model.adversary.loss_kind} adversary but "
                          f"{dataset_path} has a {dataset.nuisance_kind} nuisance")
    manifest = Manifest.load(run_dir)
    manifest.begin("probe")
    scores = model_scores(model, dataset)
    report = diagnostics.probe_nuisance(scores, dataset.v, seed=seed, epochs=epochs,
                                        nuisance_kind=dataset.nuisance_kind)
    tag = f"{_stem(model_path)}__{_stem(dataset_path)}"
    rows = [[_stem(model_path), _stem(dataset_path), dataset.nuisance_kind, m, g6(v)]
            for m, v in report.metrics().items()]
    out = write_csv(run_dir / f"probe_{tag}.csv", ["model", "dataset", "nuisance_kind", "metric", "value"], rows)
    manifest.record(out, "metrics")
    if report.roc is not None:
        manifest.record(diagnostics.write_roc_csv(report.roc, _mkparent(run_dir / "plots" / f"probe_roc_{tag}.csv")),
                        "plot-data")
    manifest.save()
    return out


def cmd_attribute(model_path, dataset_path, run_dir, sample_index: int, n_samples: int = 2000,
                  seed: int = 0) -> Path:
    run_dir = Path(run_dir)
    model = trainers.load_model(model_path)
    dataset = synthgen.load_csv(dataset_path)
    if not 0 <= sample_index < len(dataset):
        raise ConfigError(f"sample index {sample_index} out of range for {len(dataset)} samples")
    manifest = Manifest.load(run_dir)
    manifest.begin("attribute")
    x = dataset.X[sample_index]
    attrs = diagnostics.expected_gradients(model, x, dataset, n_samples, seed, reference_id=_stem(dataset_path))
    clipped = diagnostics.clip_attributions(attrs)
    f_x = float(model.scores(x[None, :])[0])
    f_ref = float(model.scores(dataset.X).mean())
    total = float(attrs.values.sum())
    tag = f"{_stem(model_path)}__{_stem(dataset_path)}__{sample_index}"
    out = diagnostics.write_attributions_csv(attrs, _mkparent(run_dir / f"attributions_{tag}.csv"))
    manifest.record(out, "attributions")
    manifest.record(diagnostics.write_attributions_csv(clipped, run_dir / f"attributions_clipped_{tag}.csv"),
                    "attributions")
    manifest.record(write_csv(run_dir / f"attribution_check_{tag}.csv", ["metric", "value"], [
        ["sum_attributions", g6(total)],
        ["score_minus_reference_mean", g6(f_x - f_ref)],
        ["completeness_gap", g6(abs(total - (f_x - f_ref)))],
        ["n_samples", n_samples],
    ]), "metrics")
    manifest.save()
    return out


# sweep

def cmd_sweep_imbalance(config: ExperimentConfig, run_dir) -> Path:
    """Standard models trained on engineered base-rate imbalances, one row per (ratio, seed)."""
    run_dir = Path(run_dir)
    sweep = config.sweep
    counts = {}
    for r in sweep.ratios:
        try:
            counts[r] = synthgen.engineered_imbalance(r, sweep.n_per_view, sweep.overall_rate)
        except ValueError as exc:
            raise ConfigError(f"sweep: {exc}") from None
    manifest = Manifest.load(run_dir)
    manifest.begin("sweep-imbalance", config)
    base = config.generation.source.gen_config("source")
    t0 = time.perf_counter()
    rows, table = [], {}
    for i, seed in enumerate(config.replicate_seeds()):
        target = synthgen.generate(replace(base, n_samples=sweep.n_target, base_rate_given_v=sweep.target_base_rates,
                                           seed=derive_seed(seed, 0), domain="target"))
        for k, r in enumerate(sweep.ratios):
            try:
                train = synthgen.realize_counts(counts[r], replace(base, seed=derive_seed(seed, k, 1)))
                test = synthgen.realize_counts(counts[r], replace(base, seed=derive_seed(seed, k, 2)))
                model = trainers.train_standard(train, config.trainer.train.train_config(seed))
                tgt_auc = diagnostics.auroc(model.scores(target.X), target.y)
                probe = diagnostics.probe_nuisance(model.scores(test.X), test.v, seed=seed,
                                                   epochs=config.diagnostics.probe_epochs).auroc
            except Exception as exc:
                manifest.fail(f"sweep replicate {i} ratio {r}: {type(exc).__name__}: {exc}")
                raise RunFailure(f"sweep replicate {i} ratio {r} failed: {exc}") from exc
            log.info("ratio %g seed %d: target auroc %.4f, probe auroc %.4f", r, seed, tgt_auc, probe)
            rows.append([g6(r), g6(tgt_auc), g6(probe), seed])
            table.setdefault(r, []).append((tgt_auc, probe))
    out = write_csv(run_dir / "sweep.csv", ["ratio", "target_auroc", "probe_auroc", "seed"], rows)
    manifest.record(out, "metrics")
    means = [np.mean(table[r], axis=0) for r in sweep.ratios]
    tgt_means, probe_means = [m[0] for m in means], [m[1] for m in means]
    checks = [
        ("target_auroc_non_increasing", monotone_with_tolerance(tgt_means, "decreasing", sweep.tolerance),
         tgt_means[-1] - tgt_means[0], "seed-averaged, one violation <= tolerance allowed"),
        ("probe_auroc_non_decreasing", monotone_with_tolerance(probe_means, "increasing", sweep.tolerance),
         probe_means[-1] - probe_means[0], "seed-averaged, one violation <= tolerance allowed"),
    ]
    manifest.record(write_checks(run_dir / "checks_sweep.csv", checks), "checks")
    manifest.data["timings"]["sweep-imbalance"] = round(time.perf_counter() - t0, 3)
    manifest.save()
    return out


# report

def cmd_report(run_dir) -> tuple[Path, list[str]]:
    """Join every metric file into ``summary.csv``; returns (path, failed checks)."""
    run_dir = Path(run_dir)
    if not (run_dir / MANIFEST).exists():
        raise ConfigError(f"{run_dir}: no {MANIFEST}; nothing to report")
    manifest = Manifest.load(run_dir)
    metric_files = manifest.files("metrics")
    if not metric_files:
        raise ConfigError(f"{run_dir}: manifest lists no metric files")
    columns, rows = ["file"], []
    for entry in metric_files:
        path = run_dir / entry["path"]
        if not path.exists():
            raise ConfigError(f"{run_dir}: manifest lists missing file {entry['path']}")
        header, body = read_csv(path)
        columns += [c for c in header if c not in columns]
        rows += [{"file": entry["path"], **row} for row in body]
    out = write_csv(run_dir / "summary.csv", columns, [[row.get(c, "") for c in columns] for row in rows])
    manifest.record(out, "report")

    failed = []
    for entry in manifest.files("checks"):
        _, body = read_csv(run_dir / entry["path"])
        failed += [f"{entry['path']}: {row['check']}" for row in body if row["passed"] != "true"]
    if not manifest.data.get("complete", True):
        failed.append("run is marked incomplete")
    manifest.save()
    return out, failed


def format_table(path) -> str:
    header, rows = read_csv(path)
    cells = [header] + [[row.get(c, "") for c in header] for row in rows]
    widths = [max(len(str(r[i])) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in cells)
