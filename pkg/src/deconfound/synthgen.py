"""Synthetic confounded datasets.

The generating process has a binary label ``Y`` and a nuisance ``V``. ``Y``
writes into a block of signal features, ``V`` writes into a disjoint block of
marker features, and the remaining features are pure noise. The label/nuisance
association is set per domain through ``P(Y=1 | V=v)``, so a source and a
target domain can share the feature mechanism while disagreeing on how the
label relates to the nuisance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

AGE_MEAN = 60.0
AGE_SD = 18.0
AGE_CLIP = (18.0, 100.0)
AGE_BIN_EDGES = (45.0, 65.0, 85.0)


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    nuisance: float
    group_id: int
    domain: str


@dataclass
class Dataset:
    """Column-oriented collection of samples."""

    X: np.ndarray
    y: np.ndarray
    v: np.ndarray
    group: np.ndarray
    domain: np.ndarray
    nuisance_kind: str = "binary"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.group = np.asarray(self.group, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=object)
        n = self.X.shape[0]
        if self.X.ndim != 2:
            raise ValueError("features must be a 2-d array")
        for name in ("y", "v", "group", "domain"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"column {name!r} has the wrong length")
        if not np.isfinite(self.X).all():
            raise ValueError("features must be finite")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if self.nuisance_kind not in ("binary", "continuous"):
            raise ValueError(f"unknown nuisance kind {self.nuisance_kind!r}")
        if self.nuisance_kind == "binary" and not np.isin(self.v, (0.0, 1.0)).all():
            raise ValueError("binary nuisance must be 0 or 1")
        if not np.isin(self.domain, ("source", "target")).all():
            raise ValueError("domain must be 'source' or 'target'")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i].copy(), int(self.y[i]), float(self.v[i]), int(self.group[i]),
                      str(self.domain[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.v[idx], self.group[idx], self.domain[idx],
                       self.nuisance_kind, dict(self.metadata))

    def cell_counts(self) -> dict[tuple[int, int], int]:
        """Sample counts per (label, nuisance) cell; binary nuisance only."""
        if self.nuisance_kind != "binary":
            raise ValueError("cell counts need a binary nuisance")
        return {(y, v): int(np.sum((self.y == y) & (self.v == v))) for y in (0, 1) for v in (0, 1)}

    def same_data(self, other: "Dataset") -> bool:
        return (
            self.nuisance_kind == other.nuisance_kind
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.group, other.group)
            and np.array_equal(self.domain, other.domain)
        )


@dataclass(frozen=True)
class GenConfig:
    n_samples: int = 20000
    d: int = 32
    p_v: float = 0.5
    base_rate_given_v: tuple[float, float] = (0.021, 0.039)
    signal_strength: float = 0.4
    marker_strength: float = 3.0
    noise_sd: float = 1.0
    signal_dims: tuple[int, ...] = (0, 1, 2, 3)
    marker_dims: tuple[int, ...] = (4, 5)
    seed: int = 0
    aux_labels: int = 0
    domain: str = "source"

    def __post_init__(self):
        for name in ("base_rate_given_v", "signal_dims", "marker_dims"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.n_samples < 1 or self.d < 1:
            raise ValueError("n_samples and d must be positive")
        probs = (self.p_v,) + self.base_rate_given_v
        if len(self.base_rate_given_v) != 2 or not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"probabilities must lie in [0, 1], got p_v={self.p_v}, "
                             f"base_rate_given_v={self.base_rate_given_v}")
        if min(self.signal_strength, self.marker_strength, self.noise_sd) < 0:
            raise ValueError("strengths and noise_sd must be non-negative")
        sig, mark = set(self.signal_dims), set(self.marker_dims)
        if sig & mark:
            raise ValueError("signal and marker dims overlap")
        if any(i < 0 or i >= self.d for i in sig | mark):
            raise ValueError("signal/marker dims must index into d features")
        if self.domain not in ("source", "target"):
            raise ValueError("domain must be 'source' or 'target'")
        if self.aux_labels < 0:
            raise ValueError("aux_labels must be >= 0")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ImbalanceCounts:
    pos_v0: int
    neg_v0: int
    pos_v1: int
    neg_v1: int

    @property
    def total(self) -> int:
        return self.pos_v0 + self.neg_v0 + self.pos_v1 + self.neg_v1

    def as_cells(self) -> dict[tuple[int, int], int]:
        return {(1, 0): self.pos_v0, (0, 0): self.neg_v0, (1, 1): self.pos_v1, (0, 1): self.neg_v1}


def _features(rng: np.random.Generator, config: GenConfig, y: np.ndarray, marker: np.ndarray) -> np.ndarray:
    n = y.shape[0]
    X = rng.normal(0.0, config.noise_sd, size=(n, config.d)) if config.noise_sd > 0 else np.zeros((n, config.d))
    sig = list(config.signal_dims)
    mark = list(config.marker_dims)
    X[:, sig] += y[:, None] * config.signal_strength
    X[:, mark] += marker[:, None] * config.marker_strength
    return X


def _aux(rng: np.random.Generator, config: GenConfig, y: np.ndarray) -> np.ndarray | None:
    if not config.aux_labels:
        return None
    n = y.shape[0]
    keep = rng.random((n, config.aux_labels)) < 0.8
    noise = rng.random((n, config.aux_labels)) < y.mean()
    return np.where(keep, y[:, None], noise).astype(np.int64)


def _build(config: GenConfig, rng, y, v, marker, kind: str, extra_meta=None) -> Dataset:
    X = _features(rng, config, y, marker)
    aux = _aux(rng, config, y)
    n = y.shape[0]
    meta = {"config_hash": config.digest(), "seed": config.seed}
    if aux is not None:
        meta["aux_labels"] = aux
    meta.update(extra_meta or {})
    return Dataset(X, y, v, np.arange(n), np.full(n, config.domain, dtype=object), kind, meta)


def generate(config: GenConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    v = (rng.random(n) < config.p_v).astype(np.int64)
    rates = np.asarray(config.base_rate_given_v)[v]
    y = (rng.random(n) < rates).astype(np.int64)
    return _build(config, rng, y, v, v.astype(np.float64), "binary")


def engineered_imbalance(ratio: float, n_per_view: int = 10000, overall_rate: float = 0.05) -> ImbalanceCounts:
    """Cell counts with ``pos_v1 / pos_v0 ~= ratio`` and a fixed overall positive rate."""
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    if n_per_view < 1 or not 0 <= overall_rate <= 1:
        raise ValueError("need n_per_view >= 1 and overall_rate in [0, 1]")
    positives = int(math.floor(overall_rate * 2 * n_per_view + 0.5))
    pos_v0 = int(math.floor(positives / (1.0 + ratio) + 0.5))
    pos_v1 = positives - pos_v0
    if pos_v0 > n_per_view or pos_v1 > n_per_view:
        raise ValueError(f"ratio {ratio} is infeasible: {pos_v1} positives exceed {n_per_view} samples per view")
    return ImbalanceCounts(pos_v0, n_per_view - pos_v0, pos_v1, n_per_view - pos_v1)


def realize_counts(counts: ImbalanceCounts, config: GenConfig) -> Dataset:
    """Dataset with exactly the requested (label, nuisance) cell counts, in shuffled order."""
    cells = counts.as_cells()
    if any(c < 0 for c in cells.values()):
        raise ValueError(f"infeasible counts {counts}")
    if counts.total == 0:
        raise ValueError("counts are all zero")
    rng = np.random.default_rng(config.seed)
    y = np.concatenate([np.full(c, yy, dtype=np.int64) for (yy, vv), c in cells.items()])
    v = np.concatenate([np.full(c, vv, dtype=np.int64) for (yy, vv), c in cells.items()])
    order = rng.permutation(y.shape[0])
    y, v = y[order], v[order]
    return _build(config, rng, y, v, v.astype(np.float64), "binary", {"counts": asdict(counts)})


def make_source_target_pair(source_cfg: GenConfig, target_cfg: GenConfig) -> tuple[Dataset, Dataset]:
    """Two domains sharing the feature mechanism; only P(Y | V) may differ."""
    for name in ("d", "signal_dims", "marker_dims", "signal_strength", "marker_strength", "noise_sd"):
        if getattr(source_cfg, name) != getattr(target_cfg, name):
            raise ValueError(f"source and target disagree on feature mechanism field {name!r}")
    source = generate(replace(source_cfg, domain="source"))
    target = generate(replace(target_cfg, domain="target"))
    return source, target


def age_bins(age, edges=AGE_BIN_EDGES) -> np.ndarray:
    """Bin index per age: 0 for age < edges[0], ..., len(edges) for age >= edges[-1]."""
    return np.digitize(np.asarray(age, dtype=np.float64), np.asarray(edges, dtype=np.float64))


def age_label_rate(age, base_rate: float, age_effect: float) -> np.ndarray:
    """P(Y=1 | age) under the logistic link used by the continuous variant."""
    z = (np.asarray(age, dtype=np.float64) - AGE_MEAN) / AGE_SD
    return 1.0 / (1.0 + np.exp(-(math.log(base_rate / (1.0 - base_rate)) + age_effect * z)))


def continuous_nuisance_variant(config: GenConfig, age_effect: float) -> Dataset:
    """Age-like continuous nuisance.

    Age is a Gaussian clipped to [18, 100]. The label log-odds move by
    ``age_effect`` per age standard deviation around the mean of
    ``config.base_rate_given_v``; marker features carry the standardized age
    scaled by ``marker_strength``.
    """
    if not math.isfinite(age_effect):
        raise ValueError("age_effect must be finite")
    base = float(np.mean(config.base_rate_given_v))
    if not 0.0 < base < 1.0:
        raise ValueError("continuous variant needs a base rate strictly inside (0, 1)")
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    age = np.clip(rng.normal(AGE_MEAN, AGE_SD, size=n), *AGE_CLIP)
    y = (rng.random(n) < age_label_rate(age, base, age_effect)).astype(np.int64)
    z = (age - AGE_MEAN) / AGE_SD
    return _build(config, rng, y, age, z, "continuous", {"age_effect": age_effect})


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    header = [f"f{i}" for i in range(dataset.d)] + ["label", "nuisance", "group_id", "domain"]
    binary = dataset.nuisance_kind == "binary"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            nuisance = str(int(dataset.v[i])) if binary else _fmt(dataset.v[i])
            writer.writerow([_fmt(x) for x in dataset.X[i]]
                            + [str(int(dataset.y[i])), nuisance, str(int(dataset.group[i])), dataset.domain[i]])


def load_csv(path, d: int | None = None) -> Dataset:
    """Read a dataset written by :func:`save_csv`.

    The nuisance is binary when every value is 0 or 1, continuous otherwise.
    """
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path}: empty file")
    header = rows[0]
    n_feat = len(header) - 4
    expected = [f"f{i}" for i in range(max(n_feat, 0))] + ["label", "nuisance", "group_id", "domain"]
    if n_feat < 1 or header != expected:
        raise DatasetFormatError(f"{path}: bad header {header[:3]}... expected f0..f{{d-1}},label,nuisance,group_id,domain")
    if d is not None and n_feat != d:
        raise DatasetFormatError(f"{path}: header has {n_feat} features, expected {d}")
    body = rows[1:]
    X = np.empty((len(body), n_feat))
    y = np.empty(len(body), dtype=np.int64)
    v = np.empty(len(body))
    group = np.empty(len(body), dtype=np.int64)
    domain = np.empty(len(body), dtype=object)
    for i, row in enumerate(body):
        if len(row) != n_feat + 4:
            raise DatasetFormatError(f"{path}: row {i + 2} has {len(row)} fields, expected {n_feat + 4}")
        try:
            X[i] = [float(t) for t in row[:n_feat]]
            y[i] = int(row[n_feat])
            v[i] = float(row[n_feat + 1])
            group[i] = int(row[n_feat + 2])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: row {i + 2}: {exc}") from None
        domain[i] = row[n_feat + 3]
    kind = "binary" if np.isin(v, (0.0, 1.0)).all() else "continuous"
    try:
        return Dataset(X, y, v, group, domain, kind, {"source_file": str(path)})
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
