"""Metrics and confounding diagnostics."""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import net
from .net import NetworkParams, NetworkSpec


def _binary_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels).ravel()
    if y.size != n:
        raise ValueError(f"length mismatch: {n} scores, {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    return y


def auroc(scores, labels) -> float:
    """Area under the ROC curve by the rank-sum statistic, ties at midranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels, s.size)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = s.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auroc: float


def roc_curve(scores, labels) -> RocResult:
    """One ROC point per distinct score, starting at (0, 0) and ending at (1, 1).

    The area is accumulated on integer counts so that it equals
    :func:`auroc` to the last bit.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels, s.size)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    tp = np.r_[0, np.cumsum(y_sorted)[last_of_run]].astype(np.int64)
    fp = np.r_[0, np.cumsum(~y_sorted)[last_of_run]].astype(np.int64)
    n_pos, n_neg = int(tp[-1]), int(fp[-1])
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    area = (twice_area / 2.0) / (n_pos * n_neg)
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    return RocResult(fp / n_neg, tp / n_pos, thresholds, float(area))


@dataclass
class ProbeReport:
    nuisance_kind: str
    spec: NetworkSpec
    params: NetworkParams
    n_train: int
    n_test: int
    seed: int
    auroc: float | None = None
    roc: RocResult | None = None
    r2: float | None = None
    mse: float | None = None

    @property
    def split(self) -> str:
        return f"{self.n_train}/{self.n_test} stratified, seed {self.seed}"

    def metrics(self) -> dict[str, float]:
        if self.nuisance_kind == "binary":
            return {"probe_auroc": self.auroc}
        return {"probe_r2": self.r2, "probe_mse": self.mse}


PROBE_MIN_SAMPLES = 200


def default_probe_spec(nuisance_kind: str = "binary") -> NetworkSpec:
    return NetworkSpec((1, 32, 32, 32, 1), output_activation="sigmoid" if nuisance_kind == "binary" else "linear")


def _stratified_split(strata: np.ndarray, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for value in np.unique(strata):
        idx = rng.permutation(np.nonzero(strata == value)[0])
        n_test = int(round(test_fraction * idx.size))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def fit_small_net(spec: NetworkSpec, X, targets, loss_kind: str, seed: int, epochs: int,
                  lr: float = 1e-2, batch_size: int = 128, momentum: float = 0.9,
                  weight_decay: float = 1e-4) -> NetworkParams:
    """Plain minibatch SGD with momentum for a fixed number of epochs."""
    rng = np.random.default_rng(seed)
    params = net.init_params(spec, int(rng.integers(2**32)))
    state = net.OptimizerState.zeros(params, lr)
    X = np.asarray(X, dtype=np.float64).reshape(-1, spec.input_dim)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            trace = net.forward(params, spec, X[idx])
            grads = net.backward(trace, params, spec, loss_kind, t[idx])
            params, state = net.sgd_step(params, grads, state, momentum, weight_decay)
    return params


def probe_nuisance(scores, nuisance, probe_spec: NetworkSpec | None = None, seed: int = 0,
                   epochs: int = 40, nuisance_kind: str | None = None) -> ProbeReport:
    """Train a fresh network to predict the nuisance from the score alone.

    70% of samples (stratified on a binary nuisance) train the probe, the
    remaining 30% score it. Inputs, and a continuous target, are standardized
    with training-split statistics.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    v = np.asarray(nuisance, dtype=np.float64).ravel()
    if s.size != v.size:
        raise ValueError("scores and nuisance differ in length")
    if s.size < PROBE_MIN_SAMPLES:
        raise ValueError(f"probe needs at least {PROBE_MIN_SAMPLES} samples, got {s.size}")
    if nuisance_kind is None:
        nuisance_kind = "binary" if np.isin(v, (0.0, 1.0)).all() else "continuous"
    if probe_spec is None:
        probe_spec = default_probe_spec(nuisance_kind)
    if probe_spec.input_dim != 1:
        raise ValueError("probe input must be the scalar score")
    rng = np.random.default_rng(seed)
    if nuisance_kind == "binary":
        if probe_spec.output_activation != "sigmoid":
            raise ValueError("binary nuisance needs a sigmoid probe output")
        if len(np.unique(v)) < 2:
            raise ValueError("binary nuisance has a single class")
        train, test = _stratified_split(v, 0.3, rng)
    else:
        if probe_spec.output_activation != "linear":
            raise ValueError("continuous nuisance needs a linear probe output")
        if np.std(v) == 0:
            raise ValueError("continuous nuisance is constant")
        perm = rng.permutation(s.size)
        n_test = int(round(0.3 * s.size))
        test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    mu, sd = s[train].mean(), s[train].std()
    sd = sd if sd > 0 else 1.0
    x = (s - mu) / sd
    if nuisance_kind == "binary":
        target = v
        loss = "bce"
    else:
        v_mu, v_sd = v[train].mean(), v[train].std()
        target = (v - v_mu) / v_sd
        loss = "mse"
    params = fit_small_net(probe_spec, x[train], target[train], loss, int(rng.integers(2**32)), epochs)
    pred = net.forward(params, probe_spec, x[test].reshape(-1, 1)).scores
    report = ProbeReport(nuisance_kind, probe_spec, params, train.size, test.size, seed)
    if nuisance_kind == "binary":
        if len(np.unique(v[test])) < 2:
            raise ValueError("held-out split lacks one nuisance class")
        report.roc = roc_curve(pred, v[test])
        report.auroc = auroc(pred, v[test])
    else:
        pred_v = pred * v_sd + v_mu
        resid = v[test] - pred_v
        report.mse = float(np.mean(resid**2))
        report.r2 = float(1.0 - np.sum(resid**2) / np.sum((v[test] - v[test].mean()) ** 2))
    return report


@dataclass
class KsResult:
    d_statistic: float
    n: int
    m: int


def ks_statistic(a, b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov D: largest gap between the empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return KsResult(float(np.max(np.abs(fa - fb))), a.size, b.size)


def bin_names(edges) -> list[str]:
    def g(x):
        return format(x, "g")
    names = [f"<{g(edges[0])}"]
    names += [f"{g(lo)}-{g(hi)}" for lo, hi in zip(edges[:-1], edges[1:])]
    names.append(f">{g(edges[-1])}")
    return names


def pairwise_subgroup_ks(scores, nuisance, bin_edges=(45.0, 65.0, 85.0)) -> list[tuple[tuple[str, str], KsResult]]:
    """KS statistic between every pair of nuisance bins."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    bins = np.digitize(np.asarray(nuisance, dtype=np.float64).ravel(), np.asarray(bin_edges, dtype=np.float64))
    names = bin_names(list(bin_edges))
    groups = []
    for k, name in enumerate(names):
        members = s[bins == k]
        if members.size == 0:
            raise ValueError(f"nuisance bin {name!r} is empty")
        groups.append(members)
    return [((names[i], names[j]), ks_statistic(groups[i], groups[j]))
            for i, j in itertools.combinations(range(len(names)), 2)]


@dataclass
class AttributionVector:
    values: np.ndarray
    reference_id: str
    n_samples: int


def expected_gradients(model, x, references, n_samples: int = 2000, seed: int = 0,
                       reference_id: str | None = None) -> AttributionVector:
    """Expected Gradients attributions of one input.

    Each Monte-Carlo draw pairs a reference row chosen uniformly at random
    with ``alpha ~ U(0, 1)`` and evaluates the gradient at the interpolated
    point. ``model`` is anything with ``input_gradient(X)`` (a
    :class:`~deconfound.trainers.TrainedModel`); ``references`` is a
    :class:`~deconfound.synthgen.Dataset` or an array of rows.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    refs = np.asarray(getattr(references, "X", references), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    if refs.ndim != 2 or refs.shape[0] == 0:
        raise ValueError("references must be a non-empty matrix")
    if refs.shape[1] != x.size:
        raise ValueError(f"input has {x.size} features, references have {refs.shape[1]}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, refs.shape[0], size=n_samples)
    alpha = rng.random(n_samples)[:, None]
    base = refs[picks]
    diff = x[None, :] - base
    grads = model.input_gradient(base + alpha * diff)
    values = np.mean(diff * grads, axis=0)
    if reference_id is None:
        reference_id = str(getattr(references, "metadata", {}).get("config_hash", f"{refs.shape[0]} rows"))
    return AttributionVector(values, reference_id, n_samples)


def clip_attributions(attrs, percentile: float = 99.9):
    """Clamp magnitudes at the given percentile of |attrs|, keeping signs."""
    values = getattr(attrs, "values", attrs)
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no attributions to clip")
    cap = np.percentile(np.abs(a), percentile)
    clipped = np.sign(a) * np.minimum(np.abs(a), cap)
    if isinstance(attrs, AttributionVector):
        return AttributionVector(clipped, attrs.reference_id, attrs.n_samples)
    return clipped


@dataclass
class PcaResult:
    embedding: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray


def pca_embed(hidden, k: int = 2) -> PcaResult:
    H = np.asarray(hidden, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < k or H.shape[1] < k:
        raise ValueError(f"need at least {k} rows and columns, got {H.shape}")
    mean = H.mean(axis=0)
    centered = H - mean
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    variance = sing**2 / max(H.shape[0] - 1, 1)
    components = vt[:k]
    explained = variance[:k].copy()
    tol = max(H.shape) * np.finfo(float).eps * (variance[0] if variance.size else 0.0)
    if np.sum(explained > tol) < k:
        warnings.warn(f"embedding has rank below {k}; trailing components carry no variance", RuntimeWarning)
        explained[explained <= tol] = 0.0
    return PcaResult(centered @ components.T, components, explained, mean)


def fit_logistic(X, y, tol: float = 1e-8, max_steps: int = 100_000) -> tuple[np.ndarray, float]:
    """Unregularized logistic regression by damped Newton steps.

    Stops once the gradient max-norm drops below ``tol`` or after
    ``max_steps`` steps. Returns (weights, bias).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    A = np.column_stack([X, np.ones(X.shape[0])])
    theta = np.zeros(A.shape[1])
    n = X.shape[0]

    def nll(t):
        z = A @ t
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    current = nll(theta)
    for _ in range(max_steps):
        p = net.sigmoid(A @ theta)
        grad = A.T @ (p - y) / n
        if np.max(np.abs(grad)) < tol:
            break
        hess = (A * (p * (1 - p))[:, None]).T @ A / n
        step = np.linalg.lstsq(hess + 1e-12 * np.eye(A.shape[1]), grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            value = nll(cand)
            if value <= current:
                break
            t *= 0.5
        else:
            break
        theta, current = cand, value
    return theta[:-1], float(theta[-1])


@dataclass
class OrthogonalityReport:
    """Alignment of the view and pathology directions in a 2-PC embedding.

    ``r`` is the correlation of the two weight vectors taken about zero (the
    cosine of the angle between them): 0 for orthogonal directions, +-1 for
    parallel ones.
    """

    pca: PcaResult
    view_weights: np.ndarray
    view_bias: float
    pathology_weights: np.ndarray
    pathology_bias: float
    r: float


def orthogonality(hidden, view_labels, pathology_labels) -> OrthogonalityReport:
    H = np.asarray(hidden, dtype=np.float64)
    view = _binary_labels(view_labels, H.shape[0])
    path = _binary_labels(pathology_labels, H.shape[0])
    pca = pca_embed(H, 2)
    w_view, b_view = fit_logistic(pca.embedding, view)
    w_path, b_path = fit_logistic(pca.embedding, path)
    denom = np.linalg.norm(w_view) * np.linalg.norm(w_path)
    r = float(np.dot(w_view, w_path) / denom) if denom > 0 else 0.0
    return OrthogonalityReport(pca, w_view, b_view, w_path, b_path, float(np.clip(r, -1.0, 1.0)))


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _g6(x) -> str:
    return format(float(x), ".6g")


def write_roc_csv(roc: RocResult, path) -> Path:
    return _write_rows(path, ["fpr", "tpr"], [[_g6(f), _g6(t)] for f, t in zip(roc.fpr, roc.tpr)])


def write_attributions_csv(values, path) -> Path:
    values = getattr(values, "values", values)
    return _write_rows(path, ["feature_index", "value"], [[i, _g6(v)] for i, v in enumerate(values)])


def write_ks_csv(pairs, path) -> Path:
    return _write_rows(path, ["bin_a", "bin_b", "d_stat"], [[a, b, _g6(r.d_statistic)] for (a, b), r in pairs])


def write_embedding_csv(embedding, view, label, path) -> Path:
    emb = np.asarray(embedding)
    return _write_rows(path, ["pc1", "pc2", "view", "label"],
                       [[_g6(e[0]), _g6(e[1]), int(v), int(y)] for e, v, y in zip(emb, view, label)])
