"""Training strategies for nuisance-invariant classifiers.

All trainers share one early-stopping protocol: after every epoch the
validation BCE is checked, the learning rate is divided by
``lr_decay_factor`` when it did not improve, and training stops after
``patience_epochs`` consecutive epochs without improvement. The parameters
with the lowest validation loss are returned.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import net
from .diagnostics import auroc
from .net import NetworkParams, NetworkSpec, NonFiniteError, OptimizerState
from .synthgen import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    lr_decay_factor: float = 10.0
    patience_epochs: int = 3
    val_fraction: float = 0.05
    max_epochs: int = 50
    seed: int = 0
    hidden_sizes: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if min(self.initial_lr, self.batch_size, self.lr_decay_factor, self.patience_epochs, self.max_epochs) <= 0:
            raise ValueError("learning rate, batch size, decay factor, patience and max_epochs must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")

    def classifier_spec(self, d: int, head_extra_dims: int = 0) -> NetworkSpec:
        return NetworkSpec((d, *self.hidden_sizes, 1), "relu", "sigmoid", head_extra_dims)


@dataclass(frozen=True)
class AdvConfig:
    lambda_weight: float = 1.0
    adversary_hidden: tuple[int, ...] = (32, 32, 32)
    adversary_pretrain_epochs: int = 1
    joint_epochs: int = 200
    adversary_lr: float = 1e-2
    nuisance_kind: str = "binary"

    def __post_init__(self):
        object.__setattr__(self, "adversary_hidden", tuple(self.adversary_hidden))
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be >= 0")
        if self.nuisance_kind not in ("binary", "continuous"):
            raise ValueError(f"unknown nuisance kind {self.nuisance_kind!r}")
        if self.adversary_pretrain_epochs < 0 or self.joint_epochs < 0 or self.adversary_lr <= 0:
            raise ValueError("adversary epochs must be >= 0 and adversary_lr > 0")

    @property
    def adversary_spec(self) -> NetworkSpec:
        out = "sigmoid" if self.nuisance_kind == "binary" else "linear"
        return NetworkSpec((1, *self.adversary_hidden, 1), "relu", out)

    @property
    def loss_kind(self) -> str:
        return "bce" if self.nuisance_kind == "binary" else "mse"


@dataclass
class Adversary:
    """Network predicting the nuisance from the classifier score.

    The score is standardized with statistics frozen at pretraining time
    before it enters the network; a continuous nuisance is regressed in
    standardized units.
    """

    spec: NetworkSpec
    params: NetworkParams
    score_mean: float
    score_sd: float
    target_mean: float = 0.0
    target_sd: float = 1.0

    @property
    def loss_kind(self) -> str:
        return "bce" if self.spec.output_activation == "sigmoid" else "mse"

    def inputs(self, scores) -> np.ndarray:
        return ((np.asarray(scores, dtype=np.float64) - self.score_mean) / self.score_sd).reshape(-1, 1)

    def targets(self, nuisance) -> np.ndarray:
        return ((np.asarray(nuisance, dtype=np.float64) - self.target_mean) / self.target_sd).reshape(-1, 1)

    def predict(self, scores) -> np.ndarray:
        return net.forward(self.params, self.spec, self.inputs(scores)).scores

    def loss(self, scores, nuisance) -> float:
        pred = self.predict(scores)
        t = self.targets(nuisance).ravel()
        return net.bce_loss(pred, t) if self.loss_kind == "bce" else net.mse_loss(pred, t)

    def score_gradient(self, scores, nuisance) -> tuple[float, np.ndarray]:
        """Adversary loss on a batch and its gradient w.r.t. each score."""
        trace = net.forward(self.params, self.spec, self.inputs(scores))
        t = self.targets(nuisance)
        loss = net.bce_loss(trace.output, t) if self.loss_kind == "bce" else net.mse_loss(trace.output, t)
        grads = net.backward(trace, self.params, self.spec, self.loss_kind, t)
        return loss, grads.inputs[:, 0] / self.score_sd


@dataclass
class TrainingReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    joint: list[dict] = field(default_factory=list)

    @property
    def lr_trace(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    method: str
    spec: NetworkSpec
    params: NetworkParams
    report: TrainingReport = field(default_factory=TrainingReport)
    adversary: Adversary | None = None
    covariate_mean: float | None = None
    config_hash: str = ""

    @property
    def has_covariate(self) -> bool:
        return self.spec.head_extra_dims > 0

    @property
    def covariate_weight(self) -> float | None:
        return float(self.params.weights[-1][0, -1]) if self.has_covariate else None

    @property
    def head_bias(self) -> float:
        return float(self.params.biases[-1][0])

    def _extra(self, n: int, nuisance=None):
        if not self.has_covariate:
            return None
        if nuisance is None:
            return np.full((n, 1), self.covariate_mean)
        return np.asarray(nuisance, dtype=np.float64).reshape(n, 1)

    def trace(self, X, nuisance=None) -> net.ForwardTrace:
        X = np.asarray(X, dtype=np.float64)
        return net.forward(self.params, self.spec, X, self._extra(X.shape[0], nuisance))

    def scores(self, X, nuisance=None) -> np.ndarray:
        """Classifier scores; a covariate head gets the training mean unless ``nuisance`` is given."""
        return self.trace(X, nuisance).scores

    def hidden(self, X) -> np.ndarray:
        return self.trace(X).hidden

    def input_gradient(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return net.input_gradient(self.params, self.spec, X, self._extra(X.shape[0]))


def config_digest(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def split_train_val(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split on group ids so that no group lands on both sides."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    groups = np.unique(dataset.group)
    if groups.size < 2:
        raise ValueError("need at least two distinct group ids to split")
    rng = np.random.default_rng(seed)
    n_val = min(max(1, int(round(val_fraction * groups.size))), groups.size - 1)
    val_groups = rng.permutation(groups)[:n_val]
    in_val = np.isin(dataset.group, val_groups)
    return dataset.subset(np.nonzero(~in_val)[0]), dataset.subset(np.nonzero(in_val)[0])


def _covariate_columns(dataset: Dataset, spec: NetworkSpec):
    return dataset.v.reshape(-1, 1) if spec.head_extra_dims else None


def _classifier_grads(params, spec, X, y, extra=None, weights=None, adversary=None, nuisance=None,
                      lambda_weight: float = 0.0):
    """Gradients of ``BCE(y) - lambda * adversary_loss(v | s)`` for one minibatch."""
    trace = net.forward(params, spec, X, extra)
    delta = net.output_delta(trace, spec, "bce", y, weights)
    loss = net.bce_loss(trace.output, y, weights)
    if adversary is not None and lambda_weight > 0:
        s = trace.scores
        adv_loss, d_s = adversary.score_gradient(s, nuisance)
        delta = delta - lambda_weight * (d_s * s * (1.0 - s))[:, None]
        loss -= lambda_weight * adv_loss
    if not np.isfinite(loss):
        raise NonFiniteError("classifier loss is not finite")
    return loss, net.backprop(trace, params, spec, delta)


def classifier_step(params, state, spec, X, y, config: TrainConfig, extra=None, weights=None,
                    adversary=None, nuisance=None, lambda_weight: float = 0.0):
    """One SGD step on the classifier. With ``lambda_weight == 0`` it is the plain BCE step."""
    loss, grads = _classifier_grads(params, spec, X, y, extra, weights, adversary, nuisance, lambda_weight)
    params, state = net.sgd_step(params, grads, state, config.momentum, config.weight_decay)
    return loss, params, state


def _val_loss(params, spec, val: Dataset, weights=None) -> float:
    trace = net.forward(params, spec, val.X, _covariate_columns(val, spec))
    loss = net.bce_loss(trace.scores, val.y, weights)
    if not np.isfinite(loss):
        raise NonFiniteError("validation loss is not finite")
    return loss


def fit_early_stopping(spec: NetworkSpec, train: Dataset, val: Dataset, config: TrainConfig,
                       rng: np.random.Generator, sample_weights=None, val_weights=None,
                       params: NetworkParams | None = None) -> tuple[NetworkParams, TrainingReport]:
    """Minibatch SGD under the shared early-stopping protocol.

    With ``sample_weights`` each epoch draws ``len(train)`` indices with
    replacement, with probability proportional to the weights; otherwise
    each epoch is a fresh permutation.
    """
    if params is None:
        params = net.init_params(spec, int(rng.integers(2**32)))
    state = OptimizerState.zeros(params, config.initial_lr)
    extra_all = _covariate_columns(train, spec)
    y_all = train.y.astype(np.float64)
    n = len(train)
    if sample_weights is not None:
        probs = np.asarray(sample_weights, dtype=np.float64)
        probs = probs / probs.sum()
    report = TrainingReport()
    best_params, best_val, stale = params.copy(), np.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        lr = state.lr
        order = rng.choice(n, size=n, p=probs) if sample_weights is not None else rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            extra = extra_all[idx] if extra_all is not None else None
            loss, params, state = classifier_step(params, state, spec, train.X[idx], y_all[idx], config, extra)
            total += loss * idx.size
        val_loss = _val_loss(params, spec, val, val_weights)
        improved = val_loss < best_val
        if improved:
            best_params, best_val, stale = params.copy(), val_loss, 0
            report.best_epoch = epoch
        else:
            stale += 1
            state.lr = state.lr / config.lr_decay_factor
        report.epochs.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss, "lr": lr})
        report.stop_epoch = epoch
        log.debug("epoch %d train %.5f val %.5f lr %.1e", epoch, total / n, val_loss, lr)
        if stale >= config.patience_epochs:
            break
    return best_params, report


def train_standard(dataset: Dataset, config: TrainConfig = TrainConfig()) -> TrainedModel:
    rng = np.random.default_rng(config.seed)
    train, val = split_train_val(dataset, config.val_fraction, int(rng.integers(2**32)))
    spec = config.classifier_spec(dataset.d)
    params, report = fit_early_stopping(spec, train, val, config, rng)
    return TrainedModel("standard", spec, params, report, config_hash=config_digest(config))


def _check_adversary_kind(dataset: Dataset, adv_config: AdvConfig) -> None:
    if adv_config.nuisance_kind != dataset.nuisance_kind:
        raise ValueError(f"adversary is configured for a {adv_config.nuisance_kind} nuisance "
                         f"but the dataset nuisance is {dataset.nuisance_kind}")


def _adversary_epoch(adversary: Adversary, state: OptimizerState, scores, nuisance, batch_size: int,
                     rng: np.random.Generator, momentum: float = 0.9, weight_decay: float = 1e-4):
    """One pass over all minibatches with the classifier held fixed."""
    x = adversary.inputs(scores)
    t = adversary.targets(nuisance)
    n = x.shape[0]
    order = rng.permutation(n)
    params = adversary.params
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        trace = net.forward(params, adversary.spec, x[idx])
        grads = net.backward(trace, params, adversary.spec, adversary.loss_kind, t[idx])
        params, state = net.sgd_step(params, grads, state, momentum, weight_decay)
    adversary.params = params
    return state


def pretrain_adversary(model: TrainedModel, dataset: Dataset, adv_config: AdvConfig = AdvConfig(),
                       seed: int = 0, batch_size: int = 128, momentum: float = 0.9,
                       weight_decay: float = 1e-4) -> tuple[Adversary, OptimizerState]:
    """Fit an adversary to predict the nuisance from the (frozen) classifier score."""
    _check_adversary_kind(dataset, adv_config)
    spec = adv_config.adversary_spec
    if (spec.output_activation == "sigmoid") != (dataset.nuisance_kind == "binary"):
        raise ValueError("adversary output activation does not match the nuisance kind")
    rng = np.random.default_rng(seed)
    scores = model.scores(dataset.X)
    score_sd = float(scores.std())
    if dataset.nuisance_kind == "continuous":
        t_mean, t_sd = float(dataset.v.mean()), float(dataset.v.std())
        if t_sd == 0:
            raise ValueError("continuous nuisance is constant")
    else:
        t_mean, t_sd = 0.0, 1.0
    adversary = Adversary(spec, net.init_params(spec, int(rng.integers(2**32))), float(scores.mean()),
                          score_sd if score_sd > 0 else 1.0, t_mean, t_sd)
    state = OptimizerState.zeros(adversary.params, adv_config.adversary_lr)
    for _ in range(adv_config.adversary_pretrain_epochs):
        state = _adversary_epoch(adversary, state, scores, dataset.v, batch_size, rng, momentum, weight_decay)
    return adversary, state


def _adversary_metric(adversary: Adversary, scores, nuisance) -> dict:
    pred = adversary.predict(scores)
    if adversary.loss_kind == "bce":
        if len(np.unique(nuisance)) < 2:
            return {"adversary_val_auroc": float("nan")}
        return {"adversary_val_auroc": auroc(pred, nuisance)}
    t = adversary.targets(nuisance).ravel()
    return {"adversary_val_mse": net.mse_loss(pred, t)}


def train_adversarial(dataset: Dataset, config: TrainConfig = TrainConfig(),
                      adv_config: AdvConfig = AdvConfig()) -> TrainedModel:
    """Standard pretraining, adversary pretraining, then alternating joint epochs.

    A joint epoch trains the adversary for one full pass with the classifier
    fixed, then takes a single classifier minibatch step on
    ``BCE(y | x) - lambda * adversary_loss(v | s)`` with the adversary fixed.
    The classifier returned is the one after the last joint epoch.
    """
    if adv_config.lambda_weight < 0:
        raise ValueError("lambda_weight must be >= 0")
    _check_adversary_kind(dataset, adv_config)
    rng = np.random.default_rng(config.seed)
    train, val = split_train_val(dataset, config.val_fraction, int(rng.integers(2**32)))
    spec = config.classifier_spec(dataset.d)
    params, report = fit_early_stopping(spec, train, val, config, rng)
    model = TrainedModel("adversarial", spec, params, report, config_hash=config_digest(config, adv_config))

    adversary, adv_state = pretrain_adversary(model, train, adv_config, int(rng.integers(2**32)),
                                              config.batch_size, config.momentum, config.weight_decay)
    clf_state = OptimizerState.zeros(params, config.initial_lr)
    y_train = train.y.astype(np.float64)
    n = len(train)
    batch_stream = rng.permutation(n)
    cursor = 0
    for epoch in range(1, adv_config.joint_epochs + 1):
        scores = model.scores(train.X)
        adv_state = _adversary_epoch(adversary, adv_state, scores, train.v, config.batch_size, rng,
                                     config.momentum, config.weight_decay)
        if cursor + config.batch_size > n:
            batch_stream, cursor = rng.permutation(n), 0
        idx = batch_stream[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        loss, model.params, clf_state = classifier_step(
            model.params, clf_state, spec, train.X[idx], y_train[idx], config,
            adversary=adversary, nuisance=train.v[idx], lambda_weight=adv_config.lambda_weight)
        val_scores = model.scores(val.X)
        row = {"joint_epoch": epoch, "classifier_loss": loss,
               "adversary_train_loss": adversary.loss(scores, train.v),
               "val_bce": net.bce_loss(val_scores, val.y)}
        row.update(_adversary_metric(adversary, val_scores, val.v))
        report.joint.append(row)
    model.adversary = adversary
    return model


@dataclass
class InstanceWeightTable:
    """Per-cell sampling weights P(Y=y) / P(Y=y | V=v) from empirical counts."""

    counts: dict[tuple[int, int], int]
    p_y: dict[int, float]
    p_y_given_v: dict[tuple[int, int], float]
    weights: dict[tuple[int, int], float]

    def sample_weights(self, y, v) -> np.ndarray:
        y = np.asarray(y).astype(np.int64)
        v = np.asarray(v).astype(np.int64)
        table = np.array([[self.weights[(0, 0)], self.weights[(0, 1)]],
                          [self.weights[(1, 0)], self.weights[(1, 1)]]])
        return table[y, v]


def compute_instance_weights(dataset: Dataset) -> InstanceWeightTable:
    if dataset.nuisance_kind != "binary":
        raise ValueError("instance weighting needs a binary nuisance")
    counts = dataset.cell_counts()
    empty = [cell for cell, c in counts.items() if c == 0]
    if empty:
        raise ValueError(f"empty (label, nuisance) cells: {empty}")
    n = sum(counts.values())
    n_y = {y: counts[(y, 0)] + counts[(y, 1)] for y in (0, 1)}
    n_v = {v: counts[(0, v)] + counts[(1, v)] for v in (0, 1)}
    p_y = {y: n_y[y] / n for y in (0, 1)}
    p_y_given_v = {(y, v): counts[(y, v)] / n_v[v] for y in (0, 1) for v in (0, 1)}
    # exact rational arithmetic, rounded once
    weights = {(y, v): float(Fraction(n_y[y] * n_v[v], n * counts[(y, v)])) for y in (0, 1) for v in (0, 1)}
    return InstanceWeightTable(counts, p_y, p_y_given_v, weights)


def train_instance_weighted(dataset: Dataset, config: TrainConfig = TrainConfig()) -> TrainedModel:
    """Standard protocol with minibatches resampled in proportion to instance weights.

    The validation loss is weighted by the same table so that early stopping
    tracks the reweighted objective.
    """
    table = compute_instance_weights(dataset)
    rng = np.random.default_rng(config.seed)
    train, val = split_train_val(dataset, config.val_fraction, int(rng.integers(2**32)))
    spec = config.classifier_spec(dataset.d)
    params, report = fit_early_stopping(spec, train, val, config, rng,
                                        sample_weights=table.sample_weights(train.y, train.v),
                                        val_weights=table.sample_weights(val.y, val.v))
    return TrainedModel("instance_weighting", spec, params, report, config_hash=config_digest(config))


def match_subsample(dataset: Dataset, seed: int = 0) -> Dataset:
    """Drop negatives from the lower-base-rate nuisance group until base rates match."""
    counts = dataset.cell_counts()
    n_v = {v: counts[(0, v)] + counts[(1, v)] for v in (0, 1)}
    if min(n_v.values()) == 0:
        raise ValueError("matching needs both nuisance groups")
    rate = {v: Fraction(counts[(1, v)], n_v[v]) for v in (0, 1)}
    if rate[0] == rate[1]:
        return dataset
    low = 0 if rate[0] < rate[1] else 1
    target = rate[1 - low]
    if counts[(1, low)] == 0 or target == 1:
        raise ValueError("matching is infeasible: the low-rate group has no positives to keep")
    pos = counts[(1, low)]
    keep_neg = int(round(pos * (1 - target) / target))
    keep_neg = min(max(keep_neg, 0), counts[(0, low)])
    rng = np.random.default_rng(seed)
    neg_idx = np.nonzero((dataset.y == 0) & (dataset.v == low))[0]
    drop = rng.choice(neg_idx, size=neg_idx.size - keep_neg, replace=False)
    keep = np.setdiff1d(np.arange(len(dataset)), drop)
    out = dataset.subset(keep)
    out.metadata["matched_deleted"] = int(drop.size)
    return out


def train_matched(dataset: Dataset, config: TrainConfig = TrainConfig()) -> TrainedModel:
    model = train_standard(match_subsample(dataset, config.seed), config)
    model.method = "matching"
    return model


def train_covariate(dataset: Dataset, config: TrainConfig = TrainConfig()) -> TrainedModel:
    """Standard protocol with the nuisance appended to the last hidden layer."""
    rng = np.random.default_rng(config.seed)
    train, val = split_train_val(dataset, config.val_fraction, int(rng.integers(2**32)))
    spec = config.classifier_spec(dataset.d, head_extra_dims=1)
    params, report = fit_early_stopping(spec, train, val, config, rng)
    return TrainedModel("covariate", spec, params, report, covariate_mean=float(train.v.mean()),
                        config_hash=config_digest(config))


def eval_covariate(model: TrainedModel, dataset: Dataset) -> np.ndarray:
    """Scores with the nuisance replaced by its training mean for every sample."""
    if not model.has_covariate or model.covariate_mean is None:
        raise ValueError("model has no covariate head")
    return model.scores(dataset.X)


TRAINERS = {
    "standard": train_standard,
    "instance_weighting": train_instance_weighted,
    "matching": train_matched,
    "covariate": train_covariate,
}


def train(method: str, dataset: Dataset, config: TrainConfig = TrainConfig(),
          adv_config: AdvConfig | None = None) -> TrainedModel:
    if method == "adversarial":
        return train_adversarial(dataset, config, adv_config or AdvConfig(nuisance_kind=dataset.nuisance_kind))
    try:
        trainer = TRAINERS[method]
    except KeyError:
        raise ValueError(f"unknown training method {method!r}") from None
    return trainer(dataset, config)


def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def save_model(model: TrainedModel, path) -> Path:
    """Write a self-describing JSON model file; floats round-trip exactly."""
    doc = {
        "format": "deconfound-model/1",
        "method": model.method,
        "config_hash": model.config_hash,
        "classifier": {"spec": model.spec.to_dict(), "params": _floats(model.params.flat())},
        "covariate_mean": model.covariate_mean,
        "adversary": None,
        "report": model.report.to_dict(),
    }
    if model.adversary is not None:
        adv = model.adversary
        doc["adversary"] = {
            "spec": adv.spec.to_dict(), "params": _floats(adv.params.flat()),
            "score_mean": adv.score_mean, "score_sd": adv.score_sd,
            "target_mean": adv.target_mean, "target_sd": adv.target_sd,
        }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n", encoding="utf-8")
    return path


def load_model(path) -> TrainedModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "deconfound-model/1":
        raise ValueError(f"{path}: not a model file")
    spec = NetworkSpec.from_dict(doc["classifier"]["spec"])
    params = NetworkParams.from_flat(spec, doc["classifier"]["params"])
    rep = doc.get("report") or {}
    report = TrainingReport(rep.get("epochs", []), rep.get("best_epoch", 0), rep.get("stop_epoch", 0),
                            rep.get("joint", []))
    adversary = None
    if doc.get("adversary"):
        a = doc["adversary"]
        adv_spec = NetworkSpec.from_dict(a["spec"])
        adversary = Adversary(adv_spec, NetworkParams.from_flat(adv_spec, a["params"]), a["score_mean"],
                              a["score_sd"], a["target_mean"], a["target_sd"])
    return TrainedModel(doc["method"], spec, params, report, adversary, doc.get("covariate_mean"),
                        doc.get("config_hash", ""))


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
