"""Dense feedforward networks with analytic gradients and SGD with momentum.

Everything is float64. Layers are stored as (out_dim, in_dim) weight
matrices so that a batch ``X`` of shape (n, in_dim) maps to ``X @ W.T + b``.

The final layer may take extra input columns (``head_extra_dims``) that are
appended to the last hidden representation before the output affine map.
This is how a nuisance covariate is fed straight into the classification
head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCORE_EPS = 1e-7


class NonFiniteError(ArithmeticError):
    """Raised when a loss or gradient contains NaN or inf."""


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"
    head_extra_dims: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("sigmoid", "linear"):
            raise ValueError(f"unsupported output activation {self.output_activation!r}")
        if self.head_extra_dims < 0:
            raise ValueError("head_extra_dims must be >= 0")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        for i in range(self.n_layers):
            fan_in = self.layer_sizes[i]
            if i == self.n_layers - 1:
                fan_in += self.head_extra_dims
            shapes.append((self.layer_sizes[i + 1], fan_in))
        return shapes

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "head_extra_dims": self.head_extra_dims,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            layer_sizes=tuple(d["layer_sizes"]),
            hidden_activation=d.get("hidden_activation", "relu"),
            output_activation=d.get("output_activation", "sigmoid"),
            head_extra_dims=int(d.get("head_extra_dims", 0)),
        )


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check(self, spec: NetworkSpec) -> None:
        shapes = spec.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("parameter layer count does not match spec")
        for w, b, shape in zip(self.weights, self.biases, shapes):
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"parameter shape {w.shape}/{b.shape} does not match {shape}")

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    @classmethod
    def from_flat(cls, spec: NetworkSpec, flat) -> "NetworkParams":
        flat = np.asarray(flat, dtype=np.float64)
        weights, biases, pos = [], [], 0
        for out_dim, in_dim in spec.layer_shapes():
            n = out_dim * in_dim
            weights.append(flat[pos:pos + n].reshape(out_dim, in_dim).copy())
            pos += n
            biases.append(flat[pos:pos + out_dim].copy())
            pos += out_dim
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return cls(weights, biases)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.weights + self.biases)


@dataclass
class ForwardTrace:
    """Activations of one forward pass.

    ``pre[i]`` and ``post[i]`` are the pre- and post-activation of layer ``i``;
    ``post[-1]`` is the network output. ``head_extra`` holds the columns that
    were appended to the final layer input, if any.
    """

    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    head_extra: np.ndarray | None = None

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]

    @property
    def scores(self) -> np.ndarray:
        return self.post[-1][:, 0]

    @property
    def hidden(self) -> np.ndarray:
        """Last hidden layer post-activation (the inputs when there is none)."""
        return self.post[-2] if len(self.post) > 1 else self.inputs


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray | None = None
    output_delta: np.ndarray | None = None

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.weights + self.biases)


@dataclass
class OptimizerState:
    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]
    lr: float = 1e-2

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")

    @classmethod
    def zeros(cls, params: NetworkParams, lr: float) -> "OptimizerState":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
            float(lr),
        )


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the open interval (0, 1) in floating point; moves values by < 1 ulp
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def init_params(spec: NetworkSpec, seed: int, scheme: str = "scaled-uniform") -> NetworkParams:
    """Draw weights uniformly in +-sqrt(6 / (fan_in + fan_out)); biases start at zero."""
    if scheme != "scaled-uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_dim, in_dim in spec.layer_shapes():
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return NetworkParams(weights, biases)


def forward(params: NetworkParams, spec: NetworkSpec, batch, head_extra=None) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if spec.input_dim == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"batch has shape {x.shape}, network expects {spec.input_dim} columns")
    if spec.head_extra_dims:
        if head_extra is None:
            raise ValueError("network head expects extra covariate columns")
        head_extra = np.asarray(head_extra, dtype=np.float64).reshape(x.shape[0], spec.head_extra_dims)
    elif head_extra is not None:
        raise ValueError("network head takes no extra columns")

    pre, post = [], []
    a = x
    last = spec.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i == last and head_extra is not None:
            a = np.concatenate([a, head_extra], axis=1)
        z = a @ w.T + b
        if i < last:
            a = np.maximum(z, 0.0)
        elif spec.output_activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
        pre.append(z)
        post.append(a)
    return ForwardTrace(x, pre, post, head_extra)


def _as_column(v, n: int, k: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size != n * k:
        raise ValueError(f"expected {n * k} values, got {v.size}")
    return v.reshape(n, k)


def _normalized_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != n:
        raise ValueError(f"length mismatch: {w.size} weights for {n} samples")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    return w / w.sum()


def bce_loss(scores, labels, weights=None) -> float:
    """Mean binary cross-entropy; scores are clamped to [eps, 1 - eps] first.

    With weights the mean is weight-normalized, so uniform weights of any
    magnitude give the unweighted loss.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        if s.size != y.size:
            raise ValueError(f"length mismatch: {s.size} scores, {y.size} labels")
        y = y.reshape(s.shape)
    s = np.clip(s, SCORE_EPS, 1.0 - SCORE_EPS)
    per = -(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))
    if per.ndim > 1:
        per = per.sum(axis=1)
    return float(np.dot(_normalized_weights(weights, per.shape[0]), per))


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} targets")
    return float(np.mean((p - t) ** 2))


def output_delta(trace: ForwardTrace, spec: NetworkSpec, loss_kind: str, labels, weights=None) -> np.ndarray:
    """Gradient of the loss w.r.t. the final pre-activation."""
    out = trace.output
    n, k = out.shape
    y = _as_column(labels, n, k)
    if loss_kind == "bce":
        if spec.output_activation != "sigmoid":
            raise ValueError("bce loss needs a sigmoid output")
        # exact for the unclamped loss; differs only within SCORE_EPS of 0 or 1
        return (out - y) * _normalized_weights(weights, n)[:, None]
    if loss_kind == "mse":
        if spec.output_activation != "linear":
            raise ValueError("mse loss needs a linear output")
        if weights is not None:
            raise ValueError("mse loss is unweighted")
        return 2.0 * (out - y) / (n * k)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def backprop(trace: ForwardTrace, params: NetworkParams, spec: NetworkSpec, delta) -> Gradients:
    """Push ``delta`` (dL/d final pre-activation) back through the network."""
    if len(params.weights) != len(trace.pre):
        raise ValueError("trace and params have different layer counts")
    delta = np.asarray(delta, dtype=np.float64)
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    out_delta = delta
    for i in range(n_layers - 1, -1, -1):
        a_prev = trace.post[i - 1] if i > 0 else trace.inputs
        if i == n_layers - 1 and trace.head_extra is not None:
            a_prev = np.concatenate([a_prev, trace.head_extra], axis=1)
        if params.weights[i].shape[1] != a_prev.shape[1]:
            raise ValueError("trace does not match params")
        gw[i] = delta.T @ a_prev
        gb[i] = delta.sum(axis=0)
        da = delta @ params.weights[i]
        if i == n_layers - 1 and trace.head_extra is not None:
            da = da[:, : da.shape[1] - trace.head_extra.shape[1]]
        if i > 0:
            delta = da * (trace.pre[i - 1] > 0)
        else:
            d_inputs = da
    return Gradients(gw, gb, d_inputs, out_delta)


def backward(trace: ForwardTrace, params: NetworkParams, spec: NetworkSpec, loss_kind: str,
             labels, weights=None) -> Gradients:
    return backprop(trace, params, spec, output_delta(trace, spec, loss_kind, labels, weights))


def sgd_step(params: NetworkParams, grads: Gradients, state: OptimizerState,
             momentum: float = 0.9, weight_decay: float = 1e-4) -> tuple[NetworkParams, OptimizerState]:
    """One heavy-ball step; weight decay touches weights only, never biases."""
    if not grads.all_finite():
        raise NonFiniteError("non-finite gradient")
    new_w, new_b, vel_w, vel_b = [], [], [], []
    for w, b, gw, gb, vw, vb in zip(params.weights, params.biases, grads.weights, grads.biases,
                                    state.velocity_w, state.velocity_b):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError("gradient shape does not match params")
        vw = momentum * vw + gw + weight_decay * w
        vb = momentum * vb + gb
        new_w.append(w - state.lr * vw)
        new_b.append(b - state.lr * vb)
        vel_w.append(vw)
        vel_b.append(vb)
    return NetworkParams(new_w, new_b), OptimizerState(vel_w, vel_b, state.lr)


def input_gradient(params: NetworkParams, spec: NetworkSpec, batch, head_extra=None) -> np.ndarray:
    """Per-sample gradient of the first output w.r.t. the inputs, shape (n, input_dim)."""
    trace = forward(params, spec, batch, head_extra)
    out = trace.output
    delta = np.zeros_like(out)
    delta[:, 0] = out[:, 0] * (1.0 - out[:, 0]) if spec.output_activation == "sigmoid" else 1.0
    return backprop(trace, params, spec, delta).inputs
