import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deconfound import net
from deconfound.net import (
    Gradients, NetworkParams, NetworkSpec, NonFiniteError, OptimizerState,
    backward, bce_loss, forward, init_params, mse_loss, sgd_step,
)


def loss_of(params, spec, X, y, kind, extra=None):
    out = forward(params, spec, X, extra).output
    return bce_loss(out, y) if kind == "bce" else mse_loss(out, y)


def fd_gradient(params, spec, X, y, kind, extra=None, h=1e-5):
    flat = params.flat()
    g = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        g[i] = (loss_of(NetworkParams.from_flat(spec, up), spec, X, y, kind, extra)
                - loss_of(NetworkParams.from_flat(spec, down), spec, X, y, kind, extra)) / (2 * h)
    return g


def analytic_flat(grads: Gradients) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(grads.weights, grads.biases)])


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_case(rng):
    n_hidden = int(rng.integers(0, 4))
    hidden = [int(rng.integers(1, 9)) for _ in range(n_hidden)]
    d = int(rng.integers(1, 6))
    linear = bool(rng.random() < 0.3)
    spec = NetworkSpec((d, *hidden, 1), output_activation="linear" if linear else "sigmoid")
    params = init_params(spec, int(rng.integers(1 << 30)))
    for b in params.biases:
        b += rng.normal(0, 0.1, size=b.shape)
    n = int(rng.integers(1, 9))
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n) if linear else rng.integers(0, 2, size=n).astype(float)
    return spec, params, X, y, "mse" if linear else "bce"


def test_gradients_match_finite_differences_50_cases():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(50):
        spec, params, X, y, kind = random_case(rng)
        trace = forward(params, spec, X)
        grads = backward(trace, params, spec, kind, y)
        worst = max(worst, max_rel_err(analytic_flat(grads), fd_gradient(params, spec, X, y, kind)))
    assert worst < 1e-4


def test_gradient_with_head_covariate_matches_finite_differences():
    rng = np.random.default_rng(5)
    spec = NetworkSpec((3, 5, 4, 1), head_extra_dims=1)
    params = init_params(spec, 3)
    X = rng.normal(size=(6, 3))
    extra = rng.integers(0, 2, size=(6, 1)).astype(float)
    y = np.array([1, 0, 1, 1, 0, 0], dtype=float)
    grads = backward(forward(params, spec, X, extra), params, spec, "bce", y)
    fd = fd_gradient(params, spec, X, y, "bce", extra)
    assert max_rel_err(analytic_flat(grads), fd) < 1e-4


def test_weighted_bce_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    spec = NetworkSpec((4, 6, 1))
    params = init_params(spec, 0)
    X = rng.normal(size=(7, 4))
    y = rng.integers(0, 2, size=7).astype(float)
    w = rng.uniform(0.1, 3.0, size=7)
    grads = backward(forward(params, spec, X), params, spec, "bce", y, w)
    flat = params.flat()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += 1e-5
        down[i] -= 1e-5
        f = lambda p: bce_loss(forward(NetworkParams.from_flat(spec, p), spec, X).output, y, w)
        fd[i] = (f(up) - f(down)) / 2e-5
    assert max_rel_err(analytic_flat(grads), fd) < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    spec = NetworkSpec((5, 8, 1))
    params = init_params(spec, 4)
    X = rng.normal(size=(3, 5))
    g = net.input_gradient(params, spec, X)
    for j in range(5):
        e = np.zeros(5)
        e[j] = 1e-5
        fd = (forward(params, spec, X + e).scores - forward(params, spec, X - e).scores) / 2e-5
        np.testing.assert_allclose(g[:, j], fd, rtol=1e-5, atol=1e-10)


def test_init_is_deterministic_and_bounded():
    spec = NetworkSpec((4, 8, 1))
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert a.flat().tobytes() == b.flat().tobytes()
    assert np.all(np.abs(a.weights[0]) <= math.sqrt(6 / 12))
    assert np.all(np.abs(a.weights[1]) <= math.sqrt(6 / 9))
    assert all(np.all(bias == 0) for bias in a.biases)
    assert init_params(NetworkSpec((1, 1)), 3).biases[0][0] == 0.0


def test_forward_simple_cases():
    spec = NetworkSpec((3, 4, 1))
    zero = NetworkParams([np.zeros((4, 3)), np.zeros((1, 4))], [np.zeros(4), np.zeros(1)])
    assert np.all(forward(zero, spec, np.ones((5, 3))).scores == 0.5)
    ident = NetworkSpec((1, 1), output_activation="linear")
    p = NetworkParams([np.ones((1, 1))], [np.zeros(1)])
    assert forward(p, ident, np.array([[3.0]])).scores[0] == 3.0


def test_forward_matches_elementwise_reimplementation():
    rng = np.random.default_rng(0)
    spec = NetworkSpec((3, 4, 2, 1))
    params = init_params(spec, 11)
    X = rng.normal(size=(5, 3))
    expected = []
    for x in X:
        a = list(x)
        for layer, (W, b) in enumerate(zip(params.weights, params.biases)):
            z = [sum(W[o, i] * a[i] for i in range(len(a))) + b[o] for o in range(W.shape[0])]
            a = [max(v, 0.0) for v in z] if layer < 2 else [1 / (1 + math.exp(-v)) for v in z]
        expected.append(a[0])
    np.testing.assert_allclose(forward(params, spec, X).scores, expected, rtol=1e-12)


def test_forward_rejects_wrong_width():
    spec = NetworkSpec((3, 1))
    with pytest.raises(ValueError):
        forward(init_params(spec, 0), spec, np.zeros((2, 4)))


def test_bce_examples():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2))
    assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, rel=1e-12)
    assert bce_loss([1.0, 0.0], [1, 0]) <= -math.log(1 - 1e-7) + 1e-15
    assert math.isfinite(bce_loss([0.0, 1.0], [1, 0]))


def test_mse_examples():
    assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse_loss([0.0], [2.0]) == 4.0
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=13), rng.normal(size=13)
    assert mse_loss(p, t) == pytest.approx(sum((a - b) ** 2 for a, b in zip(p, t)) / 13, rel=1e-12)


def test_zero_input_gives_symmetric_gradients_across_identical_units():
    spec = NetworkSpec((2, 3, 1))
    params = NetworkParams([np.full((3, 2), 0.5), np.full((1, 3), 0.7)], [np.full(3, 0.1), np.zeros(1)])
    grads = backward(forward(params, spec, np.zeros((4, 2))), params, spec, "bce", np.array([1, 0, 1, 1.0]))
    assert np.all(grads.weights[1] == grads.weights[1][0, 0])
    assert np.all(grads.biases[0] == grads.biases[0][0])


def test_zero_weights_give_zero_weight_gradients_below_the_output():
    spec = NetworkSpec((2, 3, 1))
    params = NetworkParams([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)])
    grads = backward(forward(params, spec, np.ones((4, 2))), params, spec, "bce", np.ones(4))
    assert np.all(grads.weights[0] == 0) and np.all(grads.weights[1] == 0)


def _scalar_params(w, b):
    return NetworkParams([np.array([[w]])], [np.array([b])])


def test_sgd_hand_arithmetic():
    params = _scalar_params(2.0, 1.0)
    grads = Gradients([np.array([[0.5]])], [np.array([0.25])])
    state = OptimizerState([np.array([[0.1]])], [np.array([0.2])], lr=0.1)
    new, st2 = sgd_step(params, grads, state, momentum=0.9, weight_decay=0.01)
    v_w = 0.9 * 0.1 + 0.5 + 0.01 * 2.0
    v_b = 0.9 * 0.2 + 0.25
    assert new.weights[0][0, 0] == pytest.approx(2.0 - 0.1 * v_w, abs=1e-15)
    assert new.biases[0][0] == pytest.approx(1.0 - 0.1 * v_b, abs=1e-15)
    assert st2.velocity_w[0][0, 0] == pytest.approx(v_w)


def test_sgd_noop_cases():
    params = _scalar_params(2.0, 1.0)
    zero = Gradients([np.zeros((1, 1))], [np.zeros(1)])
    new, _ = sgd_step(params, zero, OptimizerState.zeros(params, 0.1), weight_decay=0.0)
    assert new.flat().tolist() == params.flat().tolist()
    g = Gradients([np.ones((1, 1))], [np.ones(1)])
    new, _ = sgd_step(params, g, OptimizerState.zeros(params, 0.0))
    assert new.flat().tolist() == params.flat().tolist()


def test_sgd_rejects_non_finite():
    params = _scalar_params(1.0, 0.0)
    with pytest.raises(NonFiniteError):
        sgd_step(params, Gradients([np.array([[np.nan]])], [np.zeros(1)]), OptimizerState.zeros(params, 0.1))


def test_sgd_sequences_are_bit_identical():
    def run():
        rng = np.random.default_rng(0)
        spec = NetworkSpec((3, 4, 1))
        params = init_params(spec, 1)
        state = OptimizerState.zeros(params, 0.05)
        for _ in range(20):
            X = rng.normal(size=(8, 3))
            y = rng.integers(0, 2, size=8).astype(float)
            params, state = sgd_step(params, backward(forward(params, spec, X), params, spec, "bce", y), state)
        return params.flat().tobytes()
    assert run() == run()


def test_spec_roundtrip_and_validation():
    spec = NetworkSpec((4, 3, 1), output_activation="linear", head_extra_dims=2)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    assert spec.layer_shapes() == [(3, 4), (1, 5)]
    for bad in [dict(layer_sizes=(3,)), dict(layer_sizes=(3, 0, 1)), dict(layer_sizes=(2, 1), output_activation="tanh")]:
        with pytest.raises(ValueError):
            NetworkSpec(**bad)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_sigmoid_strictly_inside_unit_interval(zs):
    s = net.sigmoid(np.array(zs))
    assert np.all(s > 0) and np.all(s < 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30),
       st.floats(0.01, 100))
def test_uniform_weights_equal_unweighted_bce(pairs, c):
    s = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    loss = bce_loss(s, y)
    assert math.isfinite(loss)
    assert bce_loss(s, y, np.full(len(pairs), c)) == pytest.approx(loss, rel=1e-12, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(1, 10))
def test_forward_is_pure(seed, d, n):
    spec = NetworkSpec((d, 6, 1))
    params = init_params(spec, seed)
    X = np.random.default_rng(seed).normal(size=(n, d))
    assert forward(params, spec, X).scores.tobytes() == forward(params, spec, X.copy()).scores.tobytes()
