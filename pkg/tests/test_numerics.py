import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multimodn.errors import ContractError, NumericError, ShapeError
from multimodn.numerics import (
    AdamState,
    DenseLayer,
    DropoutPlan,
    adam_step,
    bce_with_logits,
    clip_by_global_norm,
    dense_backward,
    dense_forward,
    finite_diff_grad,
    global_norm,
    glorot_layer,
    max_relative_error,
    mlp_backward,
    mlp_forward,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    task_loss,
)
from oracles import mlp_reference


def test_dense_forward_identity_relu():
    layer = DenseLayer(np.eye(2), np.zeros(2), "relu")
    out, _ = dense_forward(layer, [1.0, -2.0])
    assert out.tolist() == [1.0, 0.0]


@pytest.mark.parametrize("act", ["relu", "sigmoid", "identity"])
def test_zero_layer(act):
    layer = DenseLayer(np.zeros((3, 4)), np.zeros(3), act)
    out, _ = dense_forward(layer, np.arange(4.0))
    expected = 0.5 if act == "sigmoid" else 0.0
    assert np.all(out == expected)


def test_sigmoid_of_zero():
    layer = DenseLayer(np.array([[1.0, 1.0]]), np.zeros(1), "sigmoid")
    out, _ = dense_forward(layer, [0.0, 0.0])
    assert out.tolist() == [0.5]


def test_shape_error_names_both_shapes():
    layer = DenseLayer(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(ShapeError, match=r"\(5,\).*\(3, 4\)"):
        dense_forward(layer, np.zeros(5))


def test_bad_bias_shape():
    with pytest.raises(ShapeError):
        DenseLayer(np.zeros((3, 4)), np.zeros(4))


def test_identity_backward():
    layer = DenseLayer(np.eye(3), np.zeros(3), "identity")
    x = np.array([1.0, 2.0, 3.0])
    g = np.array([0.5, -1.0, 2.0])
    _, cache = dense_forward(layer, x)
    gx, grads = dense_backward(layer, cache, g)
    assert np.array_equal(gx, g)
    assert np.array_equal(grads["weight"], np.outer(g, x))
    assert np.array_equal(grads["bias"], g)


def test_relu_gate_backward():
    layer = DenseLayer(np.eye(2), np.zeros(2), "relu")
    _, cache = dense_forward(layer, [-1.0, 2.0])
    _, grads = dense_backward(layer, cache, np.array([5.0, 5.0]))
    assert grads["bias"].tolist() == [0.0, 5.0]


def test_cache_from_other_layer_rejected():
    a = DenseLayer(np.eye(2), np.zeros(2))
    b = DenseLayer(np.zeros((3, 2)), np.zeros(3))
    _, cache = dense_forward(a, [1.0, 1.0])
    with pytest.raises(ContractError):
        dense_backward(b, cache, np.ones(2))


@pytest.mark.parametrize("act", ["relu", "sigmoid", "softmax", "identity"])
def test_dense_backward_matches_finite_differences(act):
    rng = np.random.default_rng(0)
    layer = glorot_layer(rng, 4, 3, act)
    layer.bias[:] = rng.normal(size=3) * 0.1
    x = rng.normal(size=4)
    probe = rng.normal(size=3)

    def f():
        return float(dense_forward(layer, x)[0] @ probe)

    _, cache = dense_forward(layer, x)
    _, g = dense_backward(layer, cache, probe)
    num = finite_diff_grad(f, {"weight": layer.weights, "bias": layer.bias})
    assert max_relative_error(g, num) < 1e-4


def test_mlp_matches_loop_reference():
    rng = np.random.default_rng(1)
    layers = [glorot_layer(rng, 5, 7, "relu"), glorot_layer(rng, 7, 7, "relu"), glorot_layer(rng, 7, 3, "softmax")]
    x = rng.normal(size=5)
    out, _ = mlp_forward(layers, x)
    assert np.allclose(out, mlp_reference(layers, x), atol=1e-14)
    batch = rng.normal(size=(6, 5))
    out_b, _ = mlp_forward(layers, batch)
    for i in range(6):
        assert np.allclose(out_b[i], mlp_reference(layers, batch[i]), atol=1e-14)


def test_mlp_backward_from_preactivation():
    rng = np.random.default_rng(2)
    layers = [glorot_layer(rng, 4, 6, "relu"), glorot_layer(rng, 6, 1, "sigmoid")]
    x = rng.normal(size=(5, 4))
    y = np.array([0, 1, 1, 0, 1.0])

    def loss():
        _, caches = mlp_forward(layers, x)
        return float(bce_with_logits(caches[-1].preact[:, 0], y)[0].sum())

    _, caches = mlp_forward(layers, x)
    _, g = bce_with_logits(caches[-1].preact[:, 0], y)
    _, grads = mlp_backward(layers, caches, g[:, None], from_preactivation=True)
    params = {f"{i}.{k}": getattr(l, a) for i, l in enumerate(layers) for k, a in (("weight", "weights"), ("bias", "bias"))}
    analytic = {f"{i}.{k}": grads[i][k] for i in range(2) for k in ("weight", "bias")}
    assert max_relative_error(analytic, finite_diff_grad(loss, params)) < 1e-4


def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(softmax([7.0, 7.0, 7.0]), [1 / 3] * 3)
    big = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)
    with pytest.raises(ContractError):
        softmax([])


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(z, c):
    p = softmax(z)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(p, softmax(z + c), atol=1e-12)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(all="raise"):
        s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_bce_from_logits_is_stable():
    loss, grad = bce_with_logits(np.array([800.0, -800.0]), np.array([0.0, 1.0]))
    assert np.allclose(loss, [800.0, 800.0])
    assert np.allclose(grad, [1.0, -1.0])


def test_softmax_cross_entropy_value():
    loss, grad = softmax_cross_entropy(np.array([[0.0, 0.0]]), [1])
    assert loss[0] == pytest.approx(np.log(2))
    assert np.allclose(grad, [[0.5, -0.5]])


def test_task_loss_single_and_batch_agree():
    z = np.array([[0.3], [-1.2]])
    losses, g = task_loss("regression", z, [1.0, 0.0])
    single, gs = task_loss("regression", z[1], 0.0)
    assert single == pytest.approx(losses[1])
    assert np.allclose(gs, g[1])


def test_clip_examples():
    g = {"a": np.full(4, 5.0)}  # norm 10
    assert np.allclose(clip_by_global_norm(g, 5.0)["a"], 2.5)
    small = {"a": np.array([1.0, 2.0, 2.0])}  # norm 3
    assert np.array_equal(clip_by_global_norm(small, 5.0)["a"], small["a"])
    assert np.allclose(clip_by_global_norm({"a": np.array([3.0, 4.0])}, 1.0)["a"], [0.6, 0.8])


def test_clip_rejects_non_finite():
    with pytest.raises(NumericError, match="w2"):
        clip_by_global_norm({"w1": np.ones(2), "w2": np.array([np.nan])}, 1.0)


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)), st.floats(0.1, 10))
def test_clip_idempotent(g, max_norm):
    once = clip_by_global_norm({"g": g}, max_norm)
    twice = clip_by_global_norm(once, max_norm)
    assert np.allclose(once["g"], twice["g"], rtol=1e-12, atol=1e-300)
    assert global_norm(once) <= max_norm * (1 + 1e-12)


def test_adam_zero_gradient_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState(learning_rate=0.1)
    state.m["w"] = np.array([0.5, 0.5])
    state.v["w"] = np.array([0.5, 0.5])
    adam_step(p, {"w": np.zeros(2)}, state)
    assert np.allclose(state.m["w"], 0.45) and np.all(state.v["w"] < 0.5)


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.0])}
    state = AdamState(learning_rate=0.1)
    adam_step(p, {"w": np.array([2.0])}, state)
    assert p["w"][0] == pytest.approx(-0.1, abs=1e-6)


def test_adam_counter_and_determinism():
    rng = np.random.default_rng(0)
    g = {"w": rng.normal(size=3)}
    runs = []
    for _ in range(2):
        p = {"w": np.ones(3)}
        state = AdamState()
        adam_step(p, g, state)
        adam_step(p, g, state)
        assert state.t == 2
        runs.append(p["w"].copy())
    assert np.array_equal(runs[0], runs[1])


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamState())


def test_finite_diff_examples():
    x = {"x": np.array([3.0])}
    g = finite_diff_grad(lambda: float(x["x"][0] ** 2), x)
    assert abs(g["x"][0] - 6.0) < 1e-6
    assert x["x"][0] == 3.0
    assert np.all(finite_diff_grad(lambda: 4.0, {"y": np.ones(3)})["y"] == 0)


def test_dropout_eval_is_noop_and_train_unbiased():
    rng = np.random.default_rng(0)
    layer = glorot_layer(rng, 3, 5, "relu")
    x = np.abs(rng.normal(size=3)) + 1.0
    base, _ = dense_forward(layer, x, DropoutPlan(0.4, "eval"))
    ref, _ = dense_forward(layer, x)
    assert np.array_equal(base, ref)
    plan = DropoutPlan(0.4, "train", seed=5)
    draws = np.array([dense_forward(layer, x, plan)[0] for _ in range(20000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - ref) <= 3 * se + 1e-12)


def test_dropout_rate_validation():
    with pytest.raises(ContractError):
        DropoutPlan(1.0, "train")
