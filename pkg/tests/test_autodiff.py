import numpy as np
import pytest

from histoage.autodiff import ops
from histoage.autodiff.gradcheck import numerical_gradient, relative_error
from histoage.autodiff.optim import SGD, cosine_lr, sgd_step
from histoage.autodiff.tensor import Parameter, Tensor, backward, no_grad, stop_gradient
from histoage.utils.errors import NonFiniteGradientError, NumericFailure, ShapeError

TOLERANCE = 1e-4


def _check(loss_fn, params):
    analytic = backward(loss_fn(), params)
    numeric = numerical_gradient(lambda: loss_fn().item(), params)
    for name in params:
        err = relative_error(analytic[name], numeric[name])
        assert err.max() < TOLERANCE, f"{name}: max relative error {err.max():.2e}"


def test_fully_connected_chain_gradients(rng):
    params = {
        "x": Parameter(rng.normal(size=(4, 5)), "x"),
        "w": Parameter(rng.normal(size=(5, 3)), "w"),
        "b": Parameter(rng.normal(size=3), "b"),
    }

    def loss():
        y = ops.fully_connected(params["x"], params["w"], params["b"])
        return ops.mean(ops.mul(y, y))

    _check(loss, params)


def test_conv_average_pool_normalize_gradients(rng):
    params = {
        "x": Parameter(rng.normal(size=(2, 4, 4, 2)), "x"),
        "w": Parameter(rng.normal(size=(3, 3, 2, 3)), "w"),
        "b": Parameter(rng.normal(size=3), "b"),
    }
    target = Tensor(rng.normal(size=(2, 3)))

    def loss():
        h = ops.global_average_pool(ops.conv2d(params["x"], params["w"], params["b"], padding="same"))
        return ops.sum(ops.mul(ops.l2_normalize(h), target))

    _check(loss, params)


def test_valid_convolution_gradients(rng):
    params = {"w": Parameter(rng.normal(size=(3, 3, 1, 2)), "w")}
    x = Tensor(rng.normal(size=(1, 5, 5, 1)))

    def loss():
        y = ops.conv2d(x, params["w"], padding="valid")
        return ops.mean(ops.mul(y, y))

    assert ops.conv2d(x, params["w"], padding="valid").shape == (1, 3, 3, 2)
    _check(loss, params)


def test_max_pool_and_relu_gradients(rng):
    # well separated values keep the finite differences away from kinks and ties
    values = rng.permutation(np.arange(1, 33, dtype=np.float64)) * 0.1 - 1.65
    params = {"x": Parameter(values.reshape(2, 4, 2, 2), "x")}
    weights = Tensor(rng.normal(size=(2, 2, 1, 2)))

    def loss():
        pooled = ops.max_pool(ops.relu(params["x"]))
        return ops.sum(ops.mul(pooled, weights))

    _check(loss, params)


def test_batch_norm_training_gradients(rng):
    state = ops.BatchNormState(3, dtype=np.float64)
    params = {
        "x": Parameter(rng.normal(size=(6, 3)), "x"),
        "gamma": Parameter(rng.uniform(0.5, 1.5, size=3), "gamma"),
        "beta": Parameter(rng.normal(size=3), "beta"),
    }
    target = Tensor(rng.normal(size=(6, 3)))

    def loss():
        y = ops.batch_norm(params["x"], params["gamma"], params["beta"], state, training=True)
        return ops.sum(ops.mul(y, target))

    _check(loss, params)


def test_batch_norm_eval_uses_running_statistics():
    state = ops.BatchNormState(2, dtype=np.float64)
    state.running_mean = np.array([1.0, -1.0])
    state.running_var = np.array([4.0, 1.0])
    x = Tensor(np.array([[3.0, 0.0]]))
    y = ops.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False)
    np.testing.assert_allclose(y.data, [[2.0 / np.sqrt(4.0 + state.eps), 1.0 / np.sqrt(1.0 + state.eps)]])


def test_stop_gradient_gives_exact_zeros(rng):
    a = Parameter(rng.normal(size=(3,)), "a")
    b = Parameter(rng.normal(size=(3,)), "b")
    blocked = stop_gradient(ops.mul(a, a))
    loss = ops.sum(ops.mul(blocked, b))
    grads = backward(loss, {"a": a, "b": b})
    assert np.array_equal(grads["a"], np.zeros(3))
    np.testing.assert_allclose(grads["b"], a.data * a.data)


def test_unreached_parameter_gets_zeros():
    used = Parameter(np.ones(2), "used")
    unused = Parameter(np.ones((2, 2)), "unused")
    grads = backward(ops.sum(used), [used, unused])
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))
    assert np.array_equal(grads["used"], np.ones(2))


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3), "p")
    with no_grad():
        out = ops.scale(p, 2.0)
    assert out._node is None
    assert not out.requires_grad


def test_shared_subexpression_accumulates():
    p = Parameter(np.array([2.0]), "p")
    y = ops.mul(p, p)
    loss = ops.sum(ops.add(y, y))
    np.testing.assert_allclose(backward(loss, [p])["p"], [8.0])


def test_shape_errors():
    with pytest.raises(ShapeError):
        ops.output_shape("conv2d", (1, 8, 8, 3), (3, 3, 4, 2))
    with pytest.raises(ShapeError):
        ops.max_pool(Tensor(np.zeros((1, 3, 4, 1))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        backward(Tensor(np.zeros(2)), [])


def test_output_shape_inference():
    assert ops.output_shape("conv2d", (2, 8, 8, 3), (3, 3, 3, 16)) == (2, 8, 8, 16)
    assert ops.output_shape("conv2d", (2, 8, 8, 3), (3, 3, 3, 16), padding="valid") == (2, 6, 6, 16)
    assert ops.output_shape("max_pool", (2, 8, 8, 16)) == (2, 4, 4, 16)
    assert ops.output_shape("global_average_pool", (2, 4, 4, 16)) == (2, 16)
    assert ops.output_shape("fully_connected", (2, 16), (16, 5)) == (2, 5)
    assert ops.output_shape("sum", (2, 5), axis=1) == (2,)


def test_non_finite_values_are_refused():
    with np.errstate(over="ignore"):
        with pytest.raises(NumericFailure):
            ops.scale(Tensor(np.array([1e308])), 10.0)


def test_momentum_update_by_hand():
    params = {"p": np.array([0.0])}
    grads = {"p": np.array([1.0])}
    params, velocity = sgd_step(params, grads, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(params["p"], [-0.1])
    params, velocity = sgd_step(params, grads, lr=0.1, momentum=0.9, weight_decay=0.0, velocity=velocity)
    np.testing.assert_allclose(params["p"], [-0.29])


def test_sgd_refuses_non_finite_gradient():
    p = Parameter(np.ones(2), "p")
    optimizer = SGD({"p": p}, lr=0.1)
    with pytest.raises(NonFiniteGradientError):
        optimizer.step({"p": np.array([1.0, np.nan])})
    assert np.array_equal(p.data, np.ones(2))


def test_sgd_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        sgd_step({"p": np.ones(1)}, {"p": np.ones(1)}, lr=0.0, momentum=0.9, weight_decay=0.0)
    with pytest.raises(ValueError):
        sgd_step({"p": np.ones(1)}, {"p": np.ones(1)}, lr=0.1, momentum=1.0, weight_decay=0.0)


def test_cosine_schedule():
    assert cosine_lr(0.05, 0, 100) == pytest.approx(0.05)
    assert cosine_lr(0.05, 50, 100) == pytest.approx(0.025)
    assert cosine_lr(0.05, 99, 100) < 0.001


def test_small_forward_examples():
    np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(ops.l2_normalize(Tensor(np.array([[3.0, 4.0]]))).data, [[0.6, 0.8]])
    pooled = ops.global_average_pool(Tensor(np.full((1, 7, 7, 5), 2.5)))
    np.testing.assert_allclose(pooled.data, np.full((1, 5), 2.5))


def test_linear_gradient_is_the_input(rng):
    x = Tensor(rng.normal(size=4))
    w = Parameter(rng.normal(size=4), "w")
    np.testing.assert_allclose(backward(ops.sum(ops.mul(w, x)), [w])["w"], x.data)
