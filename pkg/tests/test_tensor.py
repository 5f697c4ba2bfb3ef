import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awp_lab import tensor as T
from awp_lab.errors import NonFiniteError, ShapeError
from awp_lab.network import FLATTEN, RELU, build_model, conv, dense


def test_relu_values():
    out = T.forward_op("relu", T.Tensor([-1.0, 0.0, 2.0]))
    assert out.data.tolist() == [0.0, 0.0, 2.0]


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    out = T.forward_op("matmul", np.eye(3), a)
    assert np.array_equal(out.data, a)


def test_conv_all_ones():
    # each output sums a 2x2 window of ones
    out = T.forward_op("conv2d", np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)))
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 4))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_shape_errors_name_operands():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 2, 2))))
    with pytest.raises(ValueError):
        T.forward_op("maxpool", T.Tensor(np.ones(2)))


def test_non_finite_is_error():
    with pytest.raises(NonFiniteError):
        T.exp(T.Tensor([1000.0]))


def test_log_softmax_stable_for_large_logits():
    out = T.log_softmax(T.Tensor([[1000.0, 0.0], [-1000.0, -1000.0]])).data
    np.testing.assert_allclose(out, [[0.0, -1000.0], [np.log(0.5), np.log(0.5)]])


def test_backward_linear_form():
    w = np.array([1.5, -2.0, 0.25])
    x = T.Tensor([0.3, 0.1, -0.7], requires_grad=True)
    T.backward(T.sum(T.mul(T.Tensor(w), x)))
    np.testing.assert_array_equal(x.grad, w)


def test_relu_gradient_pieces():
    for x0, expect in [(-1.0, 0.0), (2.0, 1.0), (0.0, 0.0)]:
        x = T.Tensor([x0], requires_grad=True)
        T.backward(T.sum(T.relu(x)))
        assert x.grad[0] == expect


def test_backward_requires_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_fd_check_examples():
    x = np.array([0.3, -1.2, 2.0])
    assert T.finite_difference_check(lambda t: T.sum(T.mul(t, t)) * 0.5, x, 1e-5) < 1e-9
    assert T.finite_difference_check(lambda t: T.Tensor(3.0) + T.sum(t) * 0.0, x, 1e-5) == 0.0
    y = np.array([2, 0])
    logits = np.random.default_rng(1).normal(size=(2, 3))
    err = T.finite_difference_check(lambda z: T.mean(T.neg(T.pick(T.log_softmax(z), y))), logits, 1e-5)
    assert err < 1e-6


def test_ce_gradient_closed_form():
    z = np.random.default_rng(2).normal(size=(4, 5))
    y = np.array([0, 4, 2, 2])
    leaf = T.Tensor(z, requires_grad=True)
    T.backward(T.sum(T.neg(T.pick(T.log_softmax(leaf), y))))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(leaf.grad, p, atol=1e-14)


def test_fd_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        T.finite_difference_check(lambda t: T.log(t, floor=-1.0), np.array([0.0]), 1e-5)


def _two_layer(seed):
    net = build_model([conv(1, 2, 3, pad=1), RELU, FLATTEN, dense(2 * 4 * 4, 3)], (1, 4, 4), seed)
    rng = np.random.default_rng(seed)
    # move biases off zero so every path is exercised
    return net.with_params({k: v + 0.1 * rng.normal(size=v.shape) for k, v in net.params.items()})


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_network_parameter_gradients_vs_fd(seed):
    net = _two_layer(seed)
    rng = np.random.default_rng(10 + seed)
    x = rng.uniform(size=(3, 1, 4, 4))
    y = np.array([0, 2, 1])
    for name in net.params:
        def f(p, name=name):
            params = dict(net.params)
            params[name] = p
            return T.mean(T.neg(T.pick(T.log_softmax(net.forward(x, params)), y)))
        assert T.finite_difference_check(f, net.params[name], 1e-5) < 1e-5, name


def test_input_gradient_vs_fd():
    net = _two_layer(3)
    x = np.random.default_rng(4).uniform(size=(2, 1, 4, 4))
    y = np.array([1, 0])
    err = T.finite_difference_check(lambda t: T.sum(T.neg(T.pick(T.log_softmax(net.forward(t)), y))), x, 1e-5)
    assert err < 1e-5


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_adjoint_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 3))
    w = T.Tensor(rng.normal(size=(3, 3)))
    y = np.array([0, 2])

    def f(x):
        return T.mean(T.neg(T.pick(T.log_softmax(T.matmul(x, w)), y)))

    def g(x):
        return T.sum(T.relu(x))

    grads = []
    for fn in (f, g, lambda x: f(x) * a + g(x) * b):
        leaf = T.Tensor(x0, requires_grad=True)
        T.backward(fn(leaf))
        grads.append(leaf.grad)
    np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], atol=1e-12, rtol=0)


def test_determinism_bitwise():
    net = _two_layer(5)
    x = np.random.default_rng(6).uniform(size=(4, 1, 4, 4))
    outs = []
    for _ in range(2):
        leaves = net.leaves()
        loss = T.mean(T.neg(T.pick(T.log_softmax(net.forward(x, leaves)), np.array([0, 1, 2, 0]))))
        T.backward(loss)
        outs.append((loss.data.tobytes(), leaves["conv1.weight"].grad.tobytes()))
    assert outs[0] == outs[1]
