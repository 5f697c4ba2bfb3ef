import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awp_lab import tensor as T
from awp_lab.errors import ConfigError, LabelError
from awp_lab.losses import (LossSpec, at_loss, kl_rows, mart_loss, objective, ssl_loss, trades_loss,
                            weight_penalty)
from awp_lab.network import build_model, dense
from conftest import fixed_logits_net, tiny_cnn

X0 = np.array([[0.0]])
X1 = np.array([[1.0]])


def test_at_loss_examples():
    net = fixed_logits_net([[0.0, 0.0, 0.0], [50.0, 0.0, 0.0]])
    assert float(at_loss(net, X0, [1]).data) == pytest.approx(np.log(3), abs=1e-15)
    assert float(at_loss(net, X1, [0]).data) < 1e-20
    # per-example losses 1 and 3 average to 2
    a = np.log(np.e - 1)
    b = np.log(np.e ** 3 - 1)
    two = fixed_logits_net([[a, 0.0], [b, 0.0]])
    x = np.array([[0.0], [1.0]])
    assert float(at_loss(two, x, [1, 1]).data) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(LabelError):
        at_loss(net, X0, [3])


def test_trades_example():
    net = fixed_logits_net([np.log([0.9, 0.1]), np.log([0.5, 0.5])])
    val = float(trades_loss(net, X0, X1, [0], 1.0).data)
    kl = 0.9 * np.log(0.9 / 0.5) + 0.1 * np.log(0.1 / 0.5)
    assert val == pytest.approx(-np.log(0.9) + kl, abs=1e-12)
    assert val == pytest.approx(0.4735, abs=1e-4)
    assert float(trades_loss(net, X0, X1, [0], 0.0).data) == pytest.approx(-np.log(0.9), abs=1e-12)
    assert float(trades_loss(net, X0, X0, [0], 6.0).data) == pytest.approx(-np.log(0.9), abs=1e-12)


def test_mart_examples():
    net = fixed_logits_net([np.log([0.5, 0.3, 0.2]), np.log([0.7, 0.2, 0.1])])
    bce = -np.log(0.7) - np.log(0.8)
    assert float(mart_loss(net, X0, X1, [0], 0.0).data) == pytest.approx(bce, abs=1e-12)
    assert bce == pytest.approx(0.5798, abs=1e-4)
    p = np.array([0.5, 0.3, 0.2])
    q = np.array([0.7, 0.2, 0.1])
    full = bce + 2.0 * np.sum(p * np.log(p / q)) * (1 - p[0])
    assert float(mart_loss(net, X0, X1, [0], 2.0).data) == pytest.approx(full, abs=1e-12)


def test_mart_confident_natural_drops_kl():
    net = fixed_logits_net([[60.0, 0.0, 0.0], np.log([0.7, 0.2, 0.1])])
    bce = -np.log(0.7) - np.log(0.8)
    assert float(mart_loss(net, X0, X1, [0], 5.0).data) == pytest.approx(bce, abs=1e-9)


def test_ssl_examples():
    assert ssl_loss(1.0, 2.0, 0.5) == 2.0
    assert ssl_loss(1.0, 2.0, 0.0) == 1.0
    assert ssl_loss(1.0, None, 3.0) == 1.0


def test_weight_penalty_examples():
    net = build_model([dense(1, 1, False)], (1,), 0).with_params({"dense1.weight": np.array([[2.0]])})
    assert float(weight_penalty(net, "l2", 1.0).data) == 2.0
    assert float(weight_penalty(net, "l2", 0.0).data) == 0.0
    net2 = build_model([dense(2, 1, False)], (2,), 0).with_params({"dense1.weight": np.array([[1.0, -2.0]])})
    assert float(weight_penalty(net2, "l1", 0.5).data) == 1.5


def test_biases_not_penalised():
    net = build_model([dense(1, 1)], (1,), 0).with_params({"dense1.weight": np.array([[0.0]]),
                                                           "dense1.bias": np.array([5.0])})
    assert float(weight_penalty(net, "l1", 1.0).data) == 0.0


def test_spec_validation():
    with pytest.raises(ConfigError):
        LossSpec("hinge")
    with pytest.raises(ConfigError):
        LossSpec("trades", beta=-1)
    assert LossSpec("trades").attack_loss == "kl"
    assert LossSpec("ssl", ssl_inner="trades").attack_loss == "kl"
    assert LossSpec("mart").attack_loss == "ce"


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(0.1, 20.0))
def test_kl_nonnegative_and_zero_on_self(seed, scale):
    rng = np.random.default_rng(seed)
    lp = T.log_softmax(T.Tensor(scale * rng.normal(size=(5, 4))))
    lq = T.log_softmax(T.Tensor(scale * rng.normal(size=(5, 4))))
    assert np.all(kl_rows(lp, lq).data >= -1e-12)
    assert np.all(np.abs(kl_rows(lp, lp).data) <= 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), beta=st.floats(0.0, 10.0))
def test_trades_at_least_natural_ce(seed, beta):
    rng = np.random.default_rng(seed)
    net = tiny_cnn(seed % 50)
    x = rng.uniform(size=(3, 1, 6, 6))
    xa = np.clip(x + 0.05 * rng.normal(size=x.shape), 0, 1)
    y = rng.integers(0, 3, 3)
    assert float(trades_loss(net, x, xa, y, beta).data) >= float(at_loss(net, x, y).data) - 1e-12


def test_ssl_objective_splits_rows():
    net = tiny_cnn(0)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(6, 1, 6, 6))
    y = np.array([0, 1, 2, 0, 1, 2])
    mask = np.array([False, False, False, True, True, True])
    spec = LossSpec("ssl", ssl_lambda=0.5)
    got = float(objective(net, x, x, y, spec, unlabeled=mask).data)
    want = float(at_loss(net, x[:3], y[:3]).data) + 0.5 * float(at_loss(net, x[3:], y[3:]).data)
    assert got == pytest.approx(want, abs=1e-14)


@pytest.mark.parametrize("kind", ["at", "trades", "mart"])
def test_loss_parameter_gradients(kind):
    net = tiny_cnn(4)
    rng = np.random.default_rng(5)
    net = net.with_params({k: v + 0.1 * rng.normal(size=v.shape) for k, v in net.params.items()})
    x = rng.uniform(size=(3, 1, 6, 6))
    xa = np.clip(x + 0.05 * rng.normal(size=x.shape), 0, 1)
    y = np.array([0, 2, 1])
    spec = LossSpec(kind, weight_penalty="l2", penalty_lambda=0.01)
    for name in net.params:
        def f(p, name=name):
            params = dict(net.params)
            params[name] = p
            return objective(net, x, xa, y, spec, params=params)
        assert T.finite_difference_check(f, net.params[name], 1e-5) < 1e-5, name
