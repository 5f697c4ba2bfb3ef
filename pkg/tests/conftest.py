import numpy as np
import pytest

from awp_lab.network import FLATTEN, RELU, Network, build_model, conv, dense


def logistic_net(w=2.0):
    """Two-class net with logits [0, w * x] on a scalar input."""
    net = build_model([dense(1, 2)], (1,), 0)
    return net.with_params({"dense1.weight": np.array([[0.0], [w]]), "dense1.bias": np.zeros(2)})


def fixed_logits_net(rows):
    """Dense(1, C) net whose logits at input 0 and input 1 are the given rows."""
    a, b = (np.asarray(r, dtype=np.float64) for r in rows)
    net = build_model([dense(1, len(a))], (1,), 0)
    return net.with_params({"dense1.weight": (b - a)[:, None], "dense1.bias": a})


def tiny_cnn(seed=0, bias=True):
    return build_model([conv(1, 3, 3, pad=1, bias=bias), RELU, conv(3, 4, 3, bias=bias), RELU, FLATTEN,
                        dense(4 * 4 * 4, 3, bias=bias)], (1, 6, 6), seed)


@pytest.fixture
def cnn():
    return tiny_cnn(0)


@pytest.fixture(scope="session")
def trained_mlp():
    """Small AT-trained MLP on synthetic vectors plus its test data."""
    from awp_lab.attacks import ThreatModel
    from awp_lab.data import synth_blobs
    from awp_lab.trainer import ScheduleSpec, TrainConfig, fit

    train = synth_blobs(300, 3, 10, margin=3.0, seed=1, split="train")
    test = synth_blobs(200, 3, 10, margin=3.0, seed=1, split="test")
    net = build_model([dense(10, 16), RELU, dense(16, 3)], (10,), 0)
    cfg = TrainConfig(epochs=5, batch_size=32, lr=0.05, schedule=ScheduleSpec("constant"),
                      threat=ThreatModel("linf", 0.05, 0.0125, 5), eval_attack=ThreatModel("linf", 0.05, 0.0125, 10),
                      eval_every=5)
    return fit(net, train, test, cfg).last, test


ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
