"""FGSM and PGD input adversaries under L-inf and L2 threat models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError, ShapeError
from .losses import check_labels, cross_entropy_rows, kl_rows
from .network import Network
from .rng import Stream

_START = 0x5EED


@dataclass(frozen=True)
class ThreatModel:
    p: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = True

    def __post_init__(self):
        if self.p not in ("linf", "l2"):
            raise ConfigError(f"threat norm must be linf or l2, got {self.p!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step size must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


def _row_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def _bcast(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def project_ball(x_adv: np.ndarray, x: np.ndarray, tm: ThreatModel) -> np.ndarray:
    """Nearest point of the per-example epsilon-ball around ``x``.

    Feasible points are returned unchanged, so the map is idempotent bitwise.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ShapeError(f"project_ball: shapes {x_adv.shape} and {x.shape} differ")
    eps = tm.epsilon
    if tm.p == "linf":
        return np.clip(x_adv, x - eps, x + eps)
    delta = x_adv - x
    norms = _row_norms(delta)
    over = norms > eps
    if not over.any():
        return x_adv
    scale = np.ones_like(norms)
    scale[over] = eps / norms[over]
    out = x + delta * _bcast(scale, delta)
    # rounding can leave the rescaled point a hair outside; shrink until the
    # recomputed norm is feasible so a second projection is a no-op
    shrink = 2.0 ** -50
    while True:
        bad = over & (_row_norms(out - x) > eps)
        if not bad.any():
            break
        scale[bad] *= 1.0 - shrink
        shrink = min(2.0 * shrink, 0.5)
        out = x + delta * _bcast(scale, delta)
    return np.where(_bcast(over, out), out, x_adv)


def input_gradient(net: Network, x_adv: np.ndarray, y, loss: str = "ce",
                   x_nat: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Gradient of the summed per-example attack loss w.r.t. ``x_adv``.

    ``loss="ce"`` ascends cross-entropy; ``loss="kl"`` ascends
    KL(f(x_nat) || f(x_adv)) with the natural prediction held fixed.
    """
    leaf = T.Tensor(x_adv, requires_grad=True)
    logits = net.forward(leaf)
    if loss == "ce":
        per = cross_entropy_rows(logits, check_labels(y, net.num_classes))
    elif loss == "kl":
        if x_nat is None:
            raise ValueError("the kl attack loss needs the natural inputs")
        target = T.Tensor(T.log_softmax(net.forward(x_nat)).data)
        per = kl_rows(target, T.log_softmax(logits))
    else:
        raise ValueError(f"unknown attack loss {loss!r}")
    total = T.sum(per)
    T.backward(total)
    g = leaf.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("input gradient is not finite")
    return g, float(total.data)


def fgsm(net: Network, x, y, tm: ThreatModel, loss: str = "ce", x_nat=None) -> np.ndarray:
    """One signed step of size epsilon from ``x``, clamped to [0, 1]."""
    if tm.p != "linf":
        raise ConfigError("FGSM is defined for the linf threat model only")
    x = np.asarray(x, dtype=np.float64)
    g, _ = input_gradient(net, x, y, loss, x if x_nat is None else x_nat)
    return np.clip(x + tm.epsilon * np.sign(g), 0.0, 1.0)


def _step(g: np.ndarray, tm: ThreatModel) -> np.ndarray:
    if tm.p == "linf":
        return tm.step_size * np.sign(g)
    n = _row_norms(g)
    inv = np.where(n > 0, 1.0 / np.where(n > 0, n, 1.0), 0.0)
    return tm.step_size * g * _bcast(inv, g)


def random_start(x: np.ndarray, tm: ThreatModel, seed: int) -> np.ndarray:
    delta = Stream(seed, _START).uniform(-1.0, 1.0, x.shape)
    x_adv = x + tm.epsilon * delta
    if tm.p == "l2":
        x_adv = project_ball(x_adv, x, tm)
    return np.clip(x_adv, 0.0, 1.0)


def pgd(net: Network, x, y, tm: ThreatModel, loss: str = "ce", seed: int = 0, x_nat=None) -> np.ndarray:
    """K-step projected gradient ascent inside the epsilon-ball and [0, 1].

    The random start (uniform in the box of radius epsilon) is drawn once
    from ``seed``; ``x_nat`` defaults to ``x`` and is only used by the KL loss.
    """
    x = np.asarray(x, dtype=np.float64)
    if tm.epsilon == 0:
        return x.copy()
    x_nat = x if x_nat is None else x_nat
    x_adv = random_start(x, tm, seed) if tm.random_start else x.copy()
    for k in range(tm.steps):
        try:
            g, _ = input_gradient(net, x_adv, y, loss, x_nat)
        except NonFiniteError as exc:
            raise NonFiniteError(f"pgd step {k}: {exc}") from exc
        x_adv = np.clip(project_ball(x_adv + _step(g, tm), x, tm), 0.0, 1.0)
    return x_adv
