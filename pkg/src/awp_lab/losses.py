"""Robust training objectives built from taped ops.

Every public loss returns a scalar :class:`~awp_lab.tensor.Tensor` so the
same expression serves both the weight update (gradient w.r.t. parameters)
and the attacks (gradient w.r.t. inputs).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelError
from .network import Network

KINDS = ("at", "trades", "mart", "ssl")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "at"
    beta: float = 6.0          # TRADES trade-off
    mart_lambda: float = 5.0
    ssl_lambda: float = 1.0    # weight on the pseudo-labelled part
    ssl_inner: str = "at"
    weight_penalty: str = "none"  # none | l1 | l2
    penalty_lambda: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.ssl_inner not in ("at", "trades", "mart"):
            raise ConfigError(f"ssl inner loss must be at, trades or mart, got {self.ssl_inner!r}")
        if self.weight_penalty not in ("none", "l1", "l2"):
            raise ConfigError(f"unknown weight penalty {self.weight_penalty!r}")
        for name in ("beta", "mart_lambda", "ssl_lambda", "penalty_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def base_kind(self) -> str:
        return self.ssl_inner if self.kind == "ssl" else self.kind

    @property
    def attack_loss(self) -> str:
        """Loss the input adversary ascends: KL for TRADES, CE otherwise."""
        return "kl" if self.base_kind == "trades" else "ce"


def check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise LabelError(f"labels must be a vector, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes}): min {y.min()}, max {y.max()}")
    return y.astype(np.int64)


def cross_entropy_rows(logits: T.Tensor, y) -> T.Tensor:
    return T.neg(T.pick(T.log_softmax(logits), y))


def kl_rows(logp: T.Tensor, logq: T.Tensor) -> T.Tensor:
    """Per-row KL(p || q) from log-probabilities."""
    return T.sum_rows(T.mul(T.exp(logp), T.sub(logp, logq)))


def _forward(net: Network, x, params):
    return net.forward(x, params)


def at_loss(net: Network, x_adv, y, params: Mapping | None = None) -> T.Tensor:
    """Mean cross-entropy on (already adversarial) inputs."""
    y = check_labels(y, net.num_classes)
    return T.mean(cross_entropy_rows(_forward(net, x_adv, params), y))


def trades_loss(net: Network, x, x_adv, y, beta: float, params: Mapping | None = None) -> T.Tensor:
    y = check_labels(y, net.num_classes)
    lp_nat = T.log_softmax(_forward(net, x, params))
    lp_adv = T.log_softmax(_forward(net, x_adv, params))
    ce = T.neg(T.pick(lp_nat, y))
    return T.mean(ce + kl_rows(lp_nat, lp_adv) * beta)


def mart_loss(net: Network, x, x_adv, y, lam: float, params: Mapping | None = None) -> T.Tensor:
    """Misclassification-aware loss.

    BCE = -log q_y - log(1 - max_{k != y} q_k) with q = softmax(f(x_adv)); the
    KL(f(x) || f(x_adv)) term is weighted by 1 - p_y of the natural prediction.
    """
    y = check_labels(y, net.num_classes)
    lp_nat = T.log_softmax(_forward(net, x, params))
    lp_adv = T.log_softmax(_forward(net, x_adv, params))
    q_other = T.max_excluding(T.exp(lp_adv), y)
    bce = T.neg(T.pick(lp_adv, y)) - T.log(1.0 - q_other)
    weight = 1.0 - T.pick(T.exp(lp_nat), y)
    return T.mean(bce + T.mul(kl_rows(lp_nat, lp_adv), weight) * lam)


def ssl_loss(rho_labeled, rho_unlabeled, lam: float):
    """``rho_labeled + lam * rho_unlabeled``; a missing unlabeled part counts as 0."""
    if rho_unlabeled is None:
        return rho_labeled
    return rho_labeled + rho_unlabeled * lam


def weight_penalty(net: Network, kind: str, lam: float, params: Mapping | None = None) -> T.Tensor:
    """L1 or half squared-Frobenius penalty over the perturbable weights."""
    if lam < 0:
        raise ValueError("penalty weight must be >= 0")
    p = net.params if params is None else params
    total = T.Tensor(0.0)
    for name in net.weight_names:
        w = p[name]
        w = w if isinstance(w, T.Tensor) else T.Tensor(w)
        if kind == "l1":
            total = total + T.sum(T.abs(w))
        elif kind == "l2":
            total = total + T.sum(T.mul(w, w)) * 0.5
        else:
            raise ValueError(f"unknown penalty kind {kind!r}")
    return total * lam


def _base_loss(kind: str, spec: LossSpec, net, x, x_adv, y, params):
    if kind == "at":
        return at_loss(net, x_adv, y, params)
    if kind == "trades":
        return trades_loss(net, x, x_adv, y, spec.beta, params)
    return mart_loss(net, x, x_adv, y, spec.mart_lambda, params)


def objective(net: Network, x, x_adv, y, spec: LossSpec, params: Mapping | None = None,
              unlabeled: np.ndarray | None = None, include_penalty: bool = True) -> T.Tensor:
    """Batch training loss for ``spec`` evaluated at ``params``.

    For ``ssl`` the boolean mask ``unlabeled`` marks pseudo-labelled rows;
    each part is averaged separately before the weighted sum.
    """
    kind = spec.base_kind
    if spec.kind == "ssl" and unlabeled is not None and np.any(unlabeled):
        mask = np.asarray(unlabeled, dtype=bool)
        lab = ~mask
        rho_u = _base_loss(kind, spec, net, x[mask], x_adv[mask], y[mask], params)
        rho_l = (_base_loss(kind, spec, net, x[lab], x_adv[lab], y[lab], params)
                 if lab.any() else T.Tensor(0.0))
        loss = ssl_loss(rho_l, rho_u, spec.ssl_lambda)
    else:
        loss = _base_loss(kind, spec, net, x, x_adv, y, params)
    if include_penalty and spec.weight_penalty != "none" and spec.penalty_lambda > 0:
        loss = loss + weight_penalty(net, spec.weight_penalty, spec.penalty_lambda, params)
    return loss
