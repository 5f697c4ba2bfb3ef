"""Adversarial and random weight perturbations under a relative-size budget.

A perturbation ``v`` is a dict keyed like ``net.weight_names``. The feasible
set is layer-wise ``||v_l|| <= gamma * ||w_l||``; ``gamma`` may be one float
or a per-layer mapping.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import NonFiniteError
from .losses import LossSpec, objective
from .network import Network, tensor_norm
from .rng import Stream

Gamma = float | Mapping[str, float]


@dataclass(frozen=True)
class PerturbationState:
    v: dict[str, np.ndarray]
    gamma: Gamma = 5e-3
    step_size: float | None = None  # None -> gamma / (alternations * steps)
    steps: int = 1
    alternations: int = 1
    norm_kind: str = "frobenius"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for g in self._gammas():
            if g < 0:
                raise ValueError("gamma must be >= 0")
        if self.steps < 1 or self.alternations < 1:
            raise ValueError("steps and alternations must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("AWP step size must be > 0")
        if self.norm_kind not in ("frobenius", "l1"):
            raise ValueError(f"unknown norm {self.norm_kind!r}")

    def _gammas(self):
        return self.gamma.values() if isinstance(self.gamma, Mapping) else [self.gamma]

    @classmethod
    def zeros(cls, net: Network, gamma: Gamma = 5e-3, **kwargs) -> "PerturbationState":
        return cls({k: np.zeros_like(w) for k, w in net.weights().items()}, gamma, **kwargs)

    def gamma_for(self, name: str) -> float:
        return float(self.gamma[name]) if isinstance(self.gamma, Mapping) else float(self.gamma)

    @property
    def eta2(self) -> float:
        if self.step_size is not None:
            return self.step_size
        top = max(self._gammas()) if isinstance(self.gamma, Mapping) else self.gamma
        return top / (self.alternations * self.steps)

    def with_v(self, v: Mapping[str, np.ndarray]) -> "PerturbationState":
        return replace(self, v=dict(v))

    def relative_sizes(self, net: Network) -> dict[str, float]:
        out = {}
        for name, w in net.weights().items():
            nw = tensor_norm(w, self.norm_kind)
            nv = tensor_norm(self.v[name], self.norm_kind)
            out[name] = nv / nw if nw > 0 else (0.0 if nv == 0 else np.inf)
        return out


def _shrink_onto(v: np.ndarray, bound: float, kind: str) -> np.ndarray:
    nv = tensor_norm(v, kind)
    if nv <= bound:
        return v
    if bound <= 0:
        return np.zeros_like(v)
    factor = bound / nv
    out = v * factor
    # keep the recomputed norm inside the ball so re-projection is a no-op;
    # the shrink doubles each round so subnormal bounds still terminate
    shrink = 2.0 ** -50
    while tensor_norm(out, kind) > bound:
        factor *= 1.0 - shrink
        shrink = min(2.0 * shrink, 0.5)
        out = v * factor
    return out


def project_gamma(ps: PerturbationState, net: Network) -> PerturbationState:
    """Layer-wise radial projection onto ``||v_l|| <= gamma ||w_l||``."""
    weights = net.weights()
    v = {}
    for name, vl in ps.v.items():
        bound = ps.gamma_for(name) * tensor_norm(weights[name], ps.norm_kind)
        v[name] = _shrink_onto(vl, bound, ps.norm_kind)
    return ps.with_v(v)


def perturbed(net: Network, v: Mapping[str, np.ndarray], scale: float = 1.0) -> Network:
    """The network with weights ``w + scale * v`` (biases untouched)."""
    if scale == 1.0:
        return net.with_params({k: net.params[k] + dv for k, dv in v.items()})
    return net.with_params({k: net.params[k] + scale * dv for k, dv in v.items()})


def with_perturbed_weights(net: Network, v, f: Callable[[Network], object]):
    """Run ``f`` against ``f_{w+v}``; ``net`` itself is never modified."""
    vv = v.v if isinstance(v, PerturbationState) else v
    return f(perturbed(net, vv))


LossFn = Callable[[dict], T.Tensor]


def compute_awp(net: Network, x_adv, y, loss: LossSpec | LossFn, ps: PerturbationState,
                steps: int | None = None, x_nat=None, unlabeled=None) -> PerturbationState:
    """``steps`` normalized-gradient ascent steps on ``v`` followed by projection.

    Each layer moves by ``eta2 * ||w_l|| * g_l / ||g_l||`` where ``g_l`` is the
    gradient of the batch-mean loss at ``w + v``. A layer whose gradient is
    exactly zero keeps its ``v`` for that step. ``loss`` is either a
    :class:`LossSpec` (evaluated on the batch) or a callable mapping the
    perturbed parameter tensors to a scalar.
    """
    k2 = ps.steps if steps is None else steps
    weights = net.weights()
    wnorm = {k: tensor_norm(w, ps.norm_kind) for k, w in weights.items()}
    if all(ps.gamma_for(k) == 0 for k in weights):
        return ps.with_v({k: np.zeros_like(w) for k, w in weights.items()})
    eta = ps.eta2
    for _ in range(k2):
        params = {k: T.Tensor(p) for k, p in net.params.items()}
        for k in weights:
            params[k] = T.Tensor(weights[k] + ps.v[k], requires_grad=True)
        if callable(loss) and not isinstance(loss, LossSpec):
            value = loss(params)
        else:
            x_in = x_adv if x_nat is None else x_nat
            value = objective(net, x_in, x_adv, np.asarray(y), loss, params=params,
                              unlabeled=unlabeled, include_penalty=False)
        if not np.isfinite(value.data).all():
            raise NonFiniteError("AWP loss is not finite")
        T.backward(value)
        v = {}
        for k in weights:
            g = params[k].grad
            gn = tensor_norm(g, ps.norm_kind) if g is not None else 0.0
            if gn == 0:
                v[k] = ps.v[k]
                continue
            v[k] = ps.v[k] + eta * (g / gn) * wnorm[k]
        ps = project_gamma(ps.with_v(v), net)
    return ps


def random_weight_perturbation(net: Network, gamma: Gamma, seed: int,
                               norm_kind: str = "frobenius") -> PerturbationState:
    """Gaussian direction per layer rescaled to exactly ``gamma ||w_l||``."""
    ps = PerturbationState.zeros(net, gamma, norm_kind=norm_kind)
    v = {}
    for i, (name, w) in enumerate(net.weights().items()):
        d = Stream(seed, 0x5A9, i).normal(w.shape)
        nd = tensor_norm(d, norm_kind)
        target = ps.gamma_for(name) * tensor_norm(w, norm_kind)
        v[name] = d * (target / nd) if nd > 0 and target > 0 else np.zeros_like(w)
    return ps.with_v(v)


def matched_gamma(net: Network, alpha: float) -> dict[str, float]:
    """Per-layer relative radius of an elementwise N(0, (alpha ||w_l||)^2) draw.

    Such a draw has ``||u_l|| ~= alpha ||w_l|| sqrt(n_l)``, so the AWP ball
    with ``gamma_l = alpha sqrt(n_l)`` holds perturbations of the same size.
    """
    return {k: alpha * float(np.sqrt(w.size)) for k, w in net.weights().items()}
