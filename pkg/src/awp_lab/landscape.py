"""Weight loss landscapes along filter-normalised random directions.

Every grid point gets its own adversarial examples, crafted against the
perturbed model ``f_{w + alpha d}``; adversarial examples are never carried
over from the unperturbed model. All grid points share one attack seed so
that ``g(0)`` is exactly the adversarial loss :func:`trainer.evaluate`
reports for the same seed, and neighbouring points differ only through the
weights.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import ThreatModel, pgd
from .awp import PerturbationState, compute_awp, perturbed, random_weight_perturbation
from .data import Dataset
from .errors import NonFiniteError
from .network import Network, filter_norms, tensor_norm
from .rng import Stream
from .losses import LossSpec
from .trainer import batch_seed, evaluate

THREADS_ENV = "AWP_LAB_THREADS"


@dataclass(frozen=True)
class Direction:
    d: dict[str, np.ndarray]
    seed: int
    normalized: bool = True


@dataclass
class LandscapeProfile:
    alphas: np.ndarray
    losses: np.ndarray            # (len(alphas),) or (len(alphas), len(betas)) relative
    betas: np.ndarray | None = None
    attack: ThreatModel | None = None
    centre: float = 0.0           # g(0) / g(0, 0)
    extra: dict = field(default_factory=dict)

    @property
    def is_2d(self) -> bool:
        return self.betas is not None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if self.is_2d:
                w.writerow(["alpha", "beta", "rel_loss"])
                for i, a in enumerate(self.alphas):
                    for j, b in enumerate(self.betas):
                        w.writerow([repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))])
            else:
                w.writerow(["alpha", "loss"])
                for a, g in zip(self.alphas, self.losses):
                    w.writerow([repr(float(a)), repr(float(g))])


def default_grid(lo: float = -1.0, hi: float = 1.0, points: int = 21) -> np.ndarray:
    """Evenly spaced grid that always contains an exact 0."""
    grid = np.linspace(lo, hi, points)
    if lo <= 0 <= hi:
        grid[np.argmin(np.abs(grid))] = 0.0
    else:
        grid = np.sort(np.append(grid, 0.0))
    return grid


def filter_normalize(d: dict[str, np.ndarray], net: Network) -> dict[str, np.ndarray]:
    """Rescale each filter of ``d`` to the Frobenius norm of the matching weight filter."""
    out = {}
    for name, w in net.weights().items():
        dn = filter_norms(d[name])
        wn = filter_norms(w)
        scale = np.where(dn > 0, wn / np.where(dn > 0, dn, 1.0), 0.0)
        out[name] = d[name] * scale.reshape((-1,) + (1,) * (w.ndim - 1))
    return out


def sample_direction(net: Network, seed: int) -> Direction:
    """Gaussian direction, filter-normalised against ``net``; zero filters give zero blocks."""
    raw = {name: Stream(seed, 0xD1, i).normal(w.shape) for i, (name, w) in enumerate(net.weights().items())}
    return Direction(filter_normalize(raw, net), seed, True)


def _combine(d: Direction, e: Direction | None, a: float, b: float) -> dict[str, np.ndarray]:
    if e is None:
        return {k: a * v for k, v in d.d.items()}
    return {k: a * v + b * e.d[k] for k, v in d.d.items()}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items: Sequence) -> list:
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _loss_at(net: Network, delta: dict[str, np.ndarray], data: Dataset, attack: ThreatModel, seed: int) -> float:
    return evaluate(perturbed(net, delta), data, attack, seed).adv_loss


def profile_1d(net: Network, data: Dataset, d: Direction, grid: Sequence[float], attack: ThreatModel,
               seed: int = 0) -> LandscapeProfile:
    """``g(alpha)``: adversarial cross-entropy of ``f_{w + alpha d}`` on ``data``."""
    alphas = np.asarray(grid, dtype=np.float64)
    if not np.any(alphas == 0.0):
        raise ValueError("landscape grid must contain alpha = 0")
    if np.any(np.diff(alphas) <= 0):
        raise ValueError("landscape grid must be strictly increasing")

    def point(a):
        try:
            return _loss_at(net, _combine(d, None, a, 0.0), data, attack, seed)
        except NonFiniteError as exc:
            raise NonFiniteError(f"alpha={a}: {exc}") from exc

    losses = np.array(_map_ordered(point, list(alphas)))
    centre = float(losses[np.flatnonzero(alphas == 0.0)[0]])
    return LandscapeProfile(alphas, losses, None, attack, centre)


def profile_2d(net: Network, data: Dataset, d: Direction, e: Direction, grid_alpha: Sequence[float],
               grid_beta: Sequence[float], attack: ThreatModel, seed: int = 0) -> LandscapeProfile:
    """Relative surface ``|g(alpha, beta) - g(0, 0)|``."""
    alphas = np.asarray(grid_alpha, dtype=np.float64)
    betas = np.asarray(grid_beta, dtype=np.float64)
    if not (np.any(alphas == 0.0) and np.any(betas == 0.0)):
        raise ValueError("2-D grid must contain (0, 0)")
    pts = [(a, b) for a in alphas for b in betas]

    def point(ab):
        a, b = ab
        try:
            return _loss_at(net, _combine(d, e, a, b), data, attack, seed)
        except NonFiniteError as exc:
            raise NonFiniteError(f"alpha={a}, beta={b}: {exc}") from exc

    raw = np.array(_map_ordered(point, pts)).reshape(len(alphas), len(betas))
    i0 = np.flatnonzero(alphas == 0.0)[0]
    j0 = np.flatnonzero(betas == 0.0)[0]
    centre = float(raw[i0, j0])
    prof = LandscapeProfile(alphas, np.abs(raw - centre), betas, attack, centre)
    prof.extra["raw"] = raw
    return prof


def flatness(profile: LandscapeProfile) -> float:
    """Worst rise ``max_alpha g(alpha) - g(0)`` over the window (smaller is flatter)."""
    if profile.is_2d:
        return float(np.max(profile.losses))
    return float(np.max(profile.losses - profile.centre))


def mean_rise(profile: LandscapeProfile) -> float:
    if profile.is_2d:
        return float(np.mean(profile.losses))
    return float(np.mean(profile.losses - profile.centre))


def normalized_shape(profile: LandscapeProfile) -> np.ndarray:
    """Profile rescaled to [0, 1] by its own range (for shape comparisons)."""
    g = profile.losses
    span = g.max() - g.min()
    return np.zeros_like(g) if span == 0 else (g - g.min()) / span


def pac_bayes_flatness(net: Network, data: Dataset, alpha_var: float, samples: int, seed: int,
                       attack: ThreatModel) -> tuple[float, float]:
    """Monte-Carlo ``E_u[rho(w + u)] - rho(w)`` and its standard error.

    ``u`` is elementwise Gaussian with per-layer std ``alpha_var * ||w_l||_F``;
    adversarial examples are regenerated for every draw.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    if alpha_var == 0:
        return 0.0, 0.0
    base = evaluate(net, data, attack, seed).adv_loss
    weights = net.weights()

    def draw(s):
        u = {name: alpha_var * tensor_norm(w) * Stream(seed, 0xBAE5, s, i).normal(w.shape)
             for i, (name, w) in enumerate(weights.items())}
        return _loss_at(net, u, data, attack, seed) - base

    rises = np.array(_map_ordered(draw, list(range(samples))))
    se = float(rises.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
    return float(rises.mean()), se


def awp_perturbation(net: Network, data: Dataset, gamma: float, attack: ThreatModel, seed: int = 0,
                     steps: int = 1) -> dict[str, np.ndarray]:
    """AWP direction for a fixed model: ascend the batch-mean adversarial CE of ``data``."""
    x_adv = pgd(net, data.x, data.y, attack, "ce", seed=batch_seed(seed, 0xA3))
    ps = PerturbationState.zeros(net, gamma, steps=steps)
    return compute_awp(net, x_adv, data.y, LossSpec("at"), ps).v


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    gamma: float
    loss: float
    draws: tuple[float, ...] = ()


def perturbation_sweep(net: Network, data: Dataset, gammas: Sequence[float], strategies: Sequence[str],
                       attack: ThreatModel, seed: int = 0, draws: int = 5, awp_steps: int = 1) -> list[SweepRow]:
    """Adversarial loss at ``w + v`` for AWP and RWP perturbations of each size.

    RWP rows report the median over ``draws`` random directions. Every loss
    regenerates its attack against the perturbed weights with one shared seed.
    """
    rows = []
    for strategy in strategies:
        if strategy not in ("awp", "rwp"):
            raise ValueError(f"unknown perturbation strategy {strategy!r}")
        for gamma in gammas:
            if gamma == 0:
                g = _loss_at(net, {}, data, attack, seed)
                rows.append(SweepRow(strategy, float(gamma), g))
                continue
            if strategy == "awp":
                v = awp_perturbation(net, data, gamma, attack, seed, awp_steps)
                rows.append(SweepRow(strategy, float(gamma), _loss_at(net, v, data, attack, seed)))
            else:
                losses = tuple(_loss_at(net, random_weight_perturbation(net, gamma, batch_seed(seed, 0x2A9, k)).v,
                                        data, attack, seed) for k in range(draws))
                rows.append(SweepRow(strategy, float(gamma), float(np.median(losses)), losses))
    return rows


# SVG -----------------------------------------------------------------------

def svg_lines(series: Sequence[tuple[np.ndarray, np.ndarray]], title: str = "",
              xlabel: str = "alpha", ylabel: str = "loss", width: int = 480, height: int = 320) -> str:
    """Minimal standalone SVG polyline plot."""
    pad = 48
    xs = np.concatenate([s[0] for s in series])
    ys = np.concatenate([s[1] for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
              "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{pad / 2}" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">{ylabel}</text>',
             f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:.3g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
             f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for k, (sx, sy) in enumerate(series):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(sx, sy))
        parts.append(f'<polyline fill="none" stroke="{colors[k % len(colors)]}" stroke-width="1.5" points="{pts}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
