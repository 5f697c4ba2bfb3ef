"""Outer minimisation: SGD over perturbed weights, evaluation, checkpoints."""

from __future__ import annotations

import base64
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .attacks import ThreatModel, pgd
from .awp import PerturbationState, compute_awp, perturbed, random_weight_perturbation
from .data import Dataset, batches, split, subset
from .errors import FormatError, NonFiniteError, ShapeError
from .losses import LossSpec, check_labels, cross_entropy_rows, objective
from .network import Network
from .rng import derive_key

log = logging.getLogger(__name__)

CKPT_FORMAT = "awp-lab-checkpoint"
CKPT_VERSION = 1
METRICS_FIELDS = ("epoch", "lr", "train_rob", "test_rob", "nat_acc", "gap", "adv_loss")


# schedules -----------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "piecewise"  # piecewise | cosine | cyclic | constant
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    peak_epoch: int = 0
    peak_lr: float = 0.2

    def __post_init__(self):
        if self.kind not in ("piecewise", "cosine", "cyclic", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")


def lr_at(schedule: ScheduleSpec, t: int, total: int, base_lr: float = 0.1) -> float:
    """Learning rate for 1-based epoch ``t`` of ``total``.

    piecewise: ``base * factor ** #{m <= t}``; cosine: ``base/2 (cos(pi t/T) + 1)``;
    cyclic: linear 0 -> peak_lr at peak_epoch, then linear to 0 at T.
    """
    if not 1 <= t <= total:
        raise ValueError(f"epoch {t} outside [1, {total}]")
    if schedule.kind == "constant":
        return base_lr
    if schedule.kind == "piecewise":
        passed = sum(1 for m in schedule.milestones if t >= m)
        return base_lr * schedule.factor ** passed
    if schedule.kind == "cosine":
        return 0.5 * base_lr * (math.cos(math.pi * t / total) + 1.0)
    peak = schedule.peak_epoch
    if not 0 < peak < total:
        raise ValueError(f"cyclic peak epoch {peak} must lie strictly inside (0, {total})")
    if t <= peak:
        return schedule.peak_lr * t / peak
    return schedule.peak_lr * (total - t) / (total - peak)


# configuration -------------------------------------------------------------

@dataclass(frozen=True)
class AWPConfig:
    gamma: float = 5e-3
    steps: int = 1
    alternations: int = 1
    step_size: float | None = None
    norm_kind: str = "frobenius"
    carry_v: bool = False


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec("piecewise", (15, 25)))
    threat: ThreatModel = field(default_factory=lambda: ThreatModel("linf", 8 / 255, 2 / 255, 10))
    loss: LossSpec = field(default_factory=LossSpec)
    awp: AWPConfig | None = None
    rwp: bool = False
    seed: int = 0
    eval_attack: ThreatModel = field(default_factory=lambda: ThreatModel("linf", 8 / 255, 2 / 255, 20))
    eval_every: int = 1
    eval_subset: int = 1000

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")
        if min(self.lr, self.momentum, self.weight_decay) < 0:
            raise ValueError("rates must be >= 0")
        if self.rwp and self.awp is None:
            raise ValueError("rwp needs an awp block for its gamma")

    def to_dict(self) -> dict:
        return _plain(self)


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_rob: float
    test_rob: float
    nat_acc: float
    gap: float
    adv_loss: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_FIELDS[1:]]


@dataclass
class RunMetrics:
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int | None = None

    def add(self, m: EpochMetrics) -> None:
        self.epochs.append(m)

    @property
    def last(self) -> EpochMetrics:
        return self.epochs[-1]

    @property
    def best(self) -> EpochMetrics | None:
        for m in self.epochs:
            if m.epoch == self.best_epoch:
                return m
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(METRICS_FIELDS)
            for m in self.epochs:
                w.writerow(m.row())

    @classmethod
    def read_csv(cls, path) -> "RunMetrics":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if tuple(header or ()) != METRICS_FIELDS:
                raise FormatError(f"{path}: metrics header {header} != {list(METRICS_FIELDS)}")
            out = cls()
            for row in reader:
                out.add(EpochMetrics(int(row[0]), *(float(v) for v in row[1:])))
        out.best_epoch = best_epoch(out.epochs)
        return out


class BestTracker:
    """Argmax of test robustness; ties go to the earlier epoch."""

    def __init__(self):
        self.best_epoch: int | None = None
        self.best_value = -math.inf

    def update(self, epoch: int, test_rob: float) -> bool:
        if test_rob > self.best_value:
            self.best_value = test_rob
            self.best_epoch = epoch
            return True
        return False

    @property
    def tag(self) -> str | None:
        return None if self.best_epoch is None else f"epoch-{self.best_epoch}"


def best_epoch(stream: Iterable[EpochMetrics | float]) -> int | None:
    """1-based index (or EpochMetrics.epoch) of the highest test robustness."""
    tr = BestTracker()
    for i, m in enumerate(stream, start=1):
        if isinstance(m, EpochMetrics):
            tr.update(m.epoch, m.test_rob)
        else:
            tr.update(i, float(m))
    return tr.best_epoch


# evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class Evaluation:
    robustness: float       # % correct after the attack
    natural_accuracy: float  # % correct on clean inputs
    adv_loss: float         # mean cross-entropy on the attacked inputs


def batch_seed(seed: int, *labels: int) -> int:
    return derive_key(seed, *labels)


def evaluate(net: Network, ds: Dataset, attack: ThreatModel, seed: int = 0, batch_size: int = 256) -> Evaluation:
    """Robust and natural accuracy plus mean adversarial cross-entropy.

    Batch ``b`` uses random-start seed ``batch_seed(seed, b)``; the batching
    is fixed so every caller that passes the same seed sees the same attack.
    """
    n = len(ds)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y_all = check_labels(ds.y, net.num_classes)
    robust = natural = 0
    loss_sum = 0.0
    for b, start in enumerate(range(0, n, batch_size)):
        x = ds.x[start:start + batch_size]
        y = y_all[start:start + batch_size]
        natural += int(np.sum(net.predict(x) == y))
        x_adv = pgd(net, x, y, attack, "ce", seed=batch_seed(seed, b))
        logits = net.forward(x_adv)
        robust += int(np.sum(logits.data.argmax(axis=1) == y))
        loss_sum += float(np.sum(cross_entropy_rows(logits, y).data))
    return Evaluation(100.0 * robust / n, 100.0 * natural / n, loss_sum / n)


def adversarial_loss(net: Network, ds: Dataset, attack: ThreatModel, seed: int = 0, batch_size: int = 256) -> float:
    return evaluate(net, ds, attack, seed, batch_size).adv_loss


# training ------------------------------------------------------------------

@dataclass
class OptimizerState:
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    v: PerturbationState | None = None
    steps: int = 0


@dataclass(frozen=True)
class StepMetrics:
    loss: float
    v_rel: dict[str, float]


def _perturbation_state(net: Network, cfg: TrainConfig, state: OptimizerState) -> PerturbationState:
    a = cfg.awp
    if a.carry_v and state.v is not None:
        return state.v
    return PerturbationState.zeros(net, a.gamma, step_size=a.step_size, steps=a.steps,
                                   alternations=a.alternations, norm_kind=a.norm_kind)


def train_step(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, state: OptimizerState,
               lr: float, seed: int, unlabeled: np.ndarray | None = None) -> tuple[Network, StepMetrics]:
    """One double-perturbation update.

    For each of the A alternations: craft ``x_adv`` against ``f_{w+v}`` then
    take the AWP steps on ``v`` (RWP draws ``v`` once instead). Finally commit
    ``w <- (w + v) - lr * step - v`` where ``step`` is the momentum buffer fed
    by the gradient at ``w + v`` plus coupled weight decay.
    """
    ps = None
    alternations = 1
    if cfg.awp is not None:
        ps = _perturbation_state(net, cfg, state)
        if cfg.rwp:
            ps = random_weight_perturbation(net, cfg.awp.gamma, batch_seed(seed, 0x2A9), cfg.awp.norm_kind)
        else:
            alternations = cfg.awp.alternations
    attack_loss = cfg.loss.attack_loss
    x_adv = x
    for a in range(alternations):
        target = net if ps is None else perturbed(net, ps.v)
        x_adv = pgd(target, x, y, cfg.threat, attack_loss, seed=batch_seed(seed, a), x_nat=x)
        if ps is not None and not cfg.rwp:
            ps = compute_awp(net, x_adv, y, cfg.loss, ps, x_nat=x, unlabeled=unlabeled)

    v = {} if ps is None else ps.v
    centre = net if ps is None else perturbed(net, v)
    leaves = centre.leaves()
    loss = objective(centre, x, x_adv, y, cfg.loss, params=leaves, unlabeled=unlabeled)
    T.backward(loss)
    new = {}
    for k, p in centre.params.items():
        g = leaves[k].grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        buf = state.momentum.get(k)
        buf = g if buf is None else cfg.momentum * buf + g
        state.momentum[k] = buf
        w = p - lr * buf
        if k in v:
            w = w - v[k]
        new[k] = w
    state.steps += 1
    if cfg.awp is not None and cfg.awp.carry_v and not cfg.rwp:
        state.v = ps
    out = net.with_params(new)
    rel = ps.relative_sizes(net) if ps is not None else {}
    return out, StepMetrics(float(loss.data), rel)


@dataclass
class FitResult:
    last: Network
    best: Network
    metrics: RunMetrics
    state: OptimizerState


def fit(net: Network, train: Dataset, test: Dataset, cfg: TrainConfig,
        unlabeled: np.ndarray | None = None,
        on_epoch: Callable[[EpochMetrics, Network], None] | None = None) -> FitResult:
    """Run ``cfg.epochs`` epochs; evaluate every ``eval_every`` epochs and at the end.

    Train robustness is re-measured with the eval attack on a fixed subset of
    the training set rather than reusing training-time adversarial examples.
    """
    state = OptimizerState()
    metrics = RunMetrics()
    tracker = BestTracker()
    best = net
    train_eval = subset(train, cfg.eval_subset, cfg.seed)
    test_eval = subset(test, cfg.eval_subset, cfg.seed)
    eval_seed = batch_seed(cfg.seed, 0xE7A1)
    ys = train.y
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg.schedule, epoch, cfg.epochs, cfg.lr)
        for b, idx in enumerate(batches(train, cfg.batch_size, cfg.seed, epoch)):
            mask = None if unlabeled is None else unlabeled[idx]
            try:
                net, _ = train_step(net, train.x[idx], ys[idx], cfg, state, lr,
                                    batch_seed(cfg.seed, epoch, b), mask)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} batch {b}: {exc}") from exc
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        tr = evaluate(net, train_eval, cfg.eval_attack, eval_seed)
        te = evaluate(net, test_eval, cfg.eval_attack, eval_seed)
        m = EpochMetrics(epoch, lr, tr.robustness, te.robustness, te.natural_accuracy,
                         tr.robustness - te.robustness, te.adv_loss)
        metrics.add(m)
        if tracker.update(epoch, te.robustness):
            best = net
        log.info("epoch %d lr %.4g train_rob %.2f test_rob %.2f nat %.2f gap %.2f",
                 epoch, lr, m.train_rob, m.test_rob, m.nat_acc, m.gap)
        if on_epoch is not None:
            on_epoch(m, net)
    metrics.best_epoch = tracker.best_epoch
    return FitResult(net, best, metrics, state)


# semi-supervised helpers ----------------------------------------------------

def pseudo_label(natural_net: Network, x: np.ndarray) -> np.ndarray:
    """Argmax class of the natural model; ties resolve to the lowest index."""
    return natural_net.logits(x).argmax(axis=1).astype(np.int64)


def prepare_ssl(net: Network, train: Dataset, labeled_fraction: float, natural_epochs: int,
                cfg: TrainConfig) -> tuple[Dataset, np.ndarray]:
    """Split ``train``, fit a natural model on the labeled part, pseudo-label the rest.

    Returns the recombined dataset and the boolean mask of pseudo-labelled rows.
    """
    labeled, pool = split(train, labeled_fraction, cfg.seed)
    if len(pool) == 0:
        return labeled, np.zeros(len(labeled), dtype=bool)
    natural_cfg = TrainConfig(epochs=natural_epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                              schedule=ScheduleSpec("constant"),
                              threat=ThreatModel(cfg.threat.p, 0.0, 1.0, 1, False),
                              loss=LossSpec("at"), seed=cfg.seed, eval_attack=ThreatModel(cfg.threat.p, 0.0, 1.0, 1, False),
                              eval_every=natural_epochs, eval_subset=cfg.eval_subset)
    natural = fit(net, labeled, labeled, natural_cfg).last
    y_pool = pseudo_label(natural, pool.x)
    x = np.concatenate([labeled.x, pool.x])
    y = np.concatenate([labeled.y, y_pool])
    mask = np.concatenate([np.zeros(len(labeled), bool), np.ones(len(pool), bool)])
    return Dataset(x, y, train.num_classes, train.split), mask


# checkpoints ---------------------------------------------------------------

def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def save_checkpoint(net: Network, path, epoch: int = 0, config: Mapping | None = None,
                    rng_state: Mapping | None = None) -> None:
    """JSON-lines file: header record, one record per tensor, end record."""
    records = [{"record": "header", "format": CKPT_FORMAT, "version": CKPT_VERSION, "epoch": epoch,
                "arch": net.arch(), "config": dict(config or {}), "rng": dict(rng_state or {}),
                "tensors": len(net.params)}]
    for name, arr in net.params.items():
        records.append({"record": "tensor", "name": name, "shape": list(arr.shape),
                        "dtype": "<f8", "data": _encode(arr)})
    records.append({"record": "end", "tensors": len(net.params)})
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def load_checkpoint(path, expect: Network | None = None) -> tuple[Network, dict]:
    """Inverse of :func:`save_checkpoint`; checks architecture against ``expect``."""
    lines = Path(path).read_text().splitlines()

    def bad(i, msg):
        return FormatError(f"{path}: record {i}: {msg}")

    recs = []
    for i, line in enumerate(lines):
        try:
            recs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise bad(i, f"not valid JSON ({exc.msg})") from None
    if not recs or recs[0].get("record") != "header" or recs[0].get("format") != CKPT_FORMAT:
        raise bad(0, "missing checkpoint header")
    head = recs[0]
    if head.get("version") != CKPT_VERSION:
        raise bad(0, f"unsupported version {head.get('version')}, expected {CKPT_VERSION}")
    count = head.get("tensors")
    params = {}
    for i in range(1, 1 + count):
        if i >= len(recs):
            raise bad(i, "file truncated before all tensors were read")
        r = recs[i]
        if r.get("record") != "tensor" or r.get("dtype") != "<f8":
            raise bad(i, "expected a float64 tensor record")
        try:
            raw = base64.b64decode(r["data"], validate=True)
        except Exception:
            raise bad(i, f"tensor {r.get('name')!r} payload is not base64") from None
        shape = tuple(r["shape"])
        if len(raw) != 8 * int(np.prod(shape)):
            raise bad(i, f"tensor {r['name']!r} payload has {len(raw)} bytes for shape {shape}")
        params[r["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    end = 1 + count
    if end >= len(recs) or recs[end].get("record") != "end" or recs[end].get("tensors") != count:
        raise bad(end, "missing end record (file truncated?)")
    if expect is not None and head["arch"] != expect.arch():
        raise ShapeError(f"checkpoint architecture {head['arch']} does not match configured {expect.arch()}")
    net = Network.from_arch(head["arch"], params)
    return net, head
