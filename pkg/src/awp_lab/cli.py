"""Command-line entry point.

    awp-lab train|landscape|perturb-compare|histogram --config run.cfg --out DIR

The config file is flat ``key = value`` text; ``#`` starts a comment and
numbers may be written as fractions (``epsilon = 8/255``). Unknown keys are
rejected with their line number. Run ``awp-lab keys`` for the full list.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .attacks import ThreatModel
from .data import Dataset, load_csv, load_idx, subset, synth_blobs
from .errors import AWPLabError, ConfigError
from .landscape import (default_grid, perturbation_sweep, profile_1d, profile_2d, sample_direction,
                        svg_lines)
from .losses import LossSpec
from .network import build_model, preset, weight_histogram
from .trainer import (AWPConfig, ScheduleSpec, TrainConfig, fit, load_checkpoint, prepare_ssl,
                      save_checkpoint)

log = logging.getLogger("awp_lab")


def _num(s: str) -> float:
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    return float(s)


def _int(s: str) -> int:
    v = _num(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _opt_num(s: str):
    return None if s.lower() in ("auto", "none", "") else _num(s)


def _nums(s: str) -> tuple[float, ...]:
    return tuple(_num(p) for p in s.split(",") if p.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(_int(p) for p in s.split(",") if p.strip())


def _words(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"{s!r} not in {options}")
        return s
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: str
    doc: str


KEYS: dict[str, Key] = {
    # data
    "dataset": Key(_choice("synth", "idx", "csv"), "synth", "data source"),
    "train_images": Key(str, "", "IDX training images (dataset = idx)"),
    "train_labels": Key(str, "", "IDX training labels"),
    "test_images": Key(str, "", "IDX test images"),
    "test_labels": Key(str, "", "IDX test labels"),
    "train_csv": Key(str, "", "CSV training file (dataset = csv)"),
    "test_csv": Key(str, "", "CSV test file"),
    "train_limit": Key(_int, "0", "keep a seeded subset of this many training rows (0 = all)"),
    "test_limit": Key(_int, "0", "same for the test set"),
    "n_train": Key(_int, "1000", "synthetic training examples"),
    "n_test": Key(_int, "1000", "synthetic test examples"),
    "classes": Key(_int, "4", "number of classes (synthetic), or override for files"),
    "image": Key(_bool, "true", "synthetic images (true) or vectors (false)"),
    "channels": Key(_int, "1", "input channels"),
    "height": Key(_int, "8", "input height (vector length when image = false)"),
    "width": Key(_int, "8", "input width"),
    "margin": Key(_num, "4", "synthetic class separation"),
    "noise": Key(_num, "1", "synthetic pixel noise"),
    "label_noise": Key(_num, "0", "fraction of synthetic labels flipped"),
    "data_seed": Key(_int, "100", "seed of the synthetic class geometry"),
    # model
    "arch": Key(_choice("cnn-small", "mlp-small"), "cnn-small", "architecture preset"),
    "bias": Key(_bool, "true", "layers carry biases"),
    # objective
    "mode": Key(_choice("at", "trades", "mart", "ssl", "awp"), "at", "training objective; awp = at with awp on"),
    "awp": Key(_bool, "false", "adversarial weight perturbation on/off"),
    "rwp": Key(_bool, "false", "use random instead of adversarial weight perturbation"),
    "gamma": Key(_num, "5e-3", "relative weight perturbation budget"),
    "awp_steps": Key(_int, "1", "ascent steps on v per alternation"),
    "awp_alternations": Key(_int, "1", "input/weight alternations per batch"),
    "awp_step_size": Key(_opt_num, "auto", "step size on v (auto = gamma / (alternations * steps))"),
    "awp_norm": Key(_choice("frobenius", "l1"), "frobenius", "norm measuring perturbation size"),
    "carry_v": Key(_bool, "false", "warm-start v from the previous batch"),
    "beta": Key(_num, "6", "TRADES trade-off"),
    "mart_lambda": Key(_num, "5", "MART KL weight"),
    "ssl_lambda": Key(_num, "1", "weight of the pseudo-labelled loss"),
    "ssl_inner": Key(_choice("at", "trades", "mart"), "at", "loss applied inside ssl"),
    "labeled_fraction": Key(_num, "0.1", "ssl: fraction of training labels kept"),
    "natural_epochs": Key(_int, "10", "ssl: epochs of the natural pseudo-labeller"),
    "weight_penalty": Key(_choice("none", "l1", "l2"), "none", "explicit weight penalty"),
    "penalty_lambda": Key(_num, "0", "weight penalty coefficient"),
    # optimisation
    "epochs": Key(_int, "30", "training epochs"),
    "batch_size": Key(_int, "32", "minibatch size"),
    "lr": Key(_num, "0.05", "base learning rate"),
    "momentum": Key(_num, "0.9", "SGD momentum"),
    "weight_decay": Key(_num, "5e-4", "coupled weight decay"),
    "schedule": Key(_choice("piecewise", "cosine", "cyclic", "constant"), "piecewise", "learning-rate schedule"),
    "milestones": Key(_ints, "15,25", "piecewise epochs where lr is multiplied by lr_factor"),
    "lr_factor": Key(_num, "0.1", "piecewise decay factor"),
    "peak_epoch": Key(_int, "12", "cyclic peak epoch"),
    "peak_lr": Key(_num, "0.1", "cyclic peak learning rate"),
    "seed": Key(_int, "0", "run seed"),
    "eval_every": Key(_int, "1", "evaluate every k epochs (and at the last)"),
    "eval_subset": Key(_int, "1000", "examples used per evaluation"),
    # threat model
    "threat": Key(_choice("linf", "l2"), "linf", "input threat model"),
    "epsilon": Key(_num, "8/255", "input budget"),
    "step_size": Key(_num, "2/255", "training attack step size"),
    "attack_steps": Key(_int, "10", "training attack steps"),
    "random_start": Key(_bool, "true", "random start for attacks"),
    "eval_steps": Key(_int, "20", "evaluation attack steps"),
    "eval_step_size": Key(_num, "2/255", "evaluation attack step size"),
    # landscape
    "landscape_dims": Key(_int, "1", "1 or 2 directions"),
    "grid_min": Key(_num, "-1", "lowest alpha"),
    "grid_max": Key(_num, "1", "highest alpha"),
    "grid_points": Key(_int, "21", "alpha grid points"),
    "landscape_split": Key(_choice("train", "test"), "train", "data the landscape is measured on"),
    "landscape_subset": Key(_int, "1000", "examples used for the landscape"),
    "direction_seed": Key(_int, "0", "seed of the first random direction"),
    "svg": Key(_bool, "true", "also write an SVG plot"),
    # perturb-compare
    "gammas": Key(_nums, "0,1e-3,5e-3,1e-2", "perturbation sizes to compare"),
    "strategies": Key(_words, "awp,rwp", "perturbation strategies to compare"),
    "rwp_draws": Key(_int, "5", "random directions per RWP row"),
    "compare_subset": Key(_int, "500", "examples used by perturb-compare"),
    # histogram
    "layer": Key(str, "0", "layer name or index for the histogram"),
    "bins": Key(_int, "20", "histogram bins"),
    # checkpoints
    "checkpoint": Key(str, "", "checkpoint read by landscape/perturb-compare/histogram"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines -> resolved dict with defaults filled in."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {raw[key][1]})")
        raw[key] = (value, lineno)
    out = {}
    for key, spec in KEYS.items():
        value, lineno = raw.get(key, (spec.default, None))
        try:
            out[key] = spec.parse(value)
        except ValueError as exc:
            where = f"{source}:{lineno}" if lineno else f"default for {key}"
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
    out["_text"] = {k: v for k, (v, _) in raw.items()}
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def resolved_text(cfg: dict) -> str:
    lines = []
    for key, spec in KEYS.items():
        value = cfg["_text"].get(key, spec.default)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# builders ------------------------------------------------------------------

def input_shape(cfg: dict) -> tuple[int, ...]:
    if cfg["image"]:
        return (cfg["channels"], cfg["height"], cfg["width"])
    return (cfg["height"],)


def _need_file(path: str, key: str) -> Path:
    if not path:
        raise ConfigError(f"{key} must be set for this dataset")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{key}: no such file {path}")
    return p


def load_data(cfg: dict) -> tuple[Dataset, Dataset]:
    kind = cfg["dataset"]
    if kind == "synth":
        shape = input_shape(cfg)
        common = dict(margin=cfg["margin"], seed=cfg["data_seed"], noise=cfg["noise"],
                      image=cfg["image"], label_noise=cfg["label_noise"])
        train = synth_blobs(cfg["n_train"], cfg["classes"], shape, split="train", **common)
        test = synth_blobs(cfg["n_test"], cfg["classes"], shape, split="test", **common)
    elif kind == "idx":
        train = load_idx(_need_file(cfg["train_images"], "train_images"),
                         _need_file(cfg["train_labels"], "train_labels"), split="train")
        test = load_idx(_need_file(cfg["test_images"], "test_images"),
                        _need_file(cfg["test_labels"], "test_labels"), split="test")
    else:
        shape = input_shape(cfg) if cfg["image"] else None
        train = load_csv(_need_file(cfg["train_csv"], "train_csv"), shape=shape, split="train")
        test = load_csv(_need_file(cfg["test_csv"], "test_csv"), shape=shape, split="test")
    if kind != "synth":
        c = max(train.num_classes, test.num_classes, cfg["classes"] if "classes" in cfg["_text"] else 0)
        train = Dataset(train.x, train.y, c, "train")
        test = Dataset(test.x, test.y, c, "test")
    if cfg["train_limit"]:
        train = subset(train, cfg["train_limit"], cfg["seed"])
    if cfg["test_limit"]:
        test = subset(test, cfg["test_limit"], cfg["seed"])
    return train, test


def train_config(cfg: dict) -> TrainConfig:
    mode = cfg["mode"]
    use_awp = cfg["awp"] or mode == "awp" or cfg["rwp"]
    loss = LossSpec("at" if mode == "awp" else mode, beta=cfg["beta"], mart_lambda=cfg["mart_lambda"],
                    ssl_lambda=cfg["ssl_lambda"], ssl_inner=cfg["ssl_inner"],
                    weight_penalty=cfg["weight_penalty"], penalty_lambda=cfg["penalty_lambda"])
    awp = None
    if use_awp:
        awp = AWPConfig(cfg["gamma"], cfg["awp_steps"], cfg["awp_alternations"], cfg["awp_step_size"],
                        cfg["awp_norm"], cfg["carry_v"])
    schedule = ScheduleSpec(cfg["schedule"], cfg["milestones"], cfg["lr_factor"], cfg["peak_epoch"], cfg["peak_lr"])
    try:
        return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                           momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], schedule=schedule,
                           threat=train_threat(cfg), loss=loss, awp=awp, rwp=cfg["rwp"], seed=cfg["seed"],
                           eval_attack=eval_threat(cfg), eval_every=cfg["eval_every"],
                           eval_subset=cfg["eval_subset"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_threat(cfg: dict) -> ThreatModel:
    return ThreatModel(cfg["threat"], cfg["epsilon"], cfg["step_size"], cfg["attack_steps"], cfg["random_start"])


def eval_threat(cfg: dict) -> ThreatModel:
    return ThreatModel(cfg["threat"], cfg["epsilon"], cfg["eval_step_size"], cfg["eval_steps"], cfg["random_start"])


def expected_model(cfg: dict, train: Dataset):
    shape = train.input_shape
    try:
        specs = preset(cfg["arch"], shape, train.num_classes, cfg["bias"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return build_model(specs, shape, cfg["seed"])


# commands ------------------------------------------------------------------

def _checkpoint_path(args, cfg) -> Path:
    path = args.ckpt or cfg["checkpoint"]
    if not path:
        raise ConfigError("no checkpoint given (use --ckpt or the 'checkpoint' key)")
    return Path(path)


def _load_model(args, cfg, train: Dataset):
    net, _ = load_checkpoint(_checkpoint_path(args, cfg), expect=expected_model(cfg, train))
    return net


def cmd_train(args, cfg: dict, out: Path) -> None:
    train, test = load_data(cfg)
    tc = train_config(cfg)
    net = expected_model(cfg, train)
    unlabeled = None
    if tc.loss.kind == "ssl":
        train, unlabeled = prepare_ssl(net, train, cfg["labeled_fraction"], cfg["natural_epochs"], tc)
    result = fit(net, train, test, tc, unlabeled=unlabeled)
    result.metrics.write_csv(out / "metrics.csv")
    conf = tc.to_dict()
    save_checkpoint(result.last, out / "last.ckpt", tc.epochs, conf)
    save_checkpoint(result.best, out / "best.ckpt", result.metrics.best_epoch or tc.epochs, conf)
    last = result.metrics.last
    print(f"epoch {last.epoch}: train_rob {last.train_rob:.2f} test_rob {last.test_rob:.2f} "
          f"gap {last.gap:.2f}; best epoch {result.metrics.best_epoch}")


def cmd_landscape(args, cfg: dict, out: Path) -> None:
    train, test = load_data(cfg)
    net = _load_model(args, cfg, train)
    data = train if cfg["landscape_split"] == "train" else test
    data = subset(data, cfg["landscape_subset"], cfg["seed"])
    grid = default_grid(cfg["grid_min"], cfg["grid_max"], cfg["grid_points"])
    attack = eval_threat(cfg)
    k = args.repeat
    series = []
    for r in range(k):
        dseed = cfg["direction_seed"] + r
        d = sample_direction(net, dseed)
        name = "landscape.csv" if k == 1 else f"landscape_{r:02d}.csv"
        if cfg["landscape_dims"] == 2:
            e = sample_direction(net, dseed + 0x10000)
            prof = profile_2d(net, data, d, e, grid, grid, attack, cfg["seed"])
        elif cfg["landscape_dims"] == 1:
            prof = profile_1d(net, data, d, grid, attack, cfg["seed"])
            series.append((prof.alphas, prof.losses))
        else:
            raise ConfigError("landscape_dims must be 1 or 2")
        prof.write_csv(out / name)
        print(f"{name}: centre {prof.centre:.6f}")
    if cfg["svg"] and series:
        (out / "landscape.svg").write_text(svg_lines(series, "weight loss landscape", "alpha", "adversarial loss"))


def cmd_perturb_compare(args, cfg: dict, out: Path) -> None:
    train, test = load_data(cfg)
    net = _load_model(args, cfg, train)
    data = subset(test, cfg["compare_subset"], cfg["seed"])
    rows = perturbation_sweep(net, data, cfg["gammas"], cfg["strategies"], eval_threat(cfg),
                              cfg["seed"], cfg["rwp_draws"], cfg["awp_steps"])
    with open(out / "perturb_compare.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["strategy", "gamma", "loss"])
        for r in rows:
            w.writerow([r.strategy, repr(r.gamma), repr(r.loss)])
    if cfg["svg"]:
        series = []
        for s in cfg["strategies"]:
            pts = [(r.gamma, r.loss) for r in rows if r.strategy == s]
            series.append((np.array([p[0] for p in pts]), np.array([p[1] for p in pts])))
        (out / "perturb_compare.svg").write_text(svg_lines(series, " vs ".join(cfg["strategies"]), "gamma",
                                                           "adversarial loss"))
    for r in rows:
        print(f"{r.strategy} gamma={r.gamma:g} loss={r.loss:.6f}")


def cmd_histogram(args, cfg: dict, out: Path) -> None:
    train, _ = load_data(cfg)
    net = _load_model(args, cfg, train)
    layer = args.layer if args.layer is not None else cfg["layer"]
    bins = args.bins if args.bins is not None else cfg["bins"]
    edges, counts = weight_histogram(net, layer, bins)
    with open(out / "histogram.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    print(f"histogram of {layer}: {int(counts.sum())} weights in {bins} bins")


COMMANDS = {
    "train": cmd_train,
    "landscape": cmd_landscape,
    "perturb-compare": cmd_perturb_compare,
    "histogram": cmd_histogram,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="awp-lab", description="Adversarial weight perturbation lab")
    p.add_argument("command", choices=sorted(COMMANDS) + ["keys"])
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--repeat", type=int, default=1, help="landscape: number of random directions")
    p.add_argument("--ckpt", help="checkpoint to analyse")
    p.add_argument("--layer", help="histogram layer (name or index)")
    p.add_argument("--bins", type=int, help="histogram bins")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "keys":
        for key, spec in KEYS.items():
            print(f"{key} = {spec.default}    # {spec.doc}")
        return 0
    try:
        if not args.config or not args.out:
            raise ConfigError("--config and --out are required")
        if args.repeat < 1:
            raise ConfigError("--repeat must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
            cfg["_text"]["seed"] = str(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        text = resolved_text(cfg)
        (out / "config.resolved").write_text(text)
        sys.stdout.write(text)
        COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (AWPLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
