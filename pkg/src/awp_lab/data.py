"""Desk-scale datasets: seeded synthetic blobs, IDX and CSV ingestion, batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, LabelError
from .rng import Stream

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray              # (N, *shape), values in [0, 1]
    y: np.ndarray | None       # (N,) int64 class indices, None when unlabeled
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise FormatError(f"{self.split} inputs leave [0, 1]: min {self.x.min()}, max {self.x.max()}")
        if self.y is not None:
            if self.y.shape != (self.x.shape[0],):
                raise FormatError(f"{self.split}: {self.y.shape[0]} labels for {self.x.shape[0]} inputs")
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
                raise LabelError(f"{self.split}: labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.x.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def take(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], None if self.y is None else self.y[idx],
                       self.num_classes, split or self.split)


def _balanced_labels(n: int, c: int, stream: Stream) -> np.ndarray:
    return (np.arange(n) % c)[stream.permutation(n)]


def synth_blobs(n: int, num_classes: int, shape: Sequence[int] | int, margin: float = 4.0,
                seed: int = 0, noise: float = 1.0, image: bool = False,
                label_noise: float = 0.0, split: str = "train") -> Dataset:
    """Gaussian class clusters mapped into [0, 1].

    Vector mode draws ``C`` random centroids of norm ``margin / 2`` and adds
    isotropic noise. Image mode (``shape = (ch, H, W)``) renders each class
    as two Gaussian bumps at class-specific positions, jitters bump centres
    per sample and adds pixel noise, so convolutions have local structure to
    find. ``label_noise`` flips that fraction of labels uniformly. The class
    geometry depends only on ``seed``, so two calls with the same seed and
    different ``split`` tags draw from one distribution.
    """
    if n < num_classes:
        raise ValueError(f"need n >= C, got n={n}, C={num_classes}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    geom = Stream(seed, 0xB10B)
    samples = Stream(seed, 0x5A3D, sum(map(ord, split)))
    y = _balanced_labels(n, num_classes, samples.child(1))
    if not image:
        d = int(np.prod(shape))
        mu = geom.normal((num_classes, d))
        mu *= (margin / 2) / np.linalg.norm(mu, axis=1, keepdims=True)
        z = mu[y] + noise * samples.child(2).normal((n, d))
        scale = 0.5 / (margin / 2 + 3 * noise)
        x = np.clip(0.5 + scale * z, 0.0, 1.0).reshape((n,) + shape)
    else:
        if len(shape) != 3:
            raise ValueError(f"image mode needs (channels, H, W), got {shape}")
        ch, h, w = shape
        centers = geom.uniform(0.0, 1.0, (num_classes, 2, 2)) * np.array([h - 1, w - 1])
        jitter = samples.child(3).normal((n, 2, 2)) * 0.6
        amp = 1.0 + 0.25 * samples.child(4).normal((n, 2))
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        img = np.zeros((n, h, w))
        for b in range(2):
            cy = centers[y, b, 0] + jitter[:, b, 0]
            cx = centers[y, b, 1] + jitter[:, b, 1]
            d2 = (rr[None] - cy[:, None, None]) ** 2 + (cc[None] - cx[:, None, None]) ** 2
            img += amp[:, b, None, None] * np.exp(-d2 / 2.0)
        img = margin * img[:, None].repeat(ch, axis=1) + noise * samples.child(5).normal((n, ch, h, w))
        x = np.clip(0.2 + 0.6 * img / (margin + 3 * noise), 0.0, 1.0)
    if label_noise > 0:
        s = samples.child(6)
        flip = s.random((n,)) < label_noise
        y = np.where(flip, s.integers(num_classes, (n,)), y)
    return Dataset(x.astype(np.float64), y.astype(np.int64), num_classes, split)


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic ``(first, rest)`` split; ``first`` holds ``round(fraction * n)`` rows."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    perm = Stream(seed, 0x5917).permutation(len(ds))
    k = int(round(fraction * len(ds)))
    return ds.take(np.sort(perm[:k])), ds.take(np.sort(perm[k:]))


def subset(ds: Dataset, k: int, seed: int) -> Dataset:
    """Fixed seeded subset of at most ``k`` rows (original order kept)."""
    if k >= len(ds):
        return ds
    perm = Stream(seed, 0x5B5E7).permutation(len(ds))
    return ds.take(np.sort(perm[:k]))


def batches(ds: Dataset, m: int, seed: int, epoch: int, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index batches of size ``m`` over a per-epoch Fisher-Yates order; last partial kept."""
    if m < 1:
        raise ValueError("batch size must be >= 1")
    order = Stream(seed, 0xBA7C, epoch).permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), m):
        yield order[start:start + m]


# IDX -----------------------------------------------------------------------

def _read_header(raw: bytes, path, magic: int) -> tuple[list[int], int]:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated IDX header")
    dims = list(struct.unpack(f">{ndim}I", raw[4:end]))
    return dims, end


def read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims, off = _read_header(raw, path, magic)
    need = int(np.prod(dims))
    if len(raw) - off != need:
        raise FormatError(f"{path}: payload has {len(raw) - off} bytes, dims {dims} need {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """IDX image/label pair -> Dataset with pixels scaled by 1/255 and a channel axis."""
    imgs = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    x = imgs.astype(np.float64)[:, None] / 255.0
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(x, labels.astype(np.int64), c, split)


def load_csv(path, num_classes: int | None = None, shape: Sequence[int] | None = None,
             split: str = "train") -> Dataset:
    """Header row, one example per line, features in [0, 1], integer label last."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:-1]] + [int(row[-1])])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    x = arr[:, :-1]
    y = arr[:, -1].astype(np.int64)
    if shape is not None:
        x = x.reshape((x.shape[0],) + tuple(shape))
    c = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(x, y, c, split)


def save_csv(path, ds: Dataset) -> None:
    flat = ds.x.reshape(len(ds), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
