"""Small dense/conv classifiers with per-layer and per-filter weight views.

Parameters live in an ordered ``dict`` keyed ``"<unit>.weight"`` /
``"<unit>.bias"`` where units are named ``dense1``, ``conv2`` ... in order of
appearance. A "filter" is one output channel of a conv kernel (OIHW slice
``w[j]``) or one output row of a dense weight, stored ``(out, in)``.
Only ``*.weight`` arrays are perturbable; biases are never perturbed,
filter-normalised, or counted in the relative-size constraint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import Stream


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | relu | flatten
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    pad: int = 0
    has_bias: bool = True

    def __str__(self):
        if self.kind == "dense":
            return f"dense({self.in_dim}->{self.out_dim})"
        if self.kind == "conv2d":
            return f"conv2d({self.in_dim}->{self.out_dim}, k={self.kernel}, pad={self.pad})"
        return self.kind

    @property
    def parameterized(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "kernel": self.kernel, "pad": self.pad, "has_bias": self.has_bias}


def dense(in_dim: int, out_dim: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim, has_bias=bias)


def conv(in_ch: int, out_ch: int, k: int, pad: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", in_ch, out_ch, kernel=k, pad=pad, has_bias=bias)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


def _out_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...] | None:
    if spec.kind == "dense":
        return (spec.out_dim,) if shape == (spec.in_dim,) else None
    if spec.kind == "conv2d":
        if len(shape) != 3 or shape[0] != spec.in_dim:
            return None
        h = shape[1] + 2 * spec.pad - spec.kernel + 1
        w = shape[2] + 2 * spec.pad - spec.kernel + 1
        return (spec.out_dim, h, w) if h > 0 and w > 0 else None
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "relu":
        return shape
    raise ShapeError(f"unknown layer kind {spec.kind!r}")


def infer_shapes(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Output shape after each layer; raises naming the first incompatible pair."""
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    prev = "input" + str(shape)
    for i, spec in enumerate(specs):
        if spec.parameterized and (spec.in_dim <= 0 or spec.out_dim <= 0
                                   or (spec.kind == "conv2d" and spec.kernel <= 0) or spec.pad < 0):
            raise ShapeError(f"layer {i} {spec}: dimensions must be positive")
        out = _out_shape(spec, shape)
        if out is None:
            raise ShapeError(f"layer {i} {spec} cannot follow {prev} producing shape {shape}")
        shapes.append(out)
        shape = out
        prev = f"layer {i} {spec}"
    return shapes


class Network:
    """Layer list plus an ordered parameter dict (treated as immutable)."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], params: Mapping[str, np.ndarray]):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = infer_shapes(self.specs, self.input_shape)
        self.units: list[tuple[int, str]] = []
        counts: dict[str, int] = {}
        for i, s in enumerate(self.specs):
            if s.parameterized:
                stem = "dense" if s.kind == "dense" else "conv"
                counts[stem] = counts.get(stem, 0) + 1
                self.units.append((i, f"{stem}{counts[stem]}"))
        expected = self._param_shapes()
        if set(params) != set(expected):
            raise ShapeError(f"parameter names {sorted(params)} do not match architecture {sorted(expected)}")
        self.params: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} does not match architecture {shape}")
            self.params[name] = arr

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, name in self.units:
            s = self.specs[i]
            if s.kind == "dense":
                out[f"{name}.weight"] = (s.out_dim, s.in_dim)
            else:
                out[f"{name}.weight"] = (s.out_dim, s.in_dim, s.kernel, s.kernel)
            if s.has_bias:
                out[f"{name}.bias"] = (s.out_dim,)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def weight_names(self) -> list[str]:
        """Perturbable multiplicative weights, in layer order."""
        return [f"{name}.weight" for _, name in self.units]

    @property
    def unit_names(self) -> list[str]:
        return [name for _, name in self.units]

    def weights(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in self.weight_names}

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "Network":
        new = dict(self.params)
        new.update(updates)
        return Network(self.specs, self.input_shape, new)

    def leaves(self) -> dict[str, T.Tensor]:
        """Fresh gradient-tracking leaves for every parameter."""
        return {k: T.Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def forward(self, x, params: Mapping[str, T.Tensor | np.ndarray] | None = None) -> T.Tensor:
        """Logits for a batch ``x`` of shape ``(N, *input_shape)``."""
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        if h.shape[1:] != self.input_shape:
            raise ShapeError(f"input batch shape {h.shape} does not match network input {self.input_shape}")
        p = self.params if params is None else params
        names = dict(self.units)
        for i, spec in enumerate(self.specs):
            if spec.kind == "relu":
                h = T.relu(h)
            elif spec.kind == "flatten":
                h = T.flatten(h)
            else:
                unit = names[i]
                w = p[f"{unit}.weight"]
                w = w if isinstance(w, T.Tensor) else T.Tensor(w)
                if spec.kind == "dense":
                    h = T.matmul(h, T.transpose(w))
                else:
                    h = T.conv2d(h, w, pad=spec.pad)
                if spec.has_bias:
                    b = p[f"{unit}.bias"]
                    h = T.add_bias(h, b if isinstance(b, T.Tensor) else T.Tensor(b))
        return h

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def arch(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_arch(cls, arch: Mapping, params: Mapping[str, np.ndarray]) -> "Network":
        specs = [LayerSpec(**d) for d in arch["layers"]]
        return cls(specs, arch["input_shape"], params)


def build_model(specs: Sequence[LayerSpec], input_shape: Sequence[int], seed: int,
                num_classes: int | None = None) -> Network:
    """He-uniform weights from the seeded stream, zero biases."""
    specs = list(specs)
    shapes = infer_shapes(specs, input_shape)
    if num_classes is not None and shapes[-1] != (num_classes,):
        raise ShapeError(f"network output shape {shapes[-1]} does not match {num_classes} classes")
    params = {}
    counts: dict[str, int] = {}
    for i, s in enumerate(specs):
        if not s.parameterized:
            continue
        stem = "dense" if s.kind == "dense" else "conv"
        counts[stem] = counts.get(stem, 0) + 1
        unit = f"{stem}{counts[stem]}"
        if s.kind == "dense":
            shape = (s.out_dim, s.in_dim)
            fan_in = s.in_dim
        else:
            shape = (s.out_dim, s.in_dim, s.kernel, s.kernel)
            fan_in = s.in_dim * s.kernel * s.kernel
        bound = np.sqrt(6.0 / fan_in)
        params[f"{unit}.weight"] = Stream(seed, 0x1417, i).uniform(-bound, bound, shape)
        if s.has_bias:
            params[f"{unit}.bias"] = np.zeros(s.out_dim)
    return Network(specs, input_shape, params)


def preset(name: str, input_shape: Sequence[int], num_classes: int, bias: bool = True) -> list[LayerSpec]:
    """``mlp-small`` or ``cnn-small`` layer lists for the given input."""
    input_shape = tuple(input_shape)
    flat = int(np.prod(input_shape))
    if name == "mlp-small":
        head = [FLATTEN] if len(input_shape) > 1 else []
        return head + [dense(flat, 64, bias), RELU, dense(64, num_classes, bias)]
    if name == "cnn-small":
        if len(input_shape) != 3:
            raise ShapeError(f"cnn-small needs a (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        if h < 5 or w < 5:
            raise ShapeError(f"cnn-small needs at least 5x5 images, got {h}x{w}")
        return [conv(c, 8, 3, bias=bias), RELU, conv(8, 16, 3, bias=bias), RELU, FLATTEN,
                dense(16 * (h - 4) * (w - 4), num_classes, bias)]
    raise ValueError(f"unknown architecture preset {name!r}")


# norms ---------------------------------------------------------------------

def tensor_norm(a: np.ndarray, kind: str = "frobenius") -> float:
    if kind == "frobenius":
        return float(np.sqrt(np.sum(a * a)))
    if kind == "l1":
        return float(np.sum(np.abs(a)))
    raise ValueError(f"unknown norm {kind!r}")


def filter_norms(a: np.ndarray, kind: str = "frobenius") -> np.ndarray:
    flat = a.reshape(a.shape[0], -1)
    if kind == "frobenius":
        return np.sqrt(np.sum(flat * flat, axis=1))
    if kind == "l1":
        return np.sum(np.abs(flat), axis=1)
    raise ValueError(f"unknown norm {kind!r}")


def layer_norms(net: Network, granularity: str = "layer", norm: str = "frobenius") -> dict[str, float | np.ndarray]:
    """Norm of every perturbable weight, whole-layer or one value per filter."""
    if granularity not in ("layer", "filter"):
        raise ValueError(f"granularity must be 'layer' or 'filter', got {granularity!r}")
    out = {}
    for name, w in net.weights().items():
        out[name] = tensor_norm(w, norm) if granularity == "layer" else filter_norms(w, norm)
    return out


def resolve_unit(net: Network, layer: int | str) -> str:
    """Map a unit name (``conv1``), weight key or parameterized-layer index to a unit name."""
    names = net.unit_names
    if isinstance(layer, str):
        key = layer[:-len(".weight")] if layer.endswith(".weight") else layer
        if key in names:
            return key
        if key.isdigit():
            layer = int(key)
        else:
            raise ShapeError(f"no parameterized layer named {layer!r}; have {names}")
    if not 0 <= int(layer) < len(names):
        raise ShapeError(f"layer index {layer} out of range for {len(names)} parameterized layers")
    return names[int(layer)]


def rescale_pair(net: Network, layer: int | str, c: float) -> Network:
    """Scale one layer (weight and bias) by ``c`` and the next layer's weight by ``1/c``.

    With only ReLU/flatten in between this leaves the network function
    unchanged, since ReLU is positively homogeneous.
    """
    if not np.isfinite(c) or c <= 0:
        raise ValueError(f"rescale factor must be positive and finite, got {c}")
    unit = resolve_unit(net, layer)
    pos = net.unit_names.index(unit)
    if pos + 1 >= len(net.units):
        raise ShapeError(f"{unit} is the last parameterized layer; nothing to compensate")
    i, _ = net.units[pos]
    j, nxt = net.units[pos + 1]
    between = [s.kind for s in net.specs[i + 1:j]]
    if any(k not in ("relu", "flatten") for k in between):
        raise ShapeError(f"layers between {unit} and {nxt} are not all relu/flatten: {between}")
    upd = {f"{unit}.weight": net.params[f"{unit}.weight"] * c,
           f"{nxt}.weight": net.params[f"{nxt}.weight"] / c}
    if f"{unit}.bias" in net.params:
        upd[f"{unit}.bias"] = net.params[f"{unit}.bias"] * c
    return net.with_params(upd)


def weight_histogram(net: Network, layer: int | str, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-bin histogram of one layer's weights over [min, max]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    w = net.params[f"{resolve_unit(net, layer)}.weight"].ravel()
    counts, edges = np.histogram(w, bins=bins, range=(float(w.min()), float(w.max())))
    return edges, counts
