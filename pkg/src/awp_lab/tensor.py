"""Dense float64 tensors with a minimal reverse-mode autodiff.

Every operation returns a new :class:`Tensor`; when any operand requires a
gradient the result remembers its parents and a closure that maps the output
adjoint to input adjoints. :func:`backward` walks that graph once in reverse
topological order and writes ``.grad`` on every node that requires one.

Only the primitives needed by small MLP/CNN classifiers are provided:
matmul, conv2d (stride 1), bias add, ReLU, flatten, log-softmax and the
elementwise/reduction helpers the robust losses are composed from.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

LOG_FLOOR = 1e-12

__all__ = [
    "Tensor", "tensor", "backward", "forward_op", "finite_difference_check",
    "add", "sub", "mul", "neg", "matmul", "transpose", "conv2d", "add_bias",
    "relu", "flatten", "log_softmax", "exp", "log", "abs", "sum", "mean", "sum_rows",
    "pick", "max_excluding", "LOG_FLOOR",
]


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs.

    ``grad`` is the adjoint; it is ``None`` until :func:`backward` runs and
    then has exactly the shape of ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / float(other))


def tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return Tensor(x.data, requires_grad=requires_grad)
    return Tensor(np.array(x, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add")
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data - c, (a,), lambda g: (g,), "sub")
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul")
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``; the gradient is zero where floored."""
    x = a.data
    safe = np.maximum(x, floor)
    live = x > floor

    def bw(g):
        return (np.where(live, g / safe, 0.0),)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(safe)
    return _result(out, (a,), bw, "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    # sign(0) = 0 subgradient
    sgn = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def relu(a: Tensor) -> Tensor:
    # strict inequality: the subgradient at exactly 0 is 0
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible operand shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    # (N, C, H, W) -> (N, C, Ho, Wo, k, k) view
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d(x: Tensor, w: Tensor, pad: int = 0) -> Tensor:
    """Stride-1 cross-correlation, NCHW input and OIHW square kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c or kh != kw:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = kh
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k)
    wdat = w.data
    out = np.tensordot(cols, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def bw(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            wflip = wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gxp = np.tensordot(_im2col(gp, k), wflip, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an (N, C) or (N, C, H, W) tensor."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    if x.data.ndim == 2:
        out = x.data + b.data
        axes = (0,)
    else:
        out = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    return _result(out, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: expected a batch, got shape {x.shape}")
    shape = x.shape
    return _result(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def log_softmax(z: Tensor) -> Tensor:
    if z.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected (N, C) logits, got {z.shape}")
    s = z.data - z.data.max(axis=1, keepdims=True)
    out = s - np.log(np.exp(s).sum(axis=1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _result(out, (z,), bw, "log_softmax")


# reductions and indexing --------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),), "mean")


def sum_rows(a: Tensor) -> Tensor:
    """(N, C) -> (N,) by summing each row."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected a matrix, got {a.shape}")
    c = a.shape[1]
    return _result(a.data.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], c, axis=1),), "sum_rows")


def _check_index(op: str, a: Tensor, idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"{op}: index shape {idx.shape} does not match rows of {a.shape}")
    return idx.astype(np.int64)


def pick(a: Tensor, idx) -> Tensor:
    """Row-wise gather ``a[i, idx[i]]``."""
    idx = _check_index("pick", a, idx)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _result(a.data[rows, idx], (a,), bw, "pick")


def max_excluding(a: Tensor, idx) -> Tensor:
    """Row-wise ``max_{k != idx[i]} a[i, k]``; gradient flows to the first maximiser."""
    idx = _check_index("max_excluding", a, idx)
    if a.shape[1] < 2:
        raise ShapeError("max_excluding needs at least two columns")
    rows = np.arange(a.shape[0])
    masked = a.data.copy()
    masked[rows, idx] = -np.inf
    arg = masked.argmax(axis=1)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, arg] = g
        return (out,)

    return _result(a.data[rows, arg], (a,), bw, "max_excluding")


# dispatcher ----------------------------------------------------------------

_FORWARD = {
    "matmul": lambda ins, **kw: matmul(*ins),
    "conv2d": lambda ins, pad=0: conv2d(ins[0], ins[1], pad=pad),
    "add_bias": lambda ins, **kw: add_bias(*ins),
    "relu": lambda ins, **kw: relu(*ins),
    "flatten": lambda ins, **kw: flatten(*ins),
    "log_softmax": lambda ins, **kw: log_softmax(*ins),
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply one of the network primitives by name."""
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_FORWARD)}") from None
    return fn([_as_tensor(t) for t in inputs], **kwargs)


# reverse pass --------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` with d(root)/d(node) for every node that requires it.

    The graph below ``root`` is released afterwards, so a second call on the
    same root only sees the root itself.
    """
    if root.data.shape != () and root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(node.grad)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


def finite_difference_check(f: Callable[[Tensor], Tensor], at, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` maps a tensor to a scalar tensor built from taped ops; the analytic
    gradient comes from :func:`backward`.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    root = f(leaf)
    if not np.isfinite(root.data).all():
        raise NonFiniteError("f is not finite at the base point")
    backward(root)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    def value(x):
        v = float(f(Tensor(x)).data)
        if not np.isfinite(v):
            raise NonFiniteError("f is not finite at a perturbed point")
        return v

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        numeric[i] = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * h)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
