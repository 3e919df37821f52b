"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (layers, attention, spectral norm, the training loop)
is built on the small op set in this module.  Design points:

* numpy arrays are the storage; all data is row-major (C order).
* Training runs in float32; gradient-check builds use float64 (ops inherit
  the dtype of their inputs, so building a graph from float64 leaves keeps
  the whole computation in double precision).
* Broadcasting is supported only where layers need it (bias add,
  per-channel scale); gradients are un-broadcast by summing.
* Gradients accumulate additively into leaf tensors; call ``zero_grad``
  between backward passes.
* ``conv2d`` lowers to im2col + matmul so there is a single hot kernel.
"""

from __future__ import annotations

import ctypes
import os
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


def _tune_allocator() -> None:
    """Raise glibc's mmap threshold so the large short-lived arrays this
    graph produces (attention matrices, conv columns) are served from the
    reusable heap instead of page-faulting fresh mmaps every op.

    Several-fold speedup on the training loop; opt out with
    DESKGAN_NO_MALLOC_TUNE=1.
    """
    if os.environ.get("DESKGAN_NO_MALLOC_TUNE"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 30))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(1 << 30))  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Raised on autodiff contract violations (e.g. non-scalar backward root)."""


# Multiply counter used by the attention cost-scaling tests.  matmul/bmm/conv2d
# add their exact multiply counts here while enabled.
_flop_counter = {"enabled": False, "mults": 0}


def reset_flop_counter() -> None:
    _flop_counter["enabled"] = True
    _flop_counter["mults"] = 0


def read_flop_counter() -> int:
    return _flop_counter["mults"]


def stop_flop_counter() -> None:
    _flop_counter["enabled"] = False


def _count_mults(n: int) -> None:
    if _flop_counter["enabled"]:
        _flop_counter["mults"] += int(n)


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (used to detach fakes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """One recorded operation: inputs, and the rule mapping the output
    gradient to input gradients."""

    __slots__ = ("inputs", "backward_fn", "name")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, name: str):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """n-dimensional array of reals, optionally attached to the gradient tape.

    ``data`` is always a contiguous numpy array.  ``grad`` is lazily created,
    same shape as ``data``, and accumulates across backward passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype == np.float64 and dtype is None and not isinstance(data, np.ndarray):
            arr = arr.astype(np.float32)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ---- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        backward(self)

    # ---- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    # interior tensors skip the contiguity copy of the public constructor;
    # ops handle strided views fine and leaves are created via Tensor()
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.requires_grad = False
    out.grad = None
    out.node = None
    if _grad_enabled and any(t.requires_grad or t.node is not None for t in inputs):
        out.node = Node(inputs, backward_fn, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---- tape --------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the operations reaching a root tensor.

    Built by tracing the graph from the root; inputs always precede the
    node that consumes them, and replaying backward visits each recorded
    node exactly once.
    """

    def __init__(self, nodes_in_order: Sequence[Tensor]):
        self.order = list(nodes_in_order)

    @staticmethod
    def trace(root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return Tape(order)

    def replay_backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            input_grads = t.node.backward_fn(g)
            for inp, ig in zip(t.node.inputs, input_grads):
                if ig is None:
                    continue
                if inp.node is not None:
                    # backward rules may hand back (views of) the incoming
                    # gradient itself, so never accumulate in place
                    if id(inp) in grads:
                        grads[id(inp)] = grads[id(inp)] + ig
                    else:
                        grads[id(inp)] = ig
                elif inp.requires_grad:
                    inp._accumulate(ig)
        # root may itself be a leaf wrt recording (no node) — nothing to do then


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Additive: calling twice without zero_grad doubles the gradients.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            loss._accumulate(seed)
        return
    Tape.trace(loss).replay_backward(loss, seed)


# ---- elementwise ops -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), bw, "div")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / np.sqrt(a.data)),)

    return _make(data, (a,), bw, "sqrt")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), bw, "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    data = np.where(a.data > 0, a.data, slope * a.data)

    def bw(g):
        return (g * np.where(a.data > 0, 1.0, slope).astype(a.dtype),)

    return _make(data, (a,), bw, "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), bw, "tanh")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        return (g * data,)

    return _make(data, (a,), bw, "exp")


# ---- shape ops -----------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), bw, "reshape")


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(data, (a,), bw, "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True),)

    return _make(data, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bw, "concat")


# ---- indexed ops ---------------------------------------------------------------


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D table selected by integer index (embedding lookup)."""
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows wants a 1-D index, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"row index out of range: max {int(idx.max())} vs table rows {table.shape[0]}")
    data = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(data, (table,), bw, "gather_rows")


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """One element per row of a 2-D tensor: out[i] = x[i, idx[i]]."""
    idx = np.asarray(idx)
    n = x.shape[0]
    if idx.shape != (n,):
        raise ShapeError(f"take_per_row index shape {idx.shape} vs rows {n}")
    rows = np.arange(n)
    data = x.data[rows, idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(data, (x,), bw, "take_per_row")


# ---- matmul family -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product.  Backward: dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul wants 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    _count_mults(a.shape[0] * a.shape[1] * b.shape[1])
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the leading axis: [B×m×k] @ [B×k×n]."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm wants 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} vs {b.shape}")
    _count_mults(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _make(data, (a, b), bw, "bmm")


def channel_map(w: Tensor, x: Tensor) -> Tensor:
    """Location-wise linear map of channels: [P×C] applied to [B×C×N].

    Equivalent to a 1×1 convolution over flattened spatial locations.
    """
    if w.ndim != 2 or x.ndim != 3:
        raise ShapeError(f"channel_map wants [P×C] and [B×C×N], got {w.shape} and {x.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel_map channel mismatch: {w.shape} vs {x.shape}")
    _count_mults(x.shape[0] * w.shape[0] * w.shape[1] * x.shape[2])
    data = np.matmul(w.data, x.data)  # broadcasts over the batch axis

    def bw(g):
        gw = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
        gx = np.matmul(w.data.T, g)
        return gw, gx

    return _make(data, (w, x), bw, "channel_map")


# ---- softmax -------------------------------------------------------------------


def softmax_rows(s: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-shifted for stability.

    Accepts [N×N] matrices or batched [B×N×N] stacks; every row of the
    output is nonnegative and sums to 1.
    """
    if s.ndim not in (2, 3):
        raise ShapeError(f"softmax_rows wants 2-D or 3-D input, got {s.shape}")
    data = s.data - s.data.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.einsum("...i,...i->...", g, data)[..., None]
        out = g - dot
        out *= data
        return (out,)

    return _make(data, (s,), bw, "softmax_rows")


def log_softmax_rows(s: Tensor) -> Tensor:
    if s.ndim != 2:
        raise ShapeError(f"log_softmax_rows wants 2-D input, got {s.shape}")
    shifted = s.data - s.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bw(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _make(data, (s,), bw, "log_softmax_rows")


# ---- convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(view).reshape(b, c * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [B×C×H×W] input with [O×C×kh×kw] filters.

    Lowered to im2col + one matmul per batch.  Output spatial size is
    floor((H + 2·pad − kh)/stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-D x and w, got {x.shape} and {w.shape}")
    b, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if kh > h + 2 * pad or kw > wd + 2 * pad or oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d output extent non-positive for input {x.shape}, "
            f"weight {w.shape}, stride={stride}, pad={pad}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, c * kh * kw)
    _count_mults(b * o * (c * kh * kw) * (oh * ow))
    out = np.matmul(wmat[None, :, :], cols).reshape(b, o, oh, ow)

    def bw(g):
        gmat = np.ascontiguousarray(g.reshape(b, o, oh * ow))
        gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(wmat.T[None, :, :], gmat)
        gx = _col2im(gcols, x.shape, kh, kw, stride, pad)
        return gx, gw

    return _make(out, (x, w), bw, "conv2d")


# ---- compound helpers ------------------------------------------------------------


def gated_residual(x: Tensor, o: Tensor, gamma: Tensor) -> Tensor:
    """y = gamma·o + x with an exact identity short-circuit at gamma == 0.

    The short-circuit makes a fresh (zero-gated) block reproduce its input
    bit-for-bit; gradients are still those of gamma·o + x.
    """
    if x.shape != o.shape:
        raise ShapeError(f"gated_residual shape mismatch: {x.shape} vs {o.shape}")
    if gamma.size != 1:
        raise ShapeError(f"gate must be a single scalar, got shape {gamma.shape}")
    gval = float(gamma.data.reshape(()))
    if gval == 0.0:
        data = x.data.copy()
    else:
        data = x.data + gval * o.data

    def bw(g):
        return g, gval * g, np.array([(g * o.data).sum()], dtype=gamma.dtype).reshape(gamma.shape)

    return _make(data, (x, o, gamma), bw, "gated_residual")


def as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
