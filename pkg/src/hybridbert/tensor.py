"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed, row-major, float32/float64 only. Differentiable operations
record onto an explicit :class:`Tape`; replaying the tape in reverse
computes exact gradients for every ``requires_grad`` tensor reachable from
a scalar loss. Tapes are per-thread: tensors without an attached tape are
plain values and can move freely between threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "neg_inf",
    "matmul",
    "add",
    "sub",
    "mul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layer_norm",
    "gelu",
    "max_pool1d",
    "embedding",
    "gather_rows",
    "pick_lastdim",
    "masked_fill",
    "dropout",
    "zero_grads",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Stand-ins for -inf: far below any realistic logit, yet exp() of
# (sentinel - rowmax) underflows to exactly 0.0 without NaN arithmetic.
NEG_INF_F32 = -1.0e9
NEG_INF_F64 = -1.0e18

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def neg_inf(dtype) -> float:
    """Large-negative masking sentinel for the given float dtype."""
    dt = np.dtype(dtype)
    if dt == np.float32:
        return NEG_INF_F32
    if dt == np.float64:
        return NEG_INF_F64
    raise TypeError(f"no masking sentinel for dtype {dt}")


class Tensor:
    """A dense n-dimensional array that can participate in gradient tapes.

    ``data`` is always a contiguous-enough numpy array of float32/float64.
    ``grad`` is populated (same shape/dtype) by :func:`backward`.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
                arr = arr.astype(np.float32)
            else:
                raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return _transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        denom = _axis_size(self.shape, axis)
        return mul(_sum(self, axis=axis, keepdims=keepdims), 1.0 / denom)


class _Node:
    """One executed operation: output, inputs, and its backward closure."""

    __slots__ = ("out", "inputs", "backward_fn", "name", "tape")

    def __init__(self, out: Tensor, inputs, backward_fn: Callable[[np.ndarray], None], name: str):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name
        self.tape: Optional[Tape] = None


_tls = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations on the current thread.

    Use as a context manager around a forward computation. Records append
    in execution order, so reverse iteration is a valid topological order.
    A tape can be backward()-ed exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "tapes", None)
        if stack is None:
            stack = _tls.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.tapes.pop()
        return False

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def recorded_elements(self) -> int:
        """Total elements across every recorded op output (activation proxy)."""
        return sum(n.out.data.size for n in self.nodes)

    def max_output_elements(self) -> int:
        return max((n.out.data.size for n in self.nodes), default=0)


def _record(out: Tensor, inputs, backward_fn, name: str) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, tuple(t for t in inputs if isinstance(t, Tensor)), backward_fn, name)
        node.tape = tape
        out._node = node
        tape.record(node)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    The recording tape must still be alive and not already consumed; a
    second backward() through the same tape raises. Gradients accumulate
    into ``.grad`` buffers, so callers reset leaves between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accum(loss, np.ones_like(loss.data))
            return
        raise RuntimeError("loss is not connected to any recorded computation")

    tape = loss._node.tape
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward(); rebuild the graph")
    tape.consumed = True

    reachable = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is not None and id(node) not in reachable:
            reachable.add(id(node))
            stack.extend(inp for inp in node.inputs if inp.requires_grad)

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if id(node) in reachable and node.out.grad is not None:
            node.backward_fn(node.out.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- helpers -----------------------------------------------------------------


def _axis_size(shape, axis) -> float:
    if axis is None:
        return float(int(np.prod(shape))) if shape else 1.0
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return float(n)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _as_const(x, dtype) -> np.ndarray:
    return np.asarray(x, dtype=dtype)


# -- elementwise and structural ops -------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch in add: {a.dtype} vs {b.dtype}")
        out = Tensor(a.data + b.data)

        def bwd(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))

        return _record(out, (a, b), bwd, "add")
    c = _as_const(b, a.dtype)
    out = Tensor(a.data + c)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))

    return _record(out, (a,), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -np.asarray(b))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch in mul: {a.dtype} vs {b.dtype}")
        out = Tensor(a.data * b.data)

        def bwd(g):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))

        return _record(out, (a, b), bwd, "mul")
    c = _as_const(b, a.dtype)
    out = Tensor(a.data * c)

    def bwd(g):
        _accum(a, _unbroadcast(g * c, a.shape))

    return _record(out, (a,), bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcastable leading (batch) dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch in matmul: {a.dtype} vs {b.dtype}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _record(out, (a, b), bwd, "matmul")


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy() if g.shape != a.shape else g)
            return
        if not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            ax = tuple(x % a.ndim for x in ax)
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.shape))

    return _record(out, (a,), bwd, "sum")


def _reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), bwd, "reshape")


def _transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _record(out, (a,), bwd, "transpose")


def _getitem(a: Tensor, key) -> Tensor:
    # basic indexing only (ints/slices): each source element appears at most
    # once in the result, so the backward scatter is a plain assignment-add
    out = Tensor(a.data[key])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accum(a, full)

    return _record(out, (a,), bwd, "getitem")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True with a constant."""
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, np.asarray(value, dtype=a.dtype), a.data))

    def bwd(g):
        _accum(a, _unbroadcast(np.where(mask, 0.0, g), a.shape))

    return _record(out, (a,), bwd, "masked_fill")


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; p=0 is the identity and records nothing."""
    if p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout with p > 0 needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, dtype=a.dtype)
    return mul(a, keep)


# -- nonlinearities ------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * cdf).astype(a.dtype, copy=False))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accum(a, (g * (cdf + x * pdf)).astype(a.dtype, copy=False))

    return _record(out, (a,), bwd, "gelu")


def softmax_lastdim(a: Tensor, additive_mask=None) -> Tensor:
    """Stabilized softmax over the last dimension.

    `additive_mask` (numpy array or Tensor treated as a constant,
    broadcastable to `a`) holds 0 for kept entries and the large-negative
    sentinel for excluded ones; excluded entries get exactly zero weight.
    Rows whose entries are all excluded come back as all zeros, and the
    returned tensor carries a `degenerate_rows` bool array (shape
    ``a.shape[:-1]``, None when no mask was given) the caller can query.
    """
    x = a.data
    degenerate = None
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        m = m.astype(a.dtype, copy=False)
        x = x + m
        threshold = neg_inf(a.dtype) * 0.5
        degenerate = np.all(np.broadcast_to(m, x.shape) <= threshold, axis=-1)
    y = x - x.max(axis=-1, keepdims=True)
    e = np.exp(y)
    s = e / e.sum(axis=-1, keepdims=True)
    if degenerate is not None and degenerate.any():
        s = np.where(degenerate[..., None], 0.0, s).astype(a.dtype, copy=False)
    out = Tensor(s)
    out.degenerate_rows = degenerate

    def bwd(g):
        dx = s * (g - (g * s).sum(axis=-1, keepdims=True))
        _accum(a, dx.astype(a.dtype, copy=False))

    return _record(out, (a,), bwd, "softmax")


def log_softmax_lastdim(a: Tensor) -> Tensor:
    y = a.data - a.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(y).sum(axis=-1, keepdims=True))
    lp = y - logz
    out = Tensor(lp)

    def bwd(g):
        _accum(a, (g - np.exp(lp) * g.sum(axis=-1, keepdims=True)).astype(a.dtype, copy=False))

    return _record(out, (a,), bwd, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize over the last dimension, then scale and shift."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {a.shape[-1:]}"
        )
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = xc * ivar
    out = Tensor((gamma.data * xhat + beta.data).astype(a.dtype, copy=False))

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accum(beta, g.sum(axis=lead))
        _accum(gamma, (g * xhat).sum(axis=lead))
        dxhat = g * gamma.data
        dx = (ivar / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        _accum(a, dx.astype(a.dtype, copy=False))

    return _record(out, (a, gamma, beta), bwd, "layer_norm")


def max_pool1d(a: Tensor, window: int, stride: int = 1) -> Tensor:
    """Per-channel sliding-window max over the length axis (axis -2).

    Same-length output: windows are centered, edges padded with the
    large-negative sentinel so only valid positions can win (a position is
    always inside its own window, so no window is ever empty). The backward
    pass routes each gradient to the lowest-index maximal element.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"max_pool1d window must be odd and positive, got {window}")
    if stride != 1:
        raise ValueError(f"max_pool1d supports stride 1 only, got {stride}")
    if a.ndim < 2:
        raise ValueError(f"max_pool1d needs (..., length, channels), got shape {a.shape}")
    length = a.shape[-2]
    half = window // 2
    lead = a.shape[:-2]
    channels = a.shape[-1]
    x3 = a.data.reshape(-1, length, channels)
    pad = np.full((x3.shape[0], length + 2 * half, channels), neg_inf(a.dtype), dtype=a.dtype)
    pad[:, half : half + length] = x3
    win = np.lib.stride_tricks.sliding_window_view(pad, window, axis=1)  # (b, l, c, w)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out3 = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = Tensor(out3.reshape(*lead, length, channels).copy())

    def bwd(g):
        g3 = g.reshape(-1, length, channels)
        gpad = np.zeros_like(pad)
        b_idx = np.arange(x3.shape[0])[:, None, None]
        l_idx = np.arange(length)[None, :, None] + arg  # padded coordinates
        c_idx = np.arange(channels)[None, None, :]
        np.add.at(gpad, (b_idx, l_idx, c_idx), g3)
        _accum(a, gpad[:, half : half + length].reshape(a.shape))

    return _record(out, (a,), bwd, "max_pool1d")


# -- integer-indexed ops -------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]}) in embedding lookup")
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, gt)

    return _record(out, (table,), bwd, "embedding")


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor by integer index (with repetition)."""
    indices = np.asarray(indices)
    out = Tensor(a.data[indices])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        _accum(a, ga)

    return _record(out, (a,), bwd, "gather_rows")


def pick_lastdim(a: Tensor, indices: np.ndarray) -> Tensor:
    """out[i] = a[i, indices[i]] for a 2-d tensor."""
    indices = np.asarray(indices)
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, indices])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, indices), g)
        _accum(a, ga)

    return _record(out, (a,), bwd, "pick_lastdim")


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with resampling beyond two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)
