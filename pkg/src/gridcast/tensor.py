"""Dense float tensors with taped reverse-mode differentiation.

The core objects are :class:`Tensor` (a numpy array plus gradient slot) and
:class:`Tape` (an ordered record of executed operations). Running ops inside a
``with Tape() as tape:`` block records one entry per op; ``tape.backward(root)``
replays the entries in reverse execution order, which is a valid
anti-topological order of the graph, accumulating vector-Jacobian products
into ``.grad`` of every tensor that requires gradients.

Design points:

* Element type is selectable between float32 and float64; mixed-dtype
  arithmetic raises rather than silently promoting.
* ``backward`` first clears the gradients of every tensor touched by the tape,
  so repeated calls are idempotent and deterministic. Accumulation across
  samples is the caller's job (copy grads out between tapes).
* An optional debug mode checks every op output for NaN/Inf (off by default).
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "GridcastError", "ShapeError", "GraphError",
    "Tensor", "Tape", "no_grad", "set_debug_checks",
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar", "sub_from_scalar",
    "sigmoid", "tanh", "relu", "abs_", "clamp", "clip_through",
    "maximum_scalar",
    "matmul", "softmax", "concat", "stack", "narrow", "gather_last",
    "reshape", "permute", "maxpool2", "upsample2_nearest", "conv2d",
    "sum_", "mean_", "detach",
    "finite_diff_grad", "gradcheck",
    "write_tensor", "read_tensor", "save_tensors", "load_tensors",
]


class GridcastError(Exception):
    """Base class for library errors."""


class ShapeError(GridcastError):
    """Operand shapes or dtypes are incompatible."""


class GraphError(GridcastError):
    """Invalid use of the differentiation tape."""


_SUPPORTED_DTYPES = (np.float32, np.float64)
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op output (costly; default off)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A numpy array with an optional gradient of the same shape."""

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        """Run reverse accumulation from this (scalar) tensor."""
        if self._tape is None:
            raise GraphError(
                "backward on a tensor with no recording tape (detached graph)")
        self._tape.backward(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar. Scalars mean python ints/floats; tensor-tensor ops
    # insist on matching dtypes.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return sub_from_scalar(float(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Ordered record of ops; reverse replay implements backpropagation."""

    _stack: list["Tape"] = []

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = Tape._stack.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._entries)

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...],
               fn: Callable[[], None]) -> None:
        out._tape = self
        self._entries.append((out, inputs, fn))

    def backward(self, root: Tensor) -> None:
        """Reverse-accumulate d(root)/d(leaf) into ``.grad`` slots.

        Visits each recorded op exactly once in reverse execution order (an
        anti-topological order). Clears all grads the tape touches first, so
        calling twice yields identical results.
        """
        if root.size != 1:
            raise GraphError(
                f"backward root must be scalar, got shape {root.shape}")
        if root._tape is not self:
            raise GraphError("root was not recorded on this tape")
        for out, inputs, _ in self._entries:
            out.grad = None
            for t in inputs:
                t.grad = None
        root.grad = np.ones_like(root.data)
        for _, _, fn in reversed(self._entries):
            fn()


class no_grad:
    """Context manager suspending tape recording (forward-only compute)."""

    def __enter__(self):
        Tape._stack.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()


def _check_output(arr: np.ndarray, opname: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in output of {opname}")


def _make(arr: np.ndarray, inputs: tuple[Tensor, ...], opname: str,
          backward: Callable[[Tensor], Callable[[], None]] | None) -> Tensor:
    """Wrap an op result; record on the active tape when gradients flow."""
    _check_output(arr, opname)
    out = Tensor(arr)
    tape = Tape.active()
    if tape is not None and backward is not None and any(
            t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward(out))
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad``. ``own=True`` promises g is freshly allocated."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_same_dtype(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{opname}: mixed dtypes {a.data.dtype.name} vs {b.data.dtype.name}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "add")
    arr = a.data + b.data

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        return fn

    return _make(arr, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "sub")
    arr = a.data - b.data

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape), own=True)
        return fn

    return _make(arr, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    _require_same_dtype(a, b, "mul")
    arr = a.data * b.data

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad * b.data, a.shape), own=True)
            _accum(b, _unbroadcast(out.grad * a.data, b.shape), own=True)
        return fn

    return _make(arr, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "div")
    arr = a.data / b.data

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad / b.data, a.shape), own=True)
            gb = -out.grad * a.data / (b.data * b.data)
            _accum(b, _unbroadcast(gb, b.shape), own=True)
        return fn

    return _make(arr, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, -out.grad, own=True)
        return fn

    return _make(-a.data, (a,), "neg", backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    arr = a.data * a.data.dtype.type(s)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad * a.data.dtype.type(s), own=True)
        return fn

    return _make(arr, (a,), "scale", backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    arr = a.data + a.data.dtype.type(s)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad)
        return fn

    return _make(arr, (a,), "add_scalar", backward)


def sub_from_scalar(s: float, a: Tensor) -> Tensor:
    """s - a, e.g. the (1 - S) factor of highway-style gates."""
    arr = a.data.dtype.type(s) - a.data

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, -out.grad, own=True)
        return fn

    return _make(arr, (a,), "sub_from_scalar", backward)


# ---------------------------------------------------------------------------
# Nonlinearities

def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad * (y * (1.0 - y)), own=True)
        return fn

    return _make(y, (a,), "sigmoid", backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad * (1.0 - y * y), own=True)
        return fn

    return _make(y, (a,), "tanh", backward)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad * (a.data > 0), own=True)
        return fn

    return _make(y, (a,), "relu", backward)


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at 0."""
    y = np.abs(a.data)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad * np.sign(a.data), own=True)
        return fn

    return _make(y, (a,), "abs", backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi."""
    y = np.clip(a.data, lo, hi)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            mask = (a.data >= lo) & (a.data <= hi)
            _accum(a, out.grad * mask, own=True)
        return fn

    return _make(y, (a,), "clamp", backward)


def clip_through(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradients pass through the clip unchanged.

    A hard clip kills the gradient of every saturated cell. When a whole
    output frame saturates (easy to do when the frame feeds back into the
    next step of a rollout), training stalls with exactly zero gradient
    and can never recover. Passing the gradient through keeps the escape
    route open while the forward value stays a valid clipped output.
    """
    y = np.clip(a.data, lo, hi)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad)
        return fn

    return _make(y, (a,), "clip_through", backward)


def maximum_scalar(a: Tensor, s: float) -> Tensor:
    """max(x, s); gradient passes where x > s."""
    y = np.maximum(a.data, s)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad * (a.data > s), own=True)
        return fn

    return _make(y, (a,), "maximum_scalar", backward)


# ---------------------------------------------------------------------------
# Linear algebra and softmax

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports batched operands via numpy broadcasting."""
    _require_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.shape} @ {b.shape}")
    arr = a.data @ b.data

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            g = out.grad
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(a, _unbroadcast(ga, a.shape), own=True)
            _accum(b, _unbroadcast(gb, b.shape), own=True)
        return fn

    return _make(arr, (a, b), "matmul", backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along ``axis``; rows sum to one."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            g = out.grad
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, (g - inner) * y, own=True)
        return fn

    return _make(y, (a,), "softmax", backward)


# ---------------------------------------------------------------------------
# Shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    arr = a.data.reshape(shape)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad.reshape(a.shape))
        return fn

    return _make(arr, (a,), "reshape", backward)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    arr = a.data.transpose(axes)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            _accum(a, out.grad.transpose(inv))
        return fn

    return _make(arr, (a,), "permute", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    for t in ts[1:]:
        _require_same_dtype(ts[0], t, "concat")
    arr = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            offs = np.cumsum([0] + sizes)
            for t, s0, s1 in zip(ts, offs[:-1], offs[1:]):
                idx = [slice(None)] * arr.ndim
                idx[axis] = slice(s0, s1)
                _accum(t, out.grad[tuple(idx)])
        return fn

    return _make(arr, tuple(ts), "concat", backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("stack of zero tensors")
    for t in ts[1:]:
        _require_same_dtype(ts[0], t, "stack")
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack shape mismatch: {t.shape} vs {ts[0].shape}")
    arr = np.stack([t.data for t in ts])

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            for i, t in enumerate(ts):
                _accum(t, out.grad[i])
        return fn

    return _make(arr, tuple(ts), "stack", backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}, {start + length}) out of range for axis "
            f"{axis} of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    arr = a.data[idx].copy()

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                a.grad[idx] += out.grad
        return fn

    return _make(arr, (a,), "narrow", backward)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """out[..., i, j] = a[..., i, index[i, j]] for an int matrix ``index``.

    Used to expand per-offset relative position terms into full pairwise
    logits. Backward scatter-adds, so repeated indices accumulate.
    """
    index = np.asarray(index)
    if index.ndim != 2 or a.ndim < 2 or index.shape[0] != a.shape[-2]:
        raise ShapeError(
            f"gather_last: index {index.shape} incompatible with {a.shape}")
    idx_full = np.broadcast_to(index, a.shape[:-1] + (index.shape[1],))
    arr = np.take_along_axis(a.data, idx_full, axis=-1)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            if not a.requires_grad:
                return
            ga = np.zeros_like(a.data)
            rows = np.arange(a.shape[-2])[:, None]
            g2 = out.grad.reshape((-1,) + out.grad.shape[-2:])
            ga2 = ga.reshape((-1,) + ga.shape[-2:])
            for k in range(g2.shape[0]):
                np.add.at(ga2[k], (rows, index), g2[k])
            _accum(a, ga, own=True)
        return fn

    return _make(arr, (a,), "gather_last", backward)


# ---------------------------------------------------------------------------
# Spatial ops

def maxpool2(a: Tensor) -> Tensor:
    """2x2 max pooling on (C, H, W); ties route gradient to the first
    element in row-major window order."""
    C, H, W = _chw(a, "maxpool2")
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    h2, w2 = H // 2, W // 2
    win = a.data.reshape(C, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4)
    win = win.reshape(C, h2, w2, 4)
    amax = win.argmax(axis=-1)  # first max wins ties
    arr = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            gw = np.zeros((C, h2, w2, 4), dtype=a.data.dtype)
            np.put_along_axis(gw, amax[..., None], out.grad[..., None], axis=-1)
            g = gw.reshape(C, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4)
            _accum(a, g.reshape(C, H, W), own=True)
        return fn

    return _make(arr, (a,), "maxpool2", backward)


def upsample2_nearest(a: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling on (C, H, W)."""
    C, H, W = _chw(a, "upsample2_nearest")
    arr = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            g = out.grad.reshape(C, H, 2, W, 2).sum(axis=(2, 4))
            _accum(a, g, own=True)
        return fn

    return _make(arr, (a,), "upsample2_nearest", backward)


def _chw(a: Tensor, opname: str) -> tuple[int, int, int]:
    if a.ndim != 3:
        raise ShapeError(f"{opname} expects (C, H, W), got {a.shape}")
    return a.shape  # type: ignore[return-value]


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    """Unfold padded (C, H+2p, W+2p) into (C*k*k, H*W) patch columns."""
    C = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(C, k, k, H, W), strides=(s0, s1, s2, s1, s2))
    return view.reshape(C * k * k, H * W)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padding 2-d cross-correlation.

    ``x`` is (C_in, H, W), ``w`` is (C_out, C_in, k, k) with odd k, ``b`` an
    optional (C_out,) bias. Output is (C_out, H, W). Implemented as im2col
    plus one BLAS matmul; backward recomputes the unfold instead of caching
    it to keep long rollouts memory-light.
    """
    _require_same_dtype(x, w, "conv2d")
    Cin, H, W = _chw(x, "conv2d input")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d, got {w.shape}")
    Cout, Cw, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if Cw != Cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {Cin} channels, "
            f"weight expects {Cw}")
    if b is not None and b.shape != (Cout,):
        raise ShapeError(
            f"conv2d bias must be ({Cout},), got {b.shape}")
    k, p = kh, kh // 2
    w2 = w.data.reshape(Cout, Cin * k * k)
    cols = _im2col(_pad_hw(x.data, p), k, H, W)
    out2 = w2 @ cols
    if b is not None:
        out2 = out2 + b.data[:, None]
    arr = out2.reshape(Cout, H, W)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            g2 = out.grad.reshape(Cout, H * W)
            if w.requires_grad:
                cols_b = _im2col(_pad_hw(x.data, p), k, H, W)
                _accum(w, (g2 @ cols_b.T).reshape(w.shape), own=True)
            if b is not None and b.requires_grad:
                _accum(b, g2.sum(axis=1), own=True)
            if x.requires_grad:
                dcols = (w2.T @ g2).reshape(Cin, k, k, H, W)
                dxp = np.zeros((Cin, H + 2 * p, W + 2 * p), dtype=x.data.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + H, j:j + W] += dcols[:, i, j]
                _accum(x, dxp[:, p:p + H, p:p + W], own=False)
        return fn

    return _make(arr, inputs, "conv2d", backward)


# ---------------------------------------------------------------------------
# Reductions

def sum_(a: Tensor, axis=None) -> Tensor:
    arr = a.data.sum(axis=axis)

    def backward(out: Tensor):
        def fn():
            if out.grad is None:
                return
            g = out.grad
            if axis is None:
                _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype,
                                                             copy=True), own=True)
            else:
                g = np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype,
                                                             copy=True), own=True)
        return fn

    return _make(arr, (a,), "sum", backward)


def mean_(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def detach(a: Tensor) -> Tensor:
    """A leaf tensor sharing data but cut from the graph."""
    out = Tensor(a.data)
    return out


# ---------------------------------------------------------------------------
# Gradient verification

def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    Perturbs each element in turn; uses the actually-realized step
    (x+h) - (x-h) as the divisor to cancel rounding in the perturbation.
    """
    x0 = x.data
    g = np.zeros_like(x0)
    with no_grad():
        for idx in np.ndindex(x0.shape):
            orig = x0[idx]
            x0[idx] = orig + eps
            hi = x0[idx]
            fhi = float(f(x))
            x0[idx] = orig - eps
            lo = x0[idx]
            flo = float(f(x))
            x0[idx] = orig
            g[idx] = (fhi - flo) / (hi - lo)
    return g


def gradcheck(f: Callable[[], Tensor], wrt: Iterable[Tensor],
              eps: float = 1e-5) -> float:
    """Compare taped gradients of scalar ``f()`` against central differences.

    Returns the maximum relative error max |a - fd| / (|fd| + 1e-12) over all
    elements of all ``wrt`` tensors.
    """
    wrt = list(wrt)
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in wrt]
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        gfd = finite_diff_grad(lambda _t: f().data, t, eps)
        rel = np.abs(ga - gfd) / (np.abs(gfd) + 1e-12)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# Serialization: "GCT1" records and a named container

_MAGIC = b"GCT1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor(fh, arr: np.ndarray) -> None:
    """Write one array as magic, dtype code u8, rank u8, extents u64 LE, data."""
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise GridcastError(f"unsupported dtype for serialization: {arr.dtype}")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise GridcastError(f"bad tensor record magic: {magic!r}")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _CODE_DTYPES:
        raise GridcastError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dt = _CODE_DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    buf = fh.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise GridcastError("truncated tensor record")
    return np.frombuffer(buf, dtype=dt).reshape(shape).copy()


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write a named collection: u32 count, then (u16 name len, name, record)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            write_tensor(fh, arr)


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            out[name] = read_tensor(fh)
    return out
