"""Dense N-dimensional tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 for training, float64 for gradient
checks). Differentiable operations record themselves onto a per-thread
Tape while they execute (define-by-run); ``backward`` replays the tape in
reverse and accumulates gradients into the participating leaf tensors.

Broadcasting is deliberately restricted to scalar-versus-tensor: every
formula in this package is expressible with explicit shapes, and the
restriction keeps each backward rule a few lines.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AxisError, DomainError, ShapeError, TapeError

Scalar = (int, float, np.integer, np.floating)
_FLOAT_DTYPES = (np.float32, np.float64)


class _Node:
    """A tensor's registration on one tape."""

    __slots__ = ("tape", "id", "produced")

    def __init__(self, tape: "Tape", node_id: int, produced: bool):
        self.tape = tape
        self.id = node_id
        self.produced = produced


class _Entry:
    """One recorded operation: output node, input nodes, backward rule."""

    __slots__ = ("out_id", "input_ids", "needs", "backward_fn")

    def __init__(self, out_id, input_ids, needs, backward_fn):
        self.out_id = out_id
        self.input_ids = input_ids
        self.needs = needs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; node ids are topologically ordered.

    Use as a context manager to scope one forward/backward pass:

        with Tape():
            loss = model_loss(...)
            backward(loss)

    A per-thread ambient tape exists for casual use outside any context.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.leaves: dict[int, Tensor] = {}
        self._next_id = 0
        self._entry_index: dict[int, int] = {}  # out node id -> entry position

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def _add_leaf(self, t: "Tensor") -> _Node:
        node = _Node(self, self._new_id(), produced=False)
        t.node = node
        if t.requires_grad:
            self.leaves[node.id] = t
        return node

    def _add_entry(self, input_ids, needs, backward_fn) -> _Node:
        node = _Node(self, self._new_id(), produced=True)
        self._entry_index[node.id] = len(self.entries)
        self.entries.append(_Entry(node.id, tuple(input_ids), needs, backward_fn))
        return node

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc):
        _state().stack.pop()
        return False


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.ambient: Optional[Tape] = None
        self.grad_enabled = True


_STATE = _ThreadState()


def _state() -> _ThreadState:
    return _STATE


def active_tape() -> Tape:
    st = _state()
    if st.stack:
        return st.stack[-1]
    if st.ambient is None:
        st.ambient = Tape()
    return st.ambient


def reset_ambient_tape():
    """Drop the thread's ambient tape (frees any retained graph)."""
    _state().ambient = None


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


class Tensor:
    """Contiguous real array, row-major, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ShapeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[_Node] = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axes=None):
        return sum_(self, axes)

    def mean(self, axes=None):
        return mean(self, axes)

    def max(self, axes=None):
        return max_(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


# ---------------------------------------------------------------------------
# creation

def create(shape, fill=0.0, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Build a tensor of ``shape`` from a scalar fill or a flat value list."""
    shape = _check_shape(shape)
    n = int(np.prod(shape))
    if isinstance(fill, Scalar):
        data = np.full(shape, fill, dtype=dtype)
    else:
        vals = np.asarray(fill, dtype=dtype).reshape(-1)
        if vals.size != n:
            raise ShapeError(f"{vals.size} values do not fill shape {shape} ({n} elements)")
        data = vals.reshape(shape)
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return create(shape, 0.0, dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return create(shape, 1.0, dtype=dtype, requires_grad=requires_grad)


def _check_shape(shape):
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if len(shape) == 0:
        raise ShapeError("tensor shape needs at least one dimension")
    if any(s < 1 for s in shape):
        raise ShapeError(f"nonpositive extent in shape {shape}")
    return shape


# ---------------------------------------------------------------------------
# recording machinery

def record_op(out_data: np.ndarray, inputs: Sequence[Tensor],
              backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op if gradients flow.

    ``backward_fn(grad_out, needs)`` must return one gradient array (or
    None) per input, aligned with ``inputs``; ``needs`` flags which of
    those will actually be consumed.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    st = _state()
    if not st.grad_enabled or not any(t.requires_grad for t in inputs):
        return out
    tape = active_tape()
    ids = []
    needs = []
    for t in inputs:
        node = t.node
        if node is None or node.tape is not tape:
            node = tape._add_leaf(t)
        ids.append(node.id)
        needs.append(t.requires_grad)
    out.requires_grad = True
    out.node = tape._add_entry(ids, tuple(needs), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires-grad leaf.

    Gradients add across repeated calls until ``zero_grads``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None or not node.produced:
        raise TapeError("tensor is detached from any tape; nothing to differentiate")
    tape = node.tape
    adjoints: dict[int, np.ndarray] = {node.id: np.ones_like(loss.data)}
    start = tape._entry_index[node.id]
    for entry in reversed(tape.entries[: start + 1]):
        g = adjoints.get(entry.out_id)
        if g is None:
            continue
        input_grads = entry.backward_fn(g, entry.needs)
        for iid, need, ig in zip(entry.input_ids, entry.needs, input_grads):
            if not need or ig is None:
                continue
            acc = adjoints.get(iid)
            adjoints[iid] = ig if acc is None else acc + ig
    for iid, leaf in tape.leaves.items():
        g = adjoints.get(iid)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grads(params: Sequence[Tensor]) -> None:
    """Clear accumulated gradients; idempotent."""
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise operations

def _as_operands(a, b):
    """Resolve (tensor, tensor|scalar) operands; enforce equal shapes/dtypes."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
        if a.dtype != b.dtype:
            raise ShapeError(f"elementwise dtypes differ: {a.dtype} vs {b.dtype}")
        return a, b, None
    if isinstance(a, Tensor) and isinstance(b, Scalar):
        return a, None, a.dtype.type(b)
    if isinstance(b, Tensor) and isinstance(a, Scalar):
        return b, None, b.dtype.type(a)
    raise ShapeError("elementwise operands must be tensors or tensor/scalar")


def add(a, b) -> Tensor:
    a, bt, bs = _as_operands(a, b)
    if bt is not None:
        out = a.data + bt.data
        return record_op(out, (a, bt), lambda g, needs: (g, g))
    out = a.data + bs
    return record_op(out, (a,), lambda g, needs: (g,))


def sub(a, b) -> Tensor:
    if isinstance(a, Scalar) and isinstance(b, Tensor):
        t, _, s = _as_operands(a, b)
        out = s - t.data
        return record_op(out, (t,), lambda g, needs: (-g,))
    a, bt, bs = _as_operands(a, b)
    if bt is not None:
        out = a.data - bt.data
        return record_op(out, (a, bt), lambda g, needs: (g, -g))
    out = a.data - bs
    return record_op(out, (a,), lambda g, needs: (g,))


def mul(a, b) -> Tensor:
    a, bt, bs = _as_operands(a, b)
    if bt is not None:
        out = a.data * bt.data
        ad, bd = a.data, bt.data

        def bwd(g, needs):
            return (g * bd if needs[0] else None, g * ad if needs[1] else None)

        return record_op(out, (a, bt), bwd)
    out = a.data * bs
    return record_op(out, (a,), lambda g, needs: (g * bs,))


def div(a, b) -> Tensor:
    if isinstance(a, Scalar) and isinstance(b, Tensor):
        t, _, s = _as_operands(a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = s / t.data
        _check_finite_div(out)
        td = t.data
        return record_op(out, (t,), lambda g, needs: (-g * s / (td * td),))
    a, bt, bs = _as_operands(a, b)
    if bt is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / bt.data
        _check_finite_div(out)
        ad, bd = a.data, bt.data

        def bwd(g, needs):
            ga = g / bd if needs[0] else None
            gb = -g * ad / (bd * bd) if needs[1] else None
            return (ga, gb)

        return record_op(out, (a, bt), bwd)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / bs
    _check_finite_div(out)
    return record_op(out, (a,), lambda g, needs: (g / bs,))


def _check_finite_div(out: np.ndarray):
    if not np.isfinite(out).all():
        raise DomainError("division produced non-finite values")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of nonpositive value")
    out = np.log(a.data)
    ad = a.data
    return record_op(out, (a,), lambda g, needs: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g, needs: (g * out,))


def pow_(a: Tensor, exponent) -> Tensor:
    if not isinstance(exponent, Scalar):
        raise ShapeError("pow exponent must be a scalar")
    e = float(exponent)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data ** e
    if not np.isfinite(out).all():
        raise DomainError(f"pow with exponent {e} left the real domain")
    ad = a.data
    return record_op(out, (a,), lambda g, needs: (g * e * ad ** (e - 1.0),))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where strictly inside."""
    if lo is None and hi is None:
        raise ShapeError("clamp needs at least one bound")
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data > lo
    if hi is not None:
        mask &= a.data < hi
    return record_op(out, (a,), lambda g, needs: (g * mask,))


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    else:
        axes = tuple(int(ax) for ax in axes)
    if len(axes) == 0:  # empty axis list means reduce everything
        return tuple(range(ndim))
    normed = []
    for ax in axes:
        if ax < -ndim or ax >= ndim:
            raise AxisError(f"axis {ax} invalid for {ndim}-d tensor")
        normed.append(ax % ndim)
    if len(set(normed)) != len(normed):
        raise AxisError(f"duplicate axes in {axes}")
    return tuple(sorted(normed))


def _reduce_out(data: np.ndarray) -> np.ndarray:
    return data.reshape(1) if data.ndim == 0 else data


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out = _reduce_out(np.sum(a.data, axis=axes))
    in_shape = a.shape
    kshape = _keepdims_shape(in_shape, axes)

    def bwd(g, needs):
        return (np.broadcast_to(g.reshape(kshape), in_shape).astype(g.dtype, copy=True),)

    return record_op(out, (a,), bwd)


def mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = _reduce_out(np.mean(a.data, axis=axes))
    in_shape = a.shape
    kshape = _keepdims_shape(in_shape, axes)

    def bwd(g, needs):
        gg = np.broadcast_to(g.reshape(kshape), in_shape).astype(g.dtype, copy=True)
        return (gg / count,)

    return record_op(out, (a,), bwd)


def max_(a: Tensor, axes=None) -> Tensor:
    """Max over axes; backward routes gradient to the first argmax."""
    axes = _norm_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    moved = np.transpose(a.data, perm)
    kept_shape = moved.shape[: len(kept)]
    red = int(np.prod(moved.shape[len(kept):])) if axes else 1
    flat = moved.reshape(kept_shape + (red,)) if kept_shape else moved.reshape(1, red)
    amax = np.argmax(flat, axis=-1)
    out = _reduce_out(np.max(a.data, axis=axes))
    in_shape = a.shape

    def bwd(g, needs):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, amax[..., None], g.reshape(amax.shape + (1,)), axis=-1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(perm)
        return (np.transpose(gmoved, inv).reshape(in_shape).copy(),)

    return record_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ShapeError("matmul takes two tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtypes differ: {a.dtype} vs {b.dtype}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g, needs):
        ga = g @ bd.T if needs[0] else None
        gb = ad.T @ g if needs[1] else None
        return (ga, gb)

    return record_op(out, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = _check_shape(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = a.data.reshape(shape)
    in_shape = a.shape
    return record_op(out, (a,), lambda g, needs: (g.reshape(in_shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise AxisError(f"{axes} is not a permutation of {a.ndim} axes")
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return record_op(out, (a,), lambda g, needs: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ndim = tensors[0].ndim
    if axis < -ndim or axis >= ndim:
        raise AxisError(f"axis {axis} invalid for {ndim}-d tensors")
    axis = axis % ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, needs):
        grads = []
        for i in range(len(sizes)):
            if needs[i]:
                sl = [slice(None)] * ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return record_op(out, tuple(tensors), bwd)


def pad_constant(a: Tensor, pad_width, value: float = 0.0) -> Tensor:
    """Zero/constant padding per axis; pad_width is [(lo, hi), ...]."""
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pad_width) != a.ndim:
        raise ShapeError(f"pad widths for {len(pad_width)} axes on {a.ndim}-d tensor")
    out = np.pad(a.data, pad_width, mode="constant", constant_values=value)
    inner = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))
    return record_op(out, (a,), lambda g, needs: (g[inner].copy(),))


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if out.ndim == 0:
        out = out.reshape(1)
    if out.size == 0:
        raise ShapeError(f"slice {key} selects nothing from shape {a.shape}")
    out = np.ascontiguousarray(out)
    in_shape = a.shape
    out_shape = out.shape

    def bwd(g, needs):
        gi = np.zeros(in_shape, dtype=g.dtype)
        gi[key] = g.reshape(gi[key].shape)
        return (gi,)

    _ = out_shape
    return record_op(out, (a,), bwd)
