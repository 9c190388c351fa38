"""Differentiable network layers over the tensor core.

Convolution and its transpose are recorded as single tape entries with
hand-written backward rules, implemented as one tensordot per kernel
offset. This keeps peak memory at a small multiple of the activation
size even for full-resolution volumes, where an explicit column matrix
would not. Max-pooling, in contrast, is lowered onto reshape/transpose/
max so its gradient comes from already-verified primitives.

Layout conventions, matching the channels-first model code:
    activations  [N, C, spatial...]        (2 or 3 spatial axes)
    conv weight  [out_ch, in_ch, k...]
    upconv weight [in_ch, out_ch, k...]    (the adjoint of a strided conv
                                            shares its weight verbatim)
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from . import ndtensor as nd
from .errors import ParameterError, ShapeError, StatisticsError
from .ndtensor import Tensor, record_op

Extents = Union[int, Sequence[int]]


def _per_axis(value: Extents, rank: int, name: str) -> tuple:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ShapeError(f"{name} needs {rank} entries, got {len(value)}")
    return value


def _spatial_rank(x: Tensor) -> int:
    rank = x.ndim - 2
    if rank not in (2, 3):
        raise ShapeError(f"expected [N, C, spatial...] with 2 or 3 spatial axes, got shape {x.shape}")
    return rank


def _check_dtypes(x: Tensor, **others: Optional[Tensor]):
    for name, t in others.items():
        if t is not None and t.dtype != x.dtype:
            raise ShapeError(f"{name} dtype {t.dtype} does not match input dtype {x.dtype}")


# ---------------------------------------------------------------------------
# convolution

def conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
         stride: Extents = 1, padding: Extents = 0) -> Tensor:
    """Cross-correlation with zero padding.

    The network uses stride 1 with "same" padding throughout; general
    stride exists for the adjointness relation with ``upconv``.
    """
    m = _spatial_rank(x)
    if weight.ndim != m + 2:
        raise ShapeError(f"weight rank {weight.ndim} does not match {m} spatial axes")
    n, c = x.shape[:2]
    oc, wc = weight.shape[:2]
    if wc != c:
        raise ShapeError(f"input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"bias shape {bias.shape} does not match {oc} output channels")
    _check_dtypes(x, weight=weight, bias=bias)
    kern = weight.shape[2:]
    stride = _per_axis(stride, m, "stride")
    padding = _per_axis(padding, m, "padding")
    if any(s < 1 for s in stride):
        raise ParameterError(f"stride must be positive, got {stride}")

    in_sp = x.shape[2:]
    out_sp = []
    for size, k, s, p in zip(in_sp, kern, stride, padding):
        span = size + 2 * p - k
        if span < 0:
            raise ShapeError(f"kernel {k} with padding {p} exceeds extent {size}")
        out_sp.append(span // s + 1)
    out_sp = tuple(out_sp)

    pad_spec = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pad_spec) if any(padding) else x.data

    def offset_slices(k_idx):
        return (slice(None), slice(None)) + tuple(
            slice(k, k + s * o, s) for k, s, o in zip(k_idx, stride, out_sp))

    wd = weight.data
    acc = np.zeros((n,) + out_sp + (oc,), dtype=x.dtype)
    for k_idx in np.ndindex(*kern):
        w_k = wd[(slice(None), slice(None)) + k_idx]  # [oc, c]
        acc += np.tensordot(xp[offset_slices(k_idx)], w_k, axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
    if bias is not None:
        out += bias.data.reshape((1, oc) + (1,) * m)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    reduce_axes = (0,) + tuple(range(2, m + 2))
    inner = (slice(None), slice(None)) + tuple(
        slice(p, p + size) for p, size in zip(padding, in_sp))

    def bwd(g, needs):
        gm = np.moveaxis(g, 1, -1)  # [n, out_sp..., oc]
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for k_idx in np.ndindex(*kern):
                w_k = wd[(slice(None), slice(None)) + k_idx]
                contrib = np.tensordot(gm, w_k, axes=([-1], [0]))  # [n, out_sp..., c]
                gxp[offset_slices(k_idx)] += np.moveaxis(contrib, -1, 1)
            gx = gxp[inner].copy() if any(padding) else gxp
        if needs[1]:
            gw = np.zeros_like(wd)
            sum_axes = (0,) + tuple(range(1, m + 1))
            for k_idx in np.ndindex(*kern):
                xs = xp[offset_slices(k_idx)]  # [n, c, out_sp...]
                gw[(slice(None), slice(None)) + k_idx] = np.tensordot(
                    gm, xs, axes=(sum_axes, (0,) + tuple(range(2, m + 2))))
        if bias is not None and needs[2]:
            gb = g.sum(axis=reduce_axes)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return record_op(out, inputs, bwd)


def same_padding(kernel: Extents, rank: int) -> tuple:
    """Padding that preserves spatial extents at stride 1 (odd kernels)."""
    kern = _per_axis(kernel, rank, "kernel")
    if any(k % 2 == 0 for k in kern):
        raise ParameterError(f"same-padding needs odd kernel extents, got {kern}")
    return tuple(k // 2 for k in kern)


# ---------------------------------------------------------------------------
# transposed convolution

def upconv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: Optional[Extents] = None) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping).

    Each input location paints one disjoint kernel-sized output block, so
    the op is a tensordot followed by an axis interleave. The network only
    upsamples by 2 per pooled axis (2x2, or 1x2x2 with Z untouched), which
    this covers exactly.
    """
    m = _spatial_rank(x)
    if weight.ndim != m + 2:
        raise ShapeError(f"weight rank {weight.ndim} does not match {m} spatial axes")
    n, c = x.shape[:2]
    wc, oc = weight.shape[:2]
    if wc != c:
        raise ShapeError(f"input has {c} channels, weight expects {wc}")
    _check_dtypes(x, weight=weight, bias=bias)
    kern = weight.shape[2:]
    stride = kern if stride is None else _per_axis(stride, m, "stride")
    if stride != kern:
        raise ParameterError(f"stride {stride} must equal kernel {kern} (non-overlapping scatter)")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"bias shape {bias.shape} does not match {oc} output channels")

    in_sp = x.shape[2:]
    out_sp = tuple(size * k for size, k in zip(in_sp, kern))
    # [n, in_sp..., oc, kern...] -> [n, oc, s0, k0, s1, k1, ...] -> interleave
    t = np.tensordot(x.data, weight.data, axes=([1], [0]))
    perm = (0, m + 1) + tuple(ax for i in range(m) for ax in (1 + i, m + 2 + i))
    out = np.ascontiguousarray(np.transpose(t, perm)).reshape((n, oc) + out_sp)
    if bias is not None:
        out = out + bias.data.reshape((1, oc) + (1,) * m)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    xd, wd = x.data, weight.data
    inv_perm = tuple(np.argsort(perm))
    split_shape = (n, oc) + tuple(v for size, k in zip(in_sp, kern) for v in (size, k))

    def bwd(g, needs):
        gr = np.transpose(g.reshape(split_shape), inv_perm)  # [n, in_sp..., oc, kern...]
        gx = gw = gb = None
        if needs[0]:
            w_axes = tuple(range(1, m + 2))
            g_axes = tuple(range(m + 1, 2 * m + 2))
            gx = np.moveaxis(np.tensordot(gr, wd, axes=(g_axes, w_axes)), -1, 1)
        if needs[1]:
            x_axes = (0,) + tuple(range(2, m + 2))
            g_axes = (0,) + tuple(range(1, m + 1))
            gw = np.tensordot(xd, gr, axes=(x_axes, g_axes))
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0,) + tuple(range(2, m + 2)))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return record_op(out, inputs, bwd)


# ---------------------------------------------------------------------------
# pooling

def maxpool(x: Tensor, window: Extents, stride: Optional[Extents] = None) -> Tensor:
    """Windowed max with stride equal to the window (the only case used)."""
    m = _spatial_rank(x)
    window = _per_axis(window, m, "window")
    stride = window if stride is None else _per_axis(stride, m, "stride")
    if stride != window:
        raise ParameterError(f"stride {stride} must equal window {window}")
    if any(w < 1 for w in window):
        raise ParameterError(f"window must be positive, got {window}")
    n, c = x.shape[:2]
    in_sp = x.shape[2:]
    for size, w in zip(in_sp, window):
        if size % w != 0:
            raise ShapeError(f"extent {size} not divisible by window {w}")
    out_sp = tuple(size // w for size, w in zip(in_sp, window))

    split = nd.reshape(x, (n, c) + tuple(v for o, w in zip(out_sp, window) for v in (o, w)))
    perm = (0, 1) + tuple(2 + 2 * i for i in range(m)) + tuple(3 + 2 * i for i in range(m))
    moved = nd.transpose(split, perm)
    merged = nd.reshape(moved, (n, c) + out_sp + (int(np.prod(window)),))
    return nd.max_(merged, axes=-1)


# ---------------------------------------------------------------------------
# normalization and activations

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: Tensor, running_var: Tensor,
              momentum: float = 0.1, eps: float = 1e-5,
              training: bool = True) -> Tensor:
    """Per-channel batch normalization with affine scale and shift.

    Train mode normalizes by batch statistics (biased variance) and blends
    them into the running buffers in place; eval mode reads the buffers.
    """
    m = _spatial_rank(x)
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (c,):
            raise ShapeError(f"{name} shape {p.shape} does not match {c} channels")
    _check_dtypes(x, gamma=gamma, beta=beta)
    axes = (0,) + tuple(range(2, m + 2))
    cshape = (1, c) + (1,) * m
    xd = x.data

    if training:
        count = x.size // c
        if count <= 1:
            raise StatisticsError("batch statistics need more than one value per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)  # biased, matching the normalization below
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mu.astype(running_mean.dtype)
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.data.astype(xd.dtype)
        var = running_var.data.astype(xd.dtype)
        count = None

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(cshape)) * ivar.reshape(cshape)
    out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    gd = gamma.data

    def bwd(g, needs):
        dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
        dbeta = g.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            dxhat = g * gd.reshape(cshape)
            if training:
                xc = xd - mu.reshape(cshape)
                dvar = (dxhat * xc).sum(axis=axes) * (-0.5) * ivar ** 3
                dmu = -(dxhat.sum(axis=axes)) * ivar + dvar * (-2.0 / count) * xc.sum(axis=axes)
                dx = (dxhat * ivar.reshape(cshape)
                      + dvar.reshape(cshape) * (2.0 / count) * xc
                      + dmu.reshape(cshape) / count)
            else:
                dx = dxhat * ivar.reshape(cshape)
        return (dx, dgamma, dbeta)

    return record_op(out, (x, gamma, beta), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient at 0 is 0
    return record_op(out, (x,), lambda g, needs: (g * mask,))


def softmax_channels(x: Tensor) -> Tensor:
    """Channel softmax at every spatial location, max-shifted for stability."""
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax needs [N, C>=2, ...], got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g, needs):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return record_op(p, (x,), bwd)


def dropout(x: Tensor, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train-mode mean is preserved, eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype.type) / x.dtype.type(1.0 - rate)
    return nd.mul(x, Tensor(keep, dtype=x.dtype))
