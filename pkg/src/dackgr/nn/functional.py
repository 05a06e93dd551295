"""Differentiable ops.

Every op returns a :class:`~dackgr.nn.tensor.Tensor`; when any input requires a
gradient and recording is enabled, the result carries a closure that pushes the
output gradient back to its inputs.  Non-tensor operands are treated as
constants in the dtype of the tensor operand.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dackgr.nn.tensor import ShapeError, Tensor, make_node, unbroadcast

LOGIT_CLIP = 50.0


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g * out / b.data, b.shape))

    return make_node(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_node(a.data @ b.data, (a, b), bw)


# -- reductions and shape ops -------------------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape))

    return make_node(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return make_node(out, (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: x._accumulate(np.transpose(g, inverse)))


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return make_node(x.data[idx], (x,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", f"id out of range for table with {weight.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        weight._accumulate(full)

    return make_node(weight.data[ids], (weight,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", f"incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=ax)):
            if t.requires_grad:
                t._accumulate(part)

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", f"all inputs must share a shape, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=ax))

    return make_node(out, tensors, bw)


def gather(x: Tensor, idx, axis: int = -1) -> Tensor:
    """``take_along_axis``: pick ``idx`` entries along ``axis``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != x.ndim:
        raise ShapeError("gather", f"index rank {idx.ndim} != input rank {x.ndim}")
    ax = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.data)
        grids = list(np.ogrid[tuple(slice(0, n) for n in idx.shape)])
        grids[ax] = idx
        np.add.at(full, tuple(grids), g)
        x._accumulate(full)

    return make_node(np.take_along_axis(x.data, idx, axis=ax), (x,), bw)


def stop_gradient(x) -> Tensor:
    """Constant copy of ``x``; nothing upstream receives gradient."""
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x))


# -- nonlinearities ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: x._accumulate(g * pos))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: x._accumulate(g * out * (1.0 - out)))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: x._accumulate(g * (1.0 - out * out)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(np.minimum(x.data, 80.0))
    return make_node(out, (x,), lambda g: x._accumulate(g * out))


def log(x: Tensor, eps: float = 1e-30) -> Tensor:
    """Natural log with the input floored at ``eps`` (floored entries get no gradient)."""
    safe = np.maximum(x.data, eps)
    live = x.data > eps
    return make_node(np.log(safe), (x,), lambda g: x._accumulate(np.where(live, g / safe, 0.0)))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: x._accumulate(g * sign))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: x._accumulate(g * inside))


def _masked(x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    if mask is None:
        return x, np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return np.where(mask, x, -np.inf), mask


def softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax over ``axis``; masked entries get exactly zero probability and zero gradient.

    Rows with every entry masked produce all zeros.
    """
    z, m = _masked(x.data, mask)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(m, np.exp(z - zmax), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    p = (e / np.where(denom > 0, denom, 1.0)).astype(x.dtype)

    def bw(g):
        x._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return make_node(p, (x,), bw)


def log_softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Log-probabilities over ``axis``.

    Masked entries are reported as 0.0 (not -inf) so downstream products stay
    finite; they carry no gradient and callers must apply the same mask.
    """
    z, m = _masked(x.data, mask)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(m, np.exp(z - zmax), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    lse = zmax + np.log(np.where(denom > 0, denom, 1.0))
    out = np.where(m, x.data - lse, 0.0).astype(x.dtype)
    p = e / np.where(denom > 0, denom, 1.0)

    def bw(g):
        g = np.where(m, g, 0.0)
        x._accumulate(np.where(m, g - p * g.sum(axis=axis, keepdims=True), 0.0))

    return make_node(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout: rate must be < 1")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


# -- convolution and normalization ---------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid (no padding), stride-1 2-D convolution. ``x``: (N,C,H,W); ``weight``: (F,C,kh,kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError("conv2d", f"input has {c} channels but weight expects {cw}")
    if kh > h or kw > w:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h - kh + 1, w - kw + 1
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # (N,C,Ho,Wo,kh,kw)
    flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = (flat @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
        parents = (x, weight, bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if weight.requires_grad:
            weight._accumulate((gflat.T @ flat).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(gx)

    return make_node(out, parents, bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode batch statistics are used and the running buffers (if given)
    are updated in place; otherwise the running statistics are applied.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError("batch_norm", f"channel mismatch: input {x.shape}, gamma {gamma.shape}")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    bshape = tuple(bshape)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            m = np.prod([x.shape[a] for a in axes])
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = (xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)).astype(x.dtype)

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = np.prod([x.shape[a] for a in axes])
                s1 = gxhat.sum(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                x._accumulate(inv.reshape(bshape) / m * (m * gxhat - s1 - xhat * s2))
            else:
                x._accumulate(gxhat * inv.reshape(bshape))

    return make_node(out, (x, gamma, beta), bw)


# -- losses --------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(``logits``)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs targets {targets.shape}")
    lp = log_softmax(logits, mask=mask, axis=-1)
    picked = gather(lp, targets[:, None], axis=-1)
    return mul(mean(picked), -1.0)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy between sigmoid(``logits``) and soft ``labels``."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError("bce_with_logits", f"logits {logits.shape} vs labels {y.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        logits._accumulate(g * (_sigmoid(z) - y) / n)

    return make_node(np.asarray(loss.mean(), dtype=logits.dtype), (logits,), bw)
