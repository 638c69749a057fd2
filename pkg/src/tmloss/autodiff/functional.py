"""Differentiable operations on :class:`~tmloss.autodiff.tensor.Tensor`.

Each function computes its forward value with numpy and attaches a closure
mapping the output adjoint to one adjoint per input (``None`` where an input
takes no gradient). Heavier layers (convolution, the norms, cross-entropy)
have fused backward passes instead of being composed from primitives.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tmloss.autodiff.tensor import Tensor, is_checked
from tmloss.errors import DimensionError, DomainError, NumericalError

_make = Tensor._from_op


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = as_tensor(a, like), as_tensor(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant that takes no gradient."""
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def prelu(x: Tensor, slope: Tensor, axis: int = 1) -> Tensor:
    """Leaky rectifier with one learned slope per channel along ``axis``."""
    if slope.ndim != 1 or slope.shape[0] != x.shape[axis]:
        raise DimensionError(f"prelu slope {slope.shape} does not match axis {axis} of {x.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = -1
    a = slope.data.reshape(bshape)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis % x.ndim)

    def backward(g):
        gx = np.where(pos, g, g * a) if x.requires_grad else None
        gs = np.where(pos, 0, g * x.data).sum(axis=reduce_axes) if slope.requires_grad else None
        return gx, gs

    return _make(out, (x, slope), backward, "prelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if is_checked() and np.any(x.data < 0):
        raise DomainError("log of a negative value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    if is_checked() and np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient is zero wherever the clip is active."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    # at exactly the bound the value is clipped to itself; keep that gradient zero too
    if lo is not None:
        inside &= x.data != lo
    if hi is not None:
        inside &= x.data != hi
    return _make(out.astype(x.dtype), (x,), lambda g: (g * inside,), "clamp")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b`` (cond is a constant mask)."""
    a, b = _binary_operands(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        ga = unbroadcast(np.where(cond, g, 0), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(cond, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out.astype(a.dtype, copy=False), (a, b), backward, "where")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is (N, C_in, H, W) or a single (C_in, H, W) sample; ``weight`` is
    (C_out, C_in, kh, kw). Output spatial size is
    ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"conv2d input channels {c} do not match kernel {weight.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (C, kh, kw, N, Ho, Wo) -> rows index kernel taps, columns index output pixels
    cols = np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    result = _make(out, parents, backward, "conv2d")
    return reshape(result, result.shape[1:]) if single else result


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
    return tuple(a % ndim for a in axes)


def _expand(g: np.ndarray, axes: tuple, keepdims: bool, ndim: int) -> np.ndarray:
    if keepdims:
        return g
    shape = list(g.shape)
    for a in sorted(axes):
        shape.insert(a, 1)
    return g.reshape(shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        return (np.broadcast_to(_expand(g, axes, keepdims, x.ndim), x.shape),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    inv = x.dtype.type(1.0 / count)

    def backward(g):
        return (np.broadcast_to(_expand(g, axes, keepdims, x.ndim) * inv, x.shape),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum; tied maxima share the adjoint equally."""
    axes = _norm_axis(axis, x.ndim)
    kept = np.max(x.data, axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(g):
        mask = x.data == kept
        share = mask / mask.sum(axis=axes, keepdims=True)
        return (_expand(g, axes, keepdims, x.ndim) * share,)

    return _make(np.asarray(out), (x,), backward, "max")


# --------------------------------------------------------------------------
# softmax family
# --------------------------------------------------------------------------

def _check_nan(x: Tensor, op: str) -> None:
    if is_checked() and np.isnan(x.data).any():
        raise NumericalError(f"NaN input to {op}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_nan(x, "softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_nan(x, "log_softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, N_c) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range [0, {n}): {labels[(labels < 0) | (labels >= n)][:5].tolist()}")
    _check_nan(logits, "cross_entropy")
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# --------------------------------------------------------------------------
# normalisation layers
# --------------------------------------------------------------------------

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each vector along the last axis, then apply ``gain``/``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward, "layernorm")


def batchnorm(x: Tensor, gain: Tensor, bias: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over axis 1 of (B, C) or (B, C, H, W).

    In training mode the batch statistics normalise the input and the
    running buffers are updated in place (unbiased variance); in eval mode
    the running statistics are used.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects (B, C) or (B, C, H, W), got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = int(np.prod([x.shape[a] for a in axes]))
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        centered = x.data - running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.astype(x.dtype)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = centered * rstd
    out = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data.reshape(bshape)
            if training:
                gx = rstd * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                             - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = dxhat * rstd
        ggain = (g * xhat).sum(axis=axes) if gain.requires_grad else None
        gbias = g.sum(axis=axes) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, "batchnorm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm (norm floored at ``eps``)."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    live = norm > eps

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, g - out * radial, g) / denom,)

    return _make(out, (x,), backward, "l2_normalize")


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")
