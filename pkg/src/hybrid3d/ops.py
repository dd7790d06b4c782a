"""Differentiable primitives over :class:`~hybrid3d.tensor.Tensor`.

Every function takes tensors (or arrays, treated as constants) and returns a
tensor recorded on the active tape when any input requires a gradient.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, as_tensor, is_tracked, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ConfigurationError(ValueError):
    """Raised when an op is used on a task it does not support."""


class DegenerateVarianceError(ValueError):
    """Raised when batch statistics would be computed from one value."""


def _need(*ts: Optional[Tensor]) -> list[bool]:
    return [t is not None and is_tracked(t) for t in ts]


# -- elementwise and structural helpers ------------------------------------

def _scalar(g: np.ndarray) -> float:
    # upstream gradients of scalar outputs may arrive as () or (1,) arrays
    return float(np.asarray(g).reshape(-1)[0])


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def _reduce(g, shape):
        return g if g.shape == shape else np.full(shape, g.sum())

    return record("add", (a, b), out,
                  lambda g: (_reduce(g, a.shape), _reduce(g, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", (a,), c * a.data, lambda g: (c * g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (g * b.data, g * a.data))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the tensor method name
    return record("sum", (a,), np.asarray(a.data.sum()),
                  lambda g: (np.full(a.shape, _scalar(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return record("mean", (a,), np.asarray(a.data.mean()),
                  lambda g: (np.full(a.shape, _scalar(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return record("reshape", (a,), a.data.reshape(shape),
                  lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0.0),
                  lambda g: (g * mask,))


# -- convolution -------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), np.ascontiguousarray(np.transpose(a.data, axes)),
                  lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def _swap01(nd: int) -> tuple[int, ...]:
    return (1, 0) + tuple(range(2, nd))


def conv_cm(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
            stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution on channel-major activations ``[C, N, *spatial]``.

    Returns ``[O, N, *spatial']``. The networks keep activations in this
    layout so that the im2col matrix multiply needs no extra transposes;
    :func:`conv2d` and :func:`conv3d` wrap it for batch-major tensors.
    """
    nsp = x.ndim - 2
    name = f"conv{nsp}d"
    if nsp < 1 or weight.ndim != nsp + 2:
        raise DimensionError(f"{name}: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"{name}: stride must be >= 1 and padding >= 0")
    c, n = x.shape[:2]
    o, cw = weight.shape[:2]
    if c != cw:
        raise DimensionError(f"{name}: input has {c} channels, weight expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"{name}: bias shape {bias.shape} != ({o},)")
    k = weight.shape[2:]
    spatial = x.shape[2:]
    out_sp = tuple(conv_output_size(s, kk, stride, padding) for s, kk in zip(spatial, k))
    if any(s < 1 for s in out_sp):
        raise DimensionError(f"{name}: kernel {k} larger than padded input {spatial}")
    ax = tuple(range(2, 2 + nsp))
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * nsp) if padding else x.data
    win = sliding_window_view(xp, k, axis=ax)
    win = win[(slice(None), slice(None))
              + tuple(slice(0, stride * (s - 1) + 1, stride) for s in out_sp)]
    # rows are (channel, kernel offset); columns are output sites (n, *out)
    perm = (0,) + tuple(range(2 + nsp, 2 + 2 * nsp)) + (1,) + ax
    cols = np.ascontiguousarray(np.transpose(win, perm)).reshape(c * math.prod(k), -1)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape((o, n) + out_sp)
    if bias is not None:
        out += bias.data.reshape((o,) + (1,) * (nsp + 1))
    need_x, need_w, need_b = _need(x, weight, bias)
    padded_shape = xp.shape

    def _backward(g: np.ndarray):
        gm = g.reshape(o, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if need_w else None
        gb = gm.sum(axis=1) if need_b else None
        gx = None
        if need_x:
            gcols = (wmat.T @ gm).reshape((c,) + k + (n,) + out_sp)
            gxp = np.zeros(padded_shape)
            for off in np.ndindex(*k):
                sl = tuple(slice(j, j + stride * (s - 1) + 1, stride)
                           for j, s in zip(off, out_sp))
                gxp[(slice(None), slice(None)) + sl] += gcols[(slice(None),) + off]
            if padding:
                gxp = np.ascontiguousarray(gxp[(slice(None), slice(None))
                                               + tuple(slice(padding, padding + s) for s in spatial)])
            gx = gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(name, inputs, out, _backward)


def _conv_nc(x: Tensor, weight: Tensor, bias, stride: int, padding: int, nsp: int) -> Tensor:
    if x.ndim != nsp + 2:
        raise DimensionError(f"conv{nsp}d: expected a {nsp + 2}-d input, got {x.shape}")
    perm = _swap01(x.ndim)
    return transpose(conv_cm(transpose(x, perm), weight, bias, stride, padding), perm)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation of ``[N,C,H,W]`` with ``[O,C,kh,kw]``."""
    return _conv_nc(as_tensor(x), weight, bias, stride, padding, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 1) -> Tensor:
    """Zero-padded 3D cross-correlation of ``[N,C,D,H,W]`` with ``[O,C,kd,kh,kw]``."""
    return _conv_nc(as_tensor(x), weight, bias, stride, padding, 3)


# -- normalisation -------------------------------------------------------------

def batch_norm(x: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               gamma: Tensor, beta: Tensor, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
               channel_axis: int = 1) -> Tensor:
    """Per-channel batch normalisation for ``[N,C,H,W]`` or ``[N,C,D,H,W]``.

    In training mode the batch statistics normalise the input and the
    running buffers are updated in place (unbiased variance, EMA with
    ``momentum``). In eval mode the running buffers are used.
    ``channel_axis=0`` accepts channel-major activations.
    """
    if x.ndim not in (4, 5):
        raise DimensionError(f"batch_norm: expected 4-d or 5-d input, got {x.shape}")
    ch = x.shape[channel_axis]
    if gamma.shape != (ch,) or beta.shape != (ch,) or running_mean.shape != (ch,):
        raise DimensionError(f"batch_norm: parameters do not match {ch} channels")
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    bshape = tuple(ch if i == channel_axis else 1 for i in range(x.ndim))
    g_b = gamma.data.reshape(bshape)
    if training:
        m = x.size // ch
        if m == 1:
            raise DegenerateVarianceError(
                "batch_norm: one value per channel in training mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        m = None
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = g_b * xhat + beta.data.reshape(bshape)
    need_x, need_g, need_b = _need(x, gamma, beta)

    def _backward(g: np.ndarray):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = None
        if need_x:
            scale_ = (gamma.data * inv_std).reshape(bshape)
            if training:
                gx = scale_ / m * (m * g - gbeta.reshape(bshape)
                                   - xhat * ggamma.reshape(bshape))
            else:
                gx = g * scale_
        return gx, (ggamma if need_g else None), (gbeta if need_b else None)

    return record("batch_norm", (x, gamma, beta), out, _backward)


# -- pooling ---------------------------------------------------------------------

def avg_pool(x: Tensor, kernel: int, layout: Optional[str] = None) -> Tensor:
    """Non-overlapping mean pooling with stride equal to ``kernel``.

    ``layout`` is ``"2D"`` or ``"3D"``; when omitted it follows ``x.ndim``.
    Trailing positions that do not fill a window are dropped.
    """
    if kernel <= 0:
        raise ValueError(f"avg_pool: kernel must be positive, got {kernel}")
    nsp = x.ndim - 2
    if layout is not None and layout.upper() != f"{nsp}D":
        raise DimensionError(f"avg_pool: {layout} layout given a {x.ndim}-d input")
    spatial = x.shape[2:]
    if any(s < kernel for s in spatial):
        raise DimensionError(f"avg_pool: spatial extents {spatial} smaller than {kernel}")
    out_sp = tuple(s // kernel for s in spatial)
    crop = (slice(None), slice(None)) + tuple(slice(0, o * kernel) for o in out_sp)
    shp = x.shape[:2]
    for o in out_sp:
        shp += (o, kernel)
    win_axes = tuple(3 + 2 * i for i in range(nsp))
    out = x.data[crop].reshape(shp).mean(axis=win_axes)
    area = kernel ** nsp

    def _backward(g: np.ndarray):
        gx = np.zeros(x.shape)
        spread = np.broadcast_to(np.expand_dims(g / area, win_axes), shp)
        gx[crop] = spread.reshape(x.data[crop].shape)
        return (gx,)

    return record("avg_pool", (x,), out, _backward)


def adaptive_avg_pool_to_one(x: Tensor) -> Tensor:
    """Global mean over every spatial axis, keeping singleton dims."""
    axes = tuple(range(2, x.ndim))
    count = math.prod(x.shape[2:])
    out = x.data.mean(axis=axes, keepdims=True)
    return record("adaptive_avg_pool", (x,), out,
                  lambda g: (np.broadcast_to(g / count, x.shape).copy(),))


# -- dense and heads ----------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[N,F]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"dense: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
    need_x, need_w, need_b = _need(x, weight, bias)

    def _backward(g: np.ndarray):
        return ((g @ weight.data) if need_x else None,
                (g.T @ x.data) if need_w else None,
                g.sum(axis=0) if need_b else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", inputs, out, _backward)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of ``[N,K]`` logits (max-subtracted)."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax: expected [N,K], got {logits.shape}")
    s = _softmax_np(logits.data)
    return record("softmax", (logits,), s,
                  lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def _check_targets(targets, n: int, k: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.shape != (n,):
        raise DimensionError(f"targets shape {t.shape} does not match batch of {n}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise IndexError("targets must be integral class indices")
        t = t.astype(np.int64)
    if n and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"target out of range [0, {k})")
    return t


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: expected [N,K], got {logits.shape}")
    n, k = logits.shape
    t = _check_targets(targets, n, k)
    logp = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def _backward(g: np.ndarray):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (_scalar(g) / n),)

    return record("cross_entropy", (logits,), np.asarray(loss), _backward)


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Stable BCE-with-logits for ``[N,1]`` logits or ``[N,2]`` class logits.

    Two-column logits use their difference as the single logit, which makes
    the value identical (up to rounding) to :func:`cross_entropy`.
    """
    if logits.ndim != 2 or logits.shape[1] not in (1, 2):
        raise ConfigurationError(
            f"binary_cross_entropy needs [N,1] or [N,2] logits, got {logits.shape}")
    n, k = logits.shape
    t = _check_targets(targets, n, 2).astype(np.float64)
    z = logits.data[:, 0] if k == 1 else logits.data[:, 1] - logits.data[:, 0]
    loss = (np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z)))).mean()

    def _backward(g: np.ndarray):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        dz = (sig - t) * (_scalar(g) / n)
        if k == 1:
            return (dz[:, None],)
        return (np.stack([-dz, dz], axis=1),)

    return record("binary_cross_entropy", (logits,), np.asarray(loss), _backward)


def mse(p: Tensor, q: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"mse: shapes {p.shape} and {q.shape} differ")
    diff = p.data - q.data
    n = diff.size

    def _backward(g: np.ndarray):
        d = diff * (2.0 * _scalar(g) / n)
        return d, -d

    return record("mse", (p, q), np.asarray((diff * diff).mean()), _backward)
