"""Differentiable primitives.

Elementwise binaries require identical shapes; the only implicit broadcast
is the trailing bias add inside :func:`linear` and :func:`add_bias`. Anything
else must go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

from .memory import meter
from .tensor import Tensor, record


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def saved(arr: np.ndarray) -> np.ndarray:
    """Register an array kept alive for the reverse pass with the meter."""
    meter.track(arr)
    return arr


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return record(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")
    return record(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, g.shape[-1]).sum(0)))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return record(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
    )


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` over the last two axes. ``b`` may be 2-D (shared)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    out_shape = a.shape[:-1] + b.shape[-1:]
    meter.check(int(np.prod(out_shape)) * a.dtype.itemsize)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(ad @ bd, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the trailing axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T
        gW = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(0) if b is not None else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return record(out, inputs, backward)


# ------------------------------------------------------------------- layout

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def flip(x: Tensor, axis: int) -> Tensor:
    return record(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis).copy(),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    shape, dtype = x.shape, x.dtype
    axis = axis % x.ndim

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return record(np.take(x.data, index, axis=axis), (x,), backward)


def slice_along(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    shape, dtype = x.shape, x.dtype
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[sl] = g
        return (full,)

    return record(x.data[sl].copy(), (x,), backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading axes."""
    shape = tuple(shape)
    if shape[len(shape) - x.ndim:] != x.shape:
        raise ShapeError(f"broadcast_to: {x.shape} cannot lead-broadcast to {shape}")
    src = x.shape
    return record(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_sum_to(g, src),)
    )


# -------------------------------------------------------------- activations

def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return record(y, (x,), lambda g: (g * y * (1 - y),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return record(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.logaddexp(xd.dtype.type(0), xd), (x,), lambda g: (g * expit(xd),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return record(y.astype(xd.dtype, copy=False), (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax: last axis is empty")
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return record(y, (x,), backward)


_ACTIVATIONS = {
    "silu": silu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "exp": exp,
    "softmax": softmax,
    "gelu": gelu,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# ------------------------------------------------------------ normalisation

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    D = x.shape[-1]
    if D < 1 or gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gd
        gx = rstd * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return record(xhat * gd + beta.data, (x, gamma, beta), backward)


# -------------------------------------------------------------- convolution

def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Causal per-channel convolution over axis -2 of ``x[..., L, D]``.

    ``out[t] = sum_k kernel[k] * x[t - (K-1) + k]`` with zeros before t=0,
    so output ``t`` never sees inputs after ``t``.
    """
    if x.ndim < 2:
        raise ShapeError(f"depthwise_conv1d: need [..., L, D], got {x.shape}")
    L, D = x.shape[-2:]
    if L == 0:
        raise ShapeError("depthwise_conv1d: zero-length sequence")
    if kernel.ndim != 2 or kernel.shape[1] != D or kernel.shape[0] < 1:
        raise ShapeError(f"depthwise_conv1d: kernel {kernel.shape} incompatible with {x.shape}")
    K = kernel.shape[0]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (K - 1, 0)
    xp = np.pad(x.data, pad)
    w = kernel.data
    y = np.zeros(x.shape, dtype=x.dtype)
    for k in range(K):
        y += w[k] * xp[..., k : k + L, :]
    if bias is not None:
        y += bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        lead = tuple(range(g.ndim - 1))
        for k in range(K):
            gxp[..., k : k + L, :] += w[k] * g
            gw[k] = (g * xp[..., k : k + L, :]).sum(axis=lead)
        gb = g.sum(axis=lead) if bias is not None else None
        return gxp[..., K - 1 :, :], gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(y, inputs, backward)
