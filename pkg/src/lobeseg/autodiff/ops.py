"""Differentiable operators other than convolution.

Broadcasting is deliberately limited: binary elementwise ops take two
equally shaped tensors or a tensor and a Python scalar, and the per-channel
parameters of ``prelu``/``group_norm`` are the only other broadcast.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from ..errors import ConfigurationError, ContractError
from .tensor import Tensor, record

_Operand = Tensor | float | int


class _KinkLog(threading.local):
    masks: list | None = None


_kinks = _KinkLog()


@contextmanager
def record_kinks() -> Iterator[list[np.ndarray]]:
    """Collect the side-of-kink mask of every ``prelu`` evaluated inside the block.

    Finite-difference checks compare these masks to tell a smooth
    neighbourhood from one that straddles ``x = 0``.
    """
    prev, _kinks.masks = _kinks.masks, []
    try:
        yield _kinks.masks
    finally:
        _kinks.masks = prev


def _split(a: _Operand, b: _Operand) -> tuple[Tensor | None, Tensor | None, float | None]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is not None and tb is not None:
        if ta.shape != tb.shape:
            raise ContractError(f"elementwise shape mismatch: {ta.shape} vs {tb.shape}")
        return ta, tb, None
    scalar = b if ta is not None else a
    if not np.isscalar(scalar):
        raise ContractError("elementwise operands must be Tensors or Python scalars")
    return ta, tb, float(scalar)


def add(a: _Operand, b: _Operand) -> Tensor:
    ta, tb, s = _split(a, b)
    if s is None:
        return record("add", (ta, tb), ta.data + tb.data, lambda g: (g, g))
    t = ta if ta is not None else tb
    return record("add_scalar", (t,), t.data + t.dtype.type(s), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def sub(a: _Operand, b: _Operand) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def mul(a: _Operand, b: _Operand) -> Tensor:
    ta, tb, s = _split(a, b)
    if s is None:
        return record("mul", (ta, tb), ta.data * tb.data, lambda g: (g * tb.data, g * ta.data))
    t = ta if ta is not None else tb
    c = t.dtype.type(s)
    return record("mul_scalar", (t,), t.data * c, lambda g: (g * c,))


def div(a: _Operand, b: _Operand) -> Tensor:
    ta, tb, s = _split(a, b)
    if s is None:
        out = ta.data / tb.data
        return record("div", (ta, tb), out, lambda g: (g / tb.data, -g * out / tb.data))
    if ta is not None:
        return mul(ta, 1.0 / s)
    out = tb.dtype.type(s) / tb.data
    return record("rdiv_scalar", (tb,), out, lambda g: (-g * out / tb.data,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum over ``axis`` (all axes when None); reduced axes are dropped."""
    out = np.sum(x.data, axis=axis)
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(a % x.ndim for a in np.atleast_1d(axis))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return record("sum", (x,), np.asarray(out), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along one axis."""
    axis %= x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ContractError(f"slice {start}:{stop} out of range for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record("slice", (x,), x.data[index].copy(), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", (x,), out, lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _channel_view(p: np.ndarray, ndim: int) -> np.ndarray:
    return p.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel parametric ReLU: ``x`` where x >= 0, else ``slope[c] * x``."""
    if x.ndim < 2 or slope.shape != (x.shape[1],):
        raise ContractError(f"prelu slope shape {slope.shape} does not match channels of {x.shape}")
    a = _channel_view(slope.data, x.ndim)
    neg_mask = x.data < 0
    if _kinks.masks is not None:
        _kinks.masks.append(neg_mask)
    out = np.where(neg_mask, a * x.data, x.data)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = np.where(neg_mask, g * a, g)
        ga = np.sum(np.where(neg_mask, g * x.data, 0), axis=red)
        return gx, ga.astype(slope.dtype, copy=False)

    return record("prelu", (x, slope), out, backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over channel groups and all spatial positions."""
    if x.ndim < 3:
        raise ContractError("group_norm expects (N, C, ...) input")
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"groups={groups} does not divide channels={c}")
    if eps <= 0:
        raise ConfigurationError("group_norm eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError("gamma/beta must have one entry per channel")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xc * inv).reshape(x.shape)
    gv = _channel_view(gamma.data, x.ndim)
    out = xhat * gv + _channel_view(beta.data, x.ndim)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        ggamma = np.sum(g * xhat, axis=red)
        gbeta = np.sum(g, axis=red)
        gh = (g * gv).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * np.mean(gh * xh, axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return record("group_norm", (x, gamma, beta), out, backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, stabilized by subtracting the per-voxel max."""
    if x.ndim < 2 or x.shape[1] < 2:
        raise ContractError("softmax_channels needs at least two channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return record("softmax", (x,), out, backward)


def dropout(x: Tensor, p: float, training: bool, rng_seed: int = 0) -> Tensor:
    """Inverted dropout; identity at inference. Mask is a pure function of the seed."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(x.shape) >= p
    scale = x.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.dtype) * scale
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1; all other extents must agree."""
    if a.ndim != b.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ContractError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return record("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))
