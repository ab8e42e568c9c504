"""Volumetric convolution and its transpose via im2col + GEMM.

Both operators share one weight convention, ``(C_a, C_b, k, k, k)``, such
that ``conv3d`` maps ``C_b -> C_a`` and ``conv_transpose3d`` with the same
array maps ``C_a -> C_b`` and is exactly its adjoint.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, ContractError
from .tensor import Tensor, record


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out: tuple[int, int, int]) -> np.ndarray:
    """Gather ``(C*k^3, N*D'*H'*W')`` patch matrix from a padded input."""
    n, c = xp.shape[:2]
    d, h, w = out
    cols = np.empty((c, k, k, k, n, d, h, w), dtype=xp.dtype)
    s = stride
    for a in range(k):
        for b in range(k):
            for e in range(k):
                patch = xp[:, :, a:a + s * (d - 1) + 1:s, b:b + s * (h - 1) + 1:s, e:e + s * (w - 1) + 1:s]
                cols[:, a, b, e] = patch.transpose(1, 0, 2, 3, 4)
    return cols.reshape(c * k ** 3, n * d * h * w)


def _col2im(cols: np.ndarray, padded_shape: tuple[int, ...], k: int, stride: int,
            out: tuple[int, int, int]) -> np.ndarray:
    """Scatter-add the patch matrix back onto a zero padded volume."""
    n, c = padded_shape[:2]
    d, h, w = out
    cols = cols.reshape(c, k, k, k, n, d, h, w)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    s = stride
    for a in range(k):
        for b in range(k):
            for e in range(k):
                xp[:, :, a:a + s * (d - 1) + 1:s, b:b + s * (h - 1) + 1:s, e:e + s * (w - 1) + 1:s] += \
                    cols[:, a, b, e].transpose(1, 0, 2, 3, 4)
    return xp


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int, spatial: tuple[int, int, int]) -> np.ndarray:
    d, h, w = spatial
    return x[:, :, p:p + d, p:p + h, p:p + w]


def _to_cm(g: np.ndarray) -> np.ndarray:
    """(N, C, ...) -> (C, N*V) channel-major matrix."""
    c = g.shape[1]
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(c, -1)


def _from_cm(m: np.ndarray, n: int, spatial: tuple[int, ...]) -> np.ndarray:
    c = m.shape[0]
    return np.ascontiguousarray(m.reshape((c, n) + tuple(spatial)).transpose(1, 0, 2, 3, 4))


def _check_weight(weight: Tensor) -> int:
    if weight.ndim != 5 or not (weight.shape[2] == weight.shape[3] == weight.shape[4]):
        raise ContractError(f"weight must be (Ca, Cb, k, k, k), got {weight.shape}")
    return weight.shape[2]


def _check_bias(bias: Tensor | None, channels: int) -> None:
    if bias is not None and bias.shape != (channels,):
        raise ContractError(f"bias shape {bias.shape} does not match {channels} output channels")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 3-D cross-correlation (no kernel flip).

    Args:
        x: input of shape ``(N, Cin, D, H, W)``.
        weight: ``(Cout, Cin, k, k, k)`` with odd ``k``.
        bias: optional ``(Cout,)``.
        stride: step along every spatial axis.
        padding: symmetric zero padding; ``(k - 1) // 2`` with stride 1 keeps the shape.
    """
    if x.ndim != 5:
        raise ContractError(f"conv3d expects (N, C, D, H, W) input, got {x.shape}")
    k = _check_weight(weight)
    cout, cin = weight.shape[:2]
    if x.shape[1] != cin:
        raise ContractError(f"input has {x.shape[1]} channels but weight expects {cin}")
    if k % 2 == 0:
        raise ConfigurationError(f"conv3d kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    _check_bias(bias, cout)
    n = x.shape[0]
    spatial = x.shape[2:]
    out_sp = tuple(_out_extent(e, k, stride, padding) for e in spatial)
    if min(out_sp) < 1:
        raise ConfigurationError(f"conv3d output extent {out_sp} is not positive")

    xp = _pad(x.data, padding)
    wm = weight.data.reshape(cout, -1)
    y = wm @ _im2col(xp, k, stride, out_sp)
    if bias is not None:
        y += bias.data[:, None]
    out = _from_cm(y, n, out_sp)

    def backward(g):
        gm = _to_cm(g)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm @ _im2col(xp, k, stride, out_sp).T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            gxp = _col2im(wm.T @ gm, xp.shape, k, stride, out_sp)
            gx = _crop(gxp, padding, spatial)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv3d", inputs, out, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution whose output extents are ``input * stride``.

    It is the exact adjoint of ``conv3d(., weight, stride=stride, padding=padding)``
    acting on a volume of the output size.

    Args:
        x: ``(N, Cin, D, H, W)``.
        weight: ``(Cin, Cout, k, k, k)``.
        bias: optional ``(Cout,)``.
    """
    if x.ndim != 5:
        raise ContractError(f"conv_transpose3d expects (N, C, D, H, W) input, got {x.shape}")
    k = _check_weight(weight)
    cin, cout = weight.shape[:2]
    if x.shape[1] != cin:
        raise ContractError(f"input has {x.shape[1]} channels but weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    _check_bias(bias, cout)
    n = x.shape[0]
    in_sp = x.shape[2:]
    out_sp = tuple(e * stride for e in in_sp)
    extra = stride - k + 2 * padding
    if not 0 <= extra < stride:
        raise ConfigurationError(
            f"kernel {k}, stride {stride}, padding {padding} cannot recover extents x{stride}")

    padded_shape = (n, cout) + tuple(e + 2 * padding for e in out_sp)
    wm = weight.data.reshape(cin, -1)
    xm = _to_cm(x.data)
    full = _col2im(wm.T @ xm, padded_shape, k, stride, in_sp)
    out = np.ascontiguousarray(_crop(full, padding, out_sp))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        cols = _im2col(_pad(g, padding), k, stride, in_sp)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _from_cm(wm @ cols, n, in_sp)
        if weight.requires_grad:
            gw = (xm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv_transpose3d", inputs, out, backward)
