"""Threshold lung masking and aligned-corner resampling."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError, ContractError

LUNG_THRESHOLD_HU = -500.0
_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def lung_mask_threshold(image: np.ndarray, threshold: float = LUNG_THRESHOLD_HU, keep: int = 2) -> np.ndarray:
    """Binary lung mask: air-like voxels, the ``keep`` largest 6-connected parts, holes filled."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractError(f"expected a (D, H, W) image, got {image.shape}")
    raw = image < threshold
    comp, n = ndimage.label(raw, structure=_SIX_CONNECTED)
    if n == 0:
        return np.zeros(image.shape, dtype=np.uint8)
    sizes = np.bincount(comp.ravel())[1:]
    # stable sort keeps component order deterministic on size ties
    largest = np.argsort(-sizes, kind="stable")[:keep] + 1
    mask = np.isin(comp, largest)
    return ndimage.binary_fill_holes(mask).astype(np.uint8)


def _axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def _linear_axis(vol: np.ndarray, axis: int, dst: int) -> np.ndarray:
    lo, hi, frac = _axis_weights(vol.shape[axis], dst)
    shape = [1] * vol.ndim
    shape[axis] = dst
    frac = frac.reshape(shape)
    a = np.take(vol, lo, axis=axis)
    b = np.take(vol, hi, axis=axis)
    return a + (b - a) * frac


def _nearest_index(src: int, dst: int) -> np.ndarray:
    if dst == 1 or src == 1:
        return np.zeros(dst, dtype=np.int64)
    pos = np.arange(dst) * ((src - 1) / (dst - 1))
    return np.clip(np.floor(pos + 0.5).astype(np.int64), 0, src - 1)


def resample(volume: np.ndarray, target_shape: tuple[int, int, int], mode: str = "trilinear") -> np.ndarray:
    """Resample a ``(D, H, W)`` volume with corner voxel centers aligned.

    ``trilinear`` is for intensities and keeps the input float dtype;
    ``nearest`` is for labels and masks and never invents new values.
    """
    volume = np.asarray(volume)
    target = tuple(int(e) for e in target_shape)
    if volume.ndim != 3 or len(target) != 3:
        raise ContractError("resample works on (D, H, W) volumes")
    if min(target) < 1:
        raise ConfigurationError(f"target extents must be >= 1, got {target}")
    if mode not in ("nearest", "trilinear"):
        raise ConfigurationError(f"unknown resample mode {mode!r}")
    if mode == "trilinear" and volume.dtype.kind not in "f":
        raise ConfigurationError("trilinear resampling of integer (label/mask) volumes is not allowed")
    if target == volume.shape:
        return volume.copy()
    if mode == "nearest":
        idx = [_nearest_index(s, t) for s, t in zip(volume.shape, target)]
        return volume[np.ix_(*idx)]
    out = volume.astype(np.float64)
    for axis, t in enumerate(target):
        if out.shape[axis] != t:
            out = _linear_axis(out, axis, t)
    return out.astype(volume.dtype)
