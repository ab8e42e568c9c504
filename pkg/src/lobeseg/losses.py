"""Soft Dice losses over lobes and lobar boundaries, and boundary ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, div, mul, slice_axis, tsum
from .errors import ConfigurationError, ContractError, DataValidationError

LOBE_CLASSES = (1, 2, 3, 4, 5)
LOBE_NAMES = ("right-up", "right-mid", "right-low", "left-up", "left-low")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1e-5
    lam: float = 1.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ConfigurationError("gamma must be positive")
        if not self.lam >= 0:
            raise ConfigurationError("lambda must be non-negative")


@dataclass
class LossReport:
    """Scalar loss values for one batch plus the differentiable total."""

    per_class: dict[int, float]
    d_lobes: float
    d_boundary: float = 0.0
    d_total: float = 0.0
    total: Tensor | None = field(default=None, repr=False)


def _check_pair(pred: Tensor, gt: Tensor, what: str) -> None:
    if pred.shape != gt.shape:
        raise ContractError(f"{what}: prediction shape {pred.shape} != ground truth shape {gt.shape}")


def soft_dice_terms(probs: Tensor, gt: Tensor, gamma: float) -> Tensor:
    """Per-channel ``-2 sum(p g) / (sum p + sum g + gamma)``, summed over batch and space."""
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = tsum(mul(probs, gt), axis=axes)
    denom = add(add(tsum(probs, axis=axes), tsum(gt, axis=axes)), gamma)
    return mul(div(inter, denom), -2.0)


def dice_loss(probs: Tensor, onehot_gt: Tensor, cfg: LossConfig = LossConfig()) -> tuple[Tensor, LossReport]:
    """Lobe Dice loss over classes 1..5; the background channel is ignored.

    Returns the differentiable ``d_lobes`` tensor and a report holding the
    per-class values.
    """
    _check_pair(probs, onehot_gt, "dice_loss")
    if probs.ndim != 5 or probs.shape[1] != 6:
        raise ContractError(f"expected (N, 6, D, H, W) probabilities, got {probs.shape}")
    g = onehot_gt.data
    if not (np.all((g == 0) | (g == 1)) and np.all(g.sum(axis=1) == 1)):
        raise DataValidationError("ground truth is not one-hot per voxel")
    terms = soft_dice_terms(probs, Tensor(g.astype(probs.dtype, copy=False)), cfg.gamma)
    lobes = slice_axis(terms, 0, 1, 6)
    d_lobes = tsum(lobes)
    per_class = {c: float(v) for c, v in zip(LOBE_CLASSES, lobes.data)}
    return d_lobes, LossReport(per_class=per_class, d_lobes=float(d_lobes.data), d_total=float(d_lobes.data))


def boundary_loss(boundary_probs: Tensor, boundary_gt: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Single-channel Dice loss between predicted and reference boundary maps."""
    _check_pair(boundary_probs, boundary_gt, "boundary_loss")
    g = boundary_gt.data
    if not np.all((g == 0) | (g == 1)):
        raise DataValidationError("boundary ground truth must be binary")
    terms = soft_dice_terms(boundary_probs, Tensor(g.astype(boundary_probs.dtype, copy=False)), cfg.gamma)
    return tsum(terms)


def total_loss(d_lobes, d_boundary, cfg: LossConfig = LossConfig()):
    """``d_lobes + lam * d_boundary``; works on Tensors or plain floats."""
    if isinstance(d_lobes, Tensor) or isinstance(d_boundary, Tensor):
        if cfg.lam == 0 or d_boundary is None:
            return d_lobes
        return add(d_lobes, mul(d_boundary, cfg.lam))
    return d_lobes + cfg.lam * (d_boundary or 0.0)


def compute_losses(lobe_probs: Tensor, boundary_probs: Tensor | None, onehot_gt: Tensor,
                   boundary_gt: Tensor | None, cfg: LossConfig = LossConfig()) -> LossReport:
    """Full objective for one batch; ``report.total`` is ready for ``backward``."""
    d_lobes, report = dice_loss(lobe_probs, onehot_gt, cfg)
    d_b = None
    if boundary_probs is not None and boundary_gt is not None:
        d_b = boundary_loss(boundary_probs, boundary_gt, cfg)
        report.d_boundary = float(d_b.data)
    report.total = total_loss(d_lobes, d_b, cfg)
    # scalar form of the same sum, so the logged identity holds exactly at any tensor precision
    report.d_total = total_loss(report.d_lobes, report.d_boundary, cfg)
    return report


def one_hot(labels: np.ndarray, num_classes: int = 6, dtype=np.float32) -> np.ndarray:
    """``(D, H, W)`` or ``(N, D, H, W)`` labels -> ``(N, C, D, H, W)`` one-hot."""
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[None]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise DataValidationError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def extract_boundary_gt(labels: np.ndarray) -> np.ndarray:
    """Mark lobe voxels that touch a different lobe through a face.

    Args:
        labels: integer ``(D, H, W)`` volume with values in 0..5.

    Returns:
        ``(1, 1, D, H, W)`` uint8 map; lung/background transitions are not boundaries.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ContractError(f"expected a (D, H, W) label volume, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 5):
        raise DataValidationError("labels must lie in 0..5")
    lab = labels.astype(np.int16)
    out = np.zeros(lab.shape, dtype=bool)
    for axis in range(3):
        n = lab.shape[axis]
        if n < 2:
            continue
        a = np.take(lab, np.arange(n - 1), axis=axis)
        b = np.take(lab, np.arange(1, n), axis=axis)
        hit = (a > 0) & (b > 0) & (a != b)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        out[tuple(lo)] |= hit
        out[tuple(hi)] |= hit
    return out.astype(np.uint8)[None, None]
