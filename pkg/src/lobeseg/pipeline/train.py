"""Preprocessing, the training loop, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..autodiff import Tensor, backward, no_grad
from ..data.phantom import HU_MAX, HU_MIN, VolumeSample
from ..data.preprocess import resample
from ..errors import (
    CheckpointIncompatibleError,
    ConfigurationError,
    ContractError,
    DataValidationError,
    NumericalError,
)
from ..losses import compute_losses, extract_boundary_gt, one_hot
from ..metrics import MetricsReport, aggregate_metrics, argmax_labels, dice_metric
from ..model import Model, ModelConfig, build_model, forward
from .checkpoint import Checkpoint
from .config import TrainConfig
from .optim import Adam

log = logging.getLogger(__name__)

BACKGROUND_VALUE = -1.0


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Clamp to the HU window and map it linearly onto [-1, 1]."""
    clamped = np.clip(image.astype(np.float64), HU_MIN, HU_MAX)
    return 2.0 * (clamped - HU_MIN) / (HU_MAX - HU_MIN) - 1.0


@dataclass
class PreparedCase:
    case_id: str
    image: np.ndarray          # (1, 1, D, H, W) model input
    labels: np.ndarray         # (D, H, W) uint8 at model resolution
    onehot: np.ndarray         # (1, 6, D, H, W)
    boundary: np.ndarray       # (1, 1, D, H, W)
    mask: np.ndarray           # (D, H, W) lung mask at model resolution
    native_labels: np.ndarray | None = None
    native_mask: np.ndarray | None = None


def preprocess(sample: VolumeSample, model_cfg: ModelConfig, dtype=np.float32) -> PreparedCase:
    """Resample to the model grid, normalize intensities and blank out everything outside the lungs."""
    if sample.image.shape != sample.lung_mask.shape or sample.image.shape != sample.labels.shape:
        raise DataValidationError(f"case {sample.case_id}: image/mask/labels shapes disagree")
    target = model_cfg.input_shape
    image = resample(sample.image.astype(np.float32, copy=False), target, "trilinear")
    mask = resample(sample.lung_mask.astype(np.uint8, copy=False), target, "nearest")
    labels = resample(sample.labels.astype(np.uint8, copy=False), target, "nearest")
    x = normalize_intensity(image)
    x[mask == 0] = BACKGROUND_VALUE
    return PreparedCase(
        case_id=sample.case_id,
        image=x.astype(dtype)[None, None],
        labels=labels,
        onehot=one_hot(labels, dtype=dtype),
        boundary=extract_boundary_gt(labels).astype(dtype),
        mask=mask,
        native_labels=sample.labels,
        native_mask=sample.lung_mask,
    )


StepCallback = Callable[[dict], None]


def _check_cases(cases: Sequence) -> None:
    if not cases:
        raise ConfigurationError("training needs at least one case")


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0])


def train(config: TrainConfig, cases: Sequence[VolumeSample | PreparedCase],
          on_step: StepCallback | None = None, dtype=np.float32) -> Checkpoint:
    """Optimize the total Dice objective with Adam, batch size 1.

    Case order is reshuffled every epoch from ``config.seed``; with the same
    config and case list every logged loss is reproduced bit-exactly.

    Raises:
        ConfigurationError: no cases.
        NumericalError: the loss became non-finite (names epoch and step).
    """
    _check_cases(cases)
    prepared = [c if isinstance(c, PreparedCase) else preprocess(c, config.model, dtype) for c in cases]
    model = build_model(config.model, seed=config.seed, dtype=dtype)
    oc = config.optimizer
    opt = Adam(model.parameters, lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps)
    rng = np.random.default_rng(config.seed)
    use_boundary = config.model.boundary_head
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        for idx in rng.permutation(len(prepared)):
            case = prepared[idx]
            model.zero_grad()
            lobe_p, bnd_p = forward(model, Tensor(case.image), training=True, seed=step_seed(config.seed, step))
            report = compute_losses(lobe_p, bnd_p if use_boundary else None, Tensor(case.onehot),
                                    Tensor(case.boundary) if use_boundary else None, config.loss)
            if not np.isfinite(report.d_total):
                raise NumericalError(f"non-finite loss {report.d_total} at epoch {epoch}, step {step} "
                                     f"(case {case.case_id})")
            backward(report.total)
            opt.step()
            entry = {"step": step, "epoch": epoch, "case": case.case_id, "d_lobes": report.d_lobes,
                     "d_boundary": report.d_boundary, "d_total": report.d_total}
            history.append(entry)
            if on_step is not None:
                on_step(entry)
            step += 1
        last = history[-len(prepared):]
        log.info("epoch %d mean d_total %.4f", epoch, float(np.mean([h["d_total"] for h in last])))
    return Checkpoint(model=model, train_config=config, epoch=config.epochs, seed=config.seed,
                      history=history, optimizer_state=opt.state(), optimizer_step=opt.t)


def predict_probs(model: Model, image: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    with no_grad():
        lobe, bnd = forward(model, Tensor(image.astype(model.dtype, copy=False)), training=False)
    return lobe.data, (bnd.data if bnd is not None else None)


def predict_labels(model: Model, image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``(1, 1, D, H, W)`` preprocessed input -> ``(D, H, W)`` label map.

    Lobes exist only inside the lungs, so voxels outside ``mask`` are set to
    background.
    """
    labels = argmax_labels(predict_probs(model, image)[0])[0]
    if mask is not None:
        labels = np.where(mask > 0, labels, 0).astype(labels.dtype)
    return labels


def evaluate(checkpoint: Checkpoint | Model, cases: Sequence[VolumeSample | PreparedCase],
             native_resolution: bool = False) -> MetricsReport:
    """Per-lobe Dice of hard predictions, aggregated over ``cases``.

    Scoring happens at model resolution unless ``native_resolution`` is set,
    in which case predictions are resampled (nearest) back onto the native grid.
    Predictions are restricted to the case's lung mask at either resolution.
    """
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    if not cases:
        raise ContractError("evaluate needs at least one case")
    per_case, ids = [], []
    for c in cases:
        case = c if isinstance(c, PreparedCase) else preprocess(c, model.config, model.dtype)
        try:
            pred = predict_labels(model, case.image, case.mask)
        except (ContractError, ConfigurationError) as exc:
            raise CheckpointIncompatibleError(f"model cannot score case {case.case_id}: {exc}") from exc
        if native_resolution and case.native_labels is not None:
            pred = resample(pred, case.native_labels.shape, "nearest")
            if case.native_mask is not None:
                pred = np.where(case.native_mask > 0, pred, 0).astype(pred.dtype)
            per_case.append(dice_metric(pred, case.native_labels))
        else:
            per_case.append(dice_metric(pred, case.labels))
        ids.append(case.case_id)
    return aggregate_metrics(per_case, ids)
