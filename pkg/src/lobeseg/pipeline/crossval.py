"""k-fold cross-validation and the four-variant ablation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from ..data.folds import kfold_splits
from ..data.phantom import VolumeSample
from ..errors import ConfigurationError, LobeSegError
from ..metrics import MetricsReport, aggregate_metrics
from . import train as train_mod
from .config import TrainConfig

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("baseline", "+coordmap", "+groupnorm", "proposed")


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    report: MetricsReport
    history: list[dict] = field(default_factory=list)


@dataclass
class CrossValidationResult:
    folds: list[FoldResult]
    pooled: MetricsReport

    @property
    def fold_reports(self) -> list[MetricsReport]:
        return [f.report for f in self.folds]


def _run_fold(config: TrainConfig, fold: int, train_cases, test_cases) -> FoldResult:
    train_ids = [c.case_id for c in train_cases]
    test_ids = [c.case_id for c in test_cases]
    if set(train_ids) & set(test_ids):
        raise ConfigurationError(f"fold {fold}: train/test overlap {sorted(set(train_ids) & set(test_ids))}")
    try:
        ckpt = train_mod.train(config, train_cases)
        report = train_mod.evaluate(ckpt, test_cases)
    except LobeSegError as exc:
        raise type(exc)(f"fold {fold}: {exc}") from exc
    log.info("fold %d mean Dice %.4f", fold, report.mean_dice)
    return FoldResult(fold, train_ids, test_ids, report, ckpt.history)


def cross_validate(config: TrainConfig, cases: Sequence[VolumeSample], k: int = 5, fold_seed: int | None = None,
                   jobs: int = 1) -> CrossValidationResult:
    """Train on each fold complement and score its held-out fold.

    The pooled report holds every case exactly once. ``jobs > 1`` runs folds
    in separate processes; results are identical to the sequential run.
    """
    ids = [c.case_id for c in cases]
    by_id = dict(zip(ids, cases))
    splits = kfold_splits(ids, k, config.seed if fold_seed is None else fold_seed)
    work = [(config, f, [by_id[i] for i in tr], [by_id[i] for i in te]) for f, (tr, te) in enumerate(splits)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*work)))
    else:
        results = [_run_fold(*w) for w in work]
    per_case, case_ids = [], []
    for r in results:
        per_case.extend(r.report.per_case)
        case_ids.extend(r.report.case_ids)
    return CrossValidationResult(results, aggregate_metrics(per_case, case_ids))


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Toggle the techniques for one ablation row.

    The proposed row is read as "+groupnorm" plus the boundary objective
    with weight 1; the other rows carry no boundary head at all.
    """
    toggles = {
        "baseline": (False, False, 0.0),
        "+coordmap": (True, False, 0.0),
        "+groupnorm": (True, True, 0.0),
        "proposed": (True, True, 1.0),
    }
    if variant not in toggles:
        raise ConfigurationError(f"unknown ablation variant {variant!r}")
    coord, gn, lam = toggles[variant]
    return base.replace(**{
        "model.use_coordconv": coord,
        "model.use_groupnorm": gn,
        "model.boundary_head": lam > 0,
        "loss.lambda": lam,
    })


@dataclass
class AblationRow:
    variant: str
    metrics: MetricsReport
    folds: list[FoldResult] = field(default_factory=list)


def run_ablation(base_config: TrainConfig, cases: Sequence[VolumeSample], k: int = 5,
                 variants: Sequence[str] = ABLATION_VARIANTS, jobs: int = 1) -> list[AblationRow]:
    """Cross-validate every variant on identical folds and seeds, rows in table order."""
    if len(cases) < 2 * k:
        raise ConfigurationError(f"ablation needs at least {2 * k} cases for {k} folds, got {len(cases)}")
    rows = []
    for v in variants:
        log.info("ablation variant %s", v)
        cv = cross_validate(variant_config(base_config, v), cases, k=k, jobs=jobs)
        rows.append(AblationRow(v, cv.pooled, cv.folds))
    return rows
