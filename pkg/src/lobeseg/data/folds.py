"""Seeded k-fold partitioning of case identifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_case: dict[str, int]
    k: int

    def test_cases(self, fold: int) -> list[str]:
        return [c for c, f in self.fold_of_case.items() if f == fold]

    def train_cases(self, fold: int) -> list[str]:
        return [c for c, f in self.fold_of_case.items() if f != fold]


def assign_folds(case_ids: list[str], k: int, seed: int = 0) -> FoldAssignment:
    """Shuffle under ``seed`` and deal cases round-robin; the first ``n % k`` folds get one extra."""
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if len(case_ids) < k:
        raise ConfigurationError(f"{len(case_ids)} cases cannot fill {k} folds")
    if len(set(case_ids)) != len(case_ids):
        raise ConfigurationError("case ids must be unique")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    return FoldAssignment({case_ids[i]: pos % k for pos, i in enumerate(order)}, k)


def kfold_splits(case_ids: list[str], k: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """``(train, test)`` id lists for each fold, preserving the input order within each list."""
    folds = assign_folds(list(case_ids), k, seed)
    return [(folds.train_cases(f), folds.test_cases(f)) for f in range(k)]
