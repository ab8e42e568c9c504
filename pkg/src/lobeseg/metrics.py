"""Hard-label Dice evaluation and Table-1 style aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DataValidationError
from .losses import LOBE_CLASSES, LOBE_NAMES


def argmax_labels(probs: Tensor | np.ndarray) -> np.ndarray:
    """Per-voxel class of maximum probability, ties resolved to the lower index.

    ``(N, C, D, H, W)`` -> ``(N, D, H, W)`` uint8.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if p.ndim != 5:
        raise ContractError(f"expected (N, C, D, H, W) probabilities, got {p.shape}")
    # np.argmax returns the first maximal index
    return np.argmax(p, axis=1).astype(np.uint8)


def dice_metric(pred_labels: np.ndarray, gt_labels: np.ndarray) -> dict[int, float]:
    """Dice coefficient for each lobe class 1..5.

    Both-empty gives 1.0; exactly one empty gives 0.0.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ContractError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() > 5):
            raise DataValidationError("labels must lie in 0..5")
    out = {}
    for c in LOBE_CLASSES:
        p = pred == c
        g = gt == c
        sp, sg = int(p.sum()), int(g.sum())
        if sp + sg == 0:
            out[c] = 1.0
        else:
            out[c] = 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg)
    return out


@dataclass
class MetricsReport:
    """Mean and population std of Dice per lobe across cases.

    ``overall`` summarizes the per-case five-lobe averages; ``mean_of_lobes``
    is the mean of the per-lobe means. They coincide when every case scores
    every lobe, which is always true here, but both are reported.
    """

    per_lobe: dict[int, tuple[float, float]]
    overall: tuple[float, float]
    mean_of_lobes: float
    n_cases: int
    per_case: list[dict[int, float]] = field(default_factory=list)
    case_ids: list[str] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return self.overall[0]

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "per_lobe": {LOBE_NAMES[c - 1]: {"mean": m, "std": s} for c, (m, s) in self.per_lobe.items()},
            "average": {"mean": self.overall[0], "std": self.overall[1]},
            "mean_of_lobe_means": self.mean_of_lobes,
            "per_case": [
                {"case": cid, **{LOBE_NAMES[c - 1]: v for c, v in d.items()}}
                for cid, d in zip(self.case_ids or [str(i) for i in range(len(self.per_case))], self.per_case)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per_case = [{c: float(row[n]) for c, n in zip(LOBE_CLASSES, LOBE_NAMES)} for row in d.get("per_case", [])]
        return cls(
            per_lobe={c: (d["per_lobe"][n]["mean"], d["per_lobe"][n]["std"]) for c, n in zip(LOBE_CLASSES, LOBE_NAMES)},
            overall=(d["average"]["mean"], d["average"]["std"]),
            mean_of_lobes=d["mean_of_lobe_means"],
            n_cases=d["n_cases"],
            per_case=per_case,
            case_ids=[row["case"] for row in d.get("per_case", [])],
        )


def aggregate_metrics(per_case: list[dict[int, float]], case_ids: list[str] | None = None) -> MetricsReport:
    if not per_case:
        raise ContractError("cannot aggregate an empty case list")
    table = np.array([[case[c] for c in LOBE_CLASSES] for case in per_case], dtype=np.float64)
    means = table.mean(axis=0)
    stds = table.std(axis=0)
    case_avg = table.mean(axis=1)
    return MetricsReport(
        per_lobe={c: (float(means[i]), float(stds[i])) for i, c in enumerate(LOBE_CLASSES)},
        overall=(float(case_avg.mean()), float(case_avg.std())),
        mean_of_lobes=float(means.mean()),
        n_cases=len(per_case),
        per_case=[dict(c) for c in per_case],
        case_ids=list(case_ids) if case_ids is not None else [],
    )


TABLE_COLUMNS = LOBE_NAMES + ("average",)


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Render rows as text: mean on one line, (std) on the next, one column per lobe."""
    width = max([len("Techniques")] + [len(name) for name, _ in rows]) + 2
    head = "Techniques".ljust(width) + "".join(c.rjust(11) for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, rep in rows:
        means = [rep.per_lobe[c][0] for c in LOBE_CLASSES] + [rep.overall[0]]
        stds = [rep.per_lobe[c][1] for c in LOBE_CLASSES] + [rep.overall[1]]
        lines.append(name.ljust(width) + "".join(f"{m:11.3f}" for m in means))
        lines.append(" " * width + "".join(f"({s:.3f})".rjust(11) for s in stds))
    return "\n".join(lines) + "\n"


def write_report(rows: list[tuple[str, MetricsReport]], out_dir: Path, stem: str = "metrics") -> tuple[Path, Path, Path]:
    """Write ``<stem>.txt`` (table), ``<stem>.json`` and ``<stem>.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{stem}.txt"
    txt.write_text(format_table(rows))
    js = out_dir / f"{stem}.json"
    js.write_text(json.dumps({name: rep.to_dict() for name, rep in rows}, indent=2))
    csv = out_dir / f"{stem}.csv"
    with csv.open("w") as fh:
        fh.write("row," + ",".join(f"{c}_mean,{c}_std" for c in TABLE_COLUMNS) + "\n")
        for name, rep in rows:
            vals = [rep.per_lobe[c] for c in LOBE_CLASSES] + [rep.overall]
            fh.write(name + "," + ",".join(f"{m:.6f},{s:.6f}" for m, s in vals) + "\n")
    return txt, js, csv
