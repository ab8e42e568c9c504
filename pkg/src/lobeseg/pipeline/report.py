"""Delimited run outputs and the figures rendered next to them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.colors import ListedColormap
from matplotlib.figure import Figure

from ..losses import LOBE_CLASSES, LOBE_NAMES
from ..metrics import MetricsReport

HISTORY_FIELDS = ("step", "epoch", "case", "d_lobes", "d_boundary", "d_total")
# background transparent, then one color per lobe
LOBE_COLORS = ["#00000000", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"]


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def write_history(history: Sequence[dict], path: str | Path) -> Path:
    """One row per optimizer step, tab separated."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, delimiter="\t", extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def read_history(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        r["step"], r["epoch"] = int(r["step"]), int(r["epoch"])
        for k in ("d_lobes", "d_boundary", "d_total"):
            r[k] = float(r[k])
    return rows


def epoch_means(history: Sequence[dict]) -> dict[str, np.ndarray]:
    epochs = sorted({h["epoch"] for h in history})
    out = {"epoch": np.array(epochs)}
    for k in ("d_lobes", "d_boundary", "d_total"):
        out[k] = np.array([np.mean([h[k] for h in history if h["epoch"] == e]) for e in epochs])
    return out


def plot_loss_curves(history: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Per-step total loss (faint) with per-epoch means of each term."""
    fig = Figure(figsize=(6, 3.6))
    ax = fig.add_subplot(111)
    steps = [h["step"] for h in history]
    ax.plot(steps, [h["d_total"] for h in history], color="0.75", lw=0.6, label="d_total (step)")
    if history:
        means = epoch_means(history)
        per_epoch = max(1, len(history) // len(means["epoch"]))
        x = (means["epoch"] + 1) * per_epoch - 1
        ax.plot(x, means["d_total"], "k.-", ms=3, label="d_total")
        ax.plot(x, means["d_lobes"], ".-", ms=3, color="#1f77b4", label="d_lobes")
        if np.any(means["d_boundary"] != 0):
            ax.plot(x, means["d_boundary"], ".-", ms=3, color="#d62728", label="d_boundary")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, Path(path))


def plot_ablation(rows: Sequence[tuple[str, MetricsReport]], path: str | Path) -> Path:
    """Grouped bars: per-lobe mean Dice (std as error bars) for each variant."""
    fig = Figure(figsize=(7.5, 3.6))
    ax = fig.add_subplot(111)
    cols = list(LOBE_NAMES) + ["average"]
    width = 0.8 / max(len(rows), 1)
    base = np.arange(len(cols))
    for i, (name, rep) in enumerate(rows):
        means = [rep.per_lobe[c][0] for c in LOBE_CLASSES] + [rep.overall[0]]
        stds = [rep.per_lobe[c][1] for c in LOBE_CLASSES] + [rep.overall[1]]
        ax.bar(base + (i - (len(rows) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=name)
    ax.set_xticks(base)
    ax.set_xticklabels(cols, fontsize=8)
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, fontsize=8, ncol=len(rows))
    return _save(fig, Path(path))


def plot_label_slices(image: np.ndarray, labels: np.ndarray, path: str | Path) -> Path:
    """Axial and coronal mid-slices plus a right-lung sagittal slice, labels overlaid."""
    d, h, w = labels.shape
    views = [(image[d // 2], labels[d // 2], "axial"),
             (image[:, h // 2], labels[:, h // 2], "coronal"),
             (image[:, :, w // 4], labels[:, :, w // 4], "sagittal (right)")]
    fig = Figure(figsize=(9, 3.2))
    cmap = ListedColormap(LOBE_COLORS)
    for i, (img, lab, name) in enumerate(views):
        ax = fig.add_subplot(1, 3, i + 1)
        ax.imshow(img, cmap="gray", interpolation="nearest")
        ax.imshow(lab, cmap=cmap, vmin=0, vmax=5, alpha=0.45, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    return _save(fig, Path(path))
