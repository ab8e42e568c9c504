"""``lobeseg`` command line: data generation, training, evaluation, cross-validation, ablation, prediction.

Exit codes: 0 success, 1 usage or configuration error, 2 data / IO /
checkpoint error, 3 numerical failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .data import generate_dataset, lung_mask_threshold, read_dataset, read_volume, resample, write_case, write_volume
from .data.phantom import VolumeSample
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DataValidationError,
    GenerationError,
    NumericalError,
    VolumeIOError,
)
from .metrics import format_table, write_report
from .pipeline import report
from .pipeline.checkpoint import load_checkpoint, save_checkpoint
from .pipeline.config import TrainConfig, desk_config, load_config, parse_override, save_config
from .pipeline.crossval import ABLATION_VARIANTS, cross_validate, run_ablation
from .pipeline.train import evaluate, predict_labels, preprocess, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lobeseg")


def _exit_code(exc: BaseException) -> int | None:
    """Documented exit code for ``exc``; ``None`` means an unexpected failure."""
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataValidationError, VolumeIOError, CheckpointError, GenerationError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigurationError, ContractError)):
        return EXIT_CONFIG
    return None


def _resolve_config(config_path, preset, overrides) -> TrainConfig:
    if config_path:
        return load_config(config_path, list(overrides))
    base = desk_config() if preset == "desk" else TrainConfig()
    return base.replace(**dict(parse_override(o) for o in overrides)) if overrides else base


def _load_cases(data_dir: Path):
    cases = read_dataset(data_dir)
    if not cases:
        raise DataValidationError(f"{data_dir}: no cases found")
    return cases


def _emit_history(history, out_dir: Path, stem: str, title: str = "") -> None:
    report.write_history(history, out_dir / f"{stem}.tsv")
    report.plot_loss_curves(history, out_dir / f"{stem}.png", title=title)


config_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                 help="YAML config mirroring TrainConfig."),
    click.option("--preset", type=click.Choice(["default", "desk"]), default="default", show_default=True,
                 help="Base config when --config is not given."),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                 help="Dotted override, e.g. --set optimizer.lr=0.003 (repeatable)."),
    click.option("--data-dir", type=click.Path(file_okay=False), default=None,
                 help="Dataset directory (defaults to dataset_dir in the config)."),
    click.option("--out-dir", type=click.Path(file_okay=False), default=None,
                 help="Output directory (defaults to output_dir in the config)."),
]


def with_config(fn):
    for opt in reversed(config_options):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Pulmonary lobe segmentation on synthetic CT phantoms."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command("gen-data")
@click.option("--count", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--shape", type=int, nargs=3, default=(32, 64, 64), show_default=True, help="D H W (z y x).")
@click.option("--visibility", type=click.FloatRange(0.0, 1.0), default=0.3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
def gen_data(count, shape, visibility, seed, out_dir):
    """Write COUNT phantom cases under OUT_DIR, one directory per case."""
    out = Path(out_dir)
    for sample in generate_dataset(count, shape=tuple(shape), visibility=visibility, seed=seed):
        write_case(sample, out / sample.case_id)
    click.echo(f"wrote {count} cases to {out}")


@cli.command("init-config")
@click.option("--preset", type=click.Choice(["default", "desk"]), default="default", show_default=True)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.argument("path", type=click.Path(dir_okay=False))
def init_config(preset, overrides, path):
    """Write a full config file to PATH for editing."""
    save_config(_resolve_config(None, preset, overrides), path)
    click.echo(f"wrote {path}")


@cli.command("train")
@with_config
def train_cmd(config_path, preset, overrides, data_dir, out_dir):
    """Train one model on every case in the dataset."""
    cfg = _resolve_config(config_path, preset, overrides)
    out = Path(out_dir or cfg.output_dir)
    cases = _load_cases(Path(data_dir or cfg.dataset_dir))
    ckpt = train(cfg, cases)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    save_checkpoint(ckpt, out / "model.ckpt")
    _emit_history(ckpt.history, out, "loss", title="training loss")
    last = ckpt.history[-1]
    click.echo(f"trained {len(ckpt.history)} steps; final d_total {last['d_total']:.4f}")
    click.echo(f"checkpoint: {out / 'model.ckpt'}")


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data-dir", type=click.Path(file_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.option("--native", is_flag=True, help="Score at native resolution instead of model resolution.")
def eval_cmd(checkpoint, data_dir, out_dir, native):
    """Score a checkpoint on a dataset (per-lobe Dice)."""
    ckpt = load_checkpoint(checkpoint)
    rep = evaluate(ckpt, _load_cases(Path(data_dir)), native_resolution=native)
    rows = [("evaluation", rep)]
    click.echo(format_table(rows), nl=False)
    click.echo(f"mean of lobe means {rep.mean_of_lobes:.4f} over {rep.n_cases} cases")
    if out_dir:
        write_report(rows, Path(out_dir), "metrics")


@cli.command("cross-validate")
@with_config
@click.option("--k", type=click.IntRange(min=2), default=5, show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Folds run in parallel.")
def cross_validate_cmd(config_path, preset, overrides, data_dir, out_dir, k, jobs):
    """k-fold cross-validation with pooled per-case Dice."""
    cfg = _resolve_config(config_path, preset, overrides)
    out = Path(out_dir or cfg.output_dir)
    cases = _load_cases(Path(data_dir or cfg.dataset_dir))
    result = cross_validate(cfg, cases, k=k, jobs=jobs)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    rows = [("pooled", result.pooled)] + [(f"fold {f.fold}", f.report) for f in result.folds]
    write_report(rows, out, "cv_metrics")
    for f in result.folds:
        _emit_history(f.history, out, f"loss_fold{f.fold}", title=f"fold {f.fold}")
    (out / "folds.json").write_text(json.dumps(
        [{"fold": f.fold, "train": f.train_ids, "test": f.test_ids} for f in result.folds], indent=2))
    click.echo(format_table(rows), nl=False)


@cli.command("ablation")
@with_config
@click.option("--k", type=click.IntRange(min=2), default=5, show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--variants", default=",".join(ABLATION_VARIANTS), show_default=True,
              help="Comma separated subset of the four rows.")
def ablation_cmd(config_path, preset, overrides, data_dir, out_dir, k, jobs, variants):
    """Cross-validate the four technique variants on identical folds."""
    cfg = _resolve_config(config_path, preset, overrides)
    out = Path(out_dir or cfg.output_dir)
    chosen = [v.strip() for v in variants.split(",") if v.strip()]
    unknown = set(chosen) - set(ABLATION_VARIANTS)
    if unknown:
        raise ConfigurationError(f"unknown variants {sorted(unknown)}; choose from {list(ABLATION_VARIANTS)}")
    chosen = [v for v in ABLATION_VARIANTS if v in chosen]
    cases = _load_cases(Path(data_dir or cfg.dataset_dir))
    rows = run_ablation(cfg, cases, k=k, variants=chosen, jobs=jobs)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    table = [(r.variant, r.metrics) for r in rows]
    write_report(table, out, "ablation")
    report.plot_ablation(table, out / "ablation.png")
    for r in rows:
        stem = r.variant.lstrip("+")
        for f in r.folds:
            report.write_history(f.history, out / f"loss_{stem}_fold{f.fold}.tsv")
    click.echo(format_table(table), nl=False)


@cli.command("predict")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Image volume file (role image).")
@click.option("--mask", "mask_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Lung mask volume; thresholded from the image when omitted.")
@click.option("--output", type=click.Path(dir_okay=False), required=True, help="Label volume to write.")
@click.option("--figure", type=click.Path(dir_okay=False), default=None, help="Optional PNG of mid-slices.")
def predict_cmd(checkpoint, input_path, mask_path, output, figure):
    """Segment one image volume; labels are written at the input's native grid."""
    ckpt = load_checkpoint(checkpoint)
    vol = read_volume(input_path)
    if vol.role != "image":
        raise DataValidationError(f"{input_path}: expected an image volume, got role {vol.role}")
    image = vol.data
    mask = read_volume(mask_path).data if mask_path else lung_mask_threshold(image)
    sample = VolumeSample(image, np.zeros(image.shape, np.uint8), mask, vol.spacing, case_id=Path(input_path).stem)
    case = preprocess(sample, ckpt.config, ckpt.model.dtype)
    labels = resample(predict_labels(ckpt.model, case.image, case.mask), image.shape, "nearest")
    labels = np.where(mask > 0, labels, 0)
    write_volume(labels.astype(np.uint8), output, "labels", vol.spacing)
    if figure:
        report.plot_label_slices(image, labels, figure)
    counts = np.bincount(labels.ravel(), minlength=6)
    click.echo("voxels per class: " + ", ".join(f"{c}={n}" for c, n in enumerate(counts)))


def main(argv: list[str] | None = None) -> int:
    """Console entry point; returns the process exit code."""
    try:
        cli.main(args=argv, prog_name="lobeseg", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
