"""Training configuration and its YAML/JSON file form."""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ConfigurationError
from ..losses import LossConfig
from ..model import ModelConfig


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` (no dot) as a float, as YAML 1.2 does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 40
    seed: int = 0
    dataset_dir: str = "data"
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "loss": {"gamma": self.loss.gamma, "lambda": self.loss.lam},
            "optimizer": {k: getattr(self.optimizer, k) for k in ("kind", "lr", "beta1", "beta2", "eps")},
            "epochs": self.epochs,
            "seed": self.seed,
            "dataset_dir": str(self.dataset_dir),
            "output_dir": str(self.output_dir),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = copy.deepcopy(d or {})
        unknown = set(d) - {"model", "loss", "optimizer", "epochs", "seed", "dataset_dir", "output_dir"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            loss = d.pop("loss", {}) or {}
            lam = loss.pop("lambda", loss.pop("lam", 1.0))
            return cls(
                model=ModelConfig.from_dict(d.pop("model", {}) or {}),
                loss=LossConfig(gamma=float(loss.pop("gamma", 1e-5)), lam=float(lam)),
                optimizer=OptimizerConfig(**(d.pop("optimizer", {}) or {})),
                **d,
            )
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def replace(self, **changes) -> "TrainConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"optimizer.lr": 0.01})``."""
        d = self.to_dict()
        for key, value in changes.items():
            set_path(d, key, value)
        return TrainConfig.from_dict(d)


def set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"unknown config section {p!r} in {dotted!r}")
        node = node[p]
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``"optimizer.lr=0.01"`` -> ``("optimizer.lr", 0.01)``; values are parsed as YAML scalars."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {text!r} must look like key.path=value")
    return key.strip(), _yaml_load(raw)


def load_config(path: str | Path, overrides: list[str] | None = None) -> TrainConfig:
    try:
        data = _yaml_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    cfg = TrainConfig.from_dict(data)
    if overrides:
        cfg = cfg.replace(**dict(parse_override(o) for o in overrides))
    return cfg


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def desk_config(**overrides) -> TrainConfig:
    """Small setup used by the ablation: phantoms downsampled to 16x32x32 model input."""
    cfg = TrainConfig(
        model=ModelConfig(levels=3, channel_schedule=[8, 16, 32], groupnorm_groups=4,
                          input_shape=(16, 32, 32)),
        epochs=40,
    )
    return cfg.replace(**overrides) if overrides else cfg
