"""Coordinate-guided V-Net assembled from autodiff primitives."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tensor, concat_channels, conv3d, conv_transpose3d, dropout, group_norm, prelu, sigmoid
from .autodiff import softmax_channels
from .errors import ConfigurationError, ContractError

NUM_CLASSES = 6
PRELU_INIT = 0.25
AXIS_NAMES = ("D", "H", "W")


@dataclass
class ModelConfig:
    """Architecture of one V-Net variant.

    ``input_shape`` is ``(D, H, W)``. When ``channel_schedule`` is omitted
    it doubles from ``base_channels`` at every level.
    """

    levels: int = 4
    base_channels: int = 16
    channel_schedule: list[int] | None = None
    kernel_size: int = 3
    use_coordconv: bool = True
    use_groupnorm: bool = True
    groupnorm_groups: int = 8
    groupnorm_eps: float = 1e-5
    dropout_p: float = 0.5
    boundary_head: bool = True
    num_classes: int = NUM_CLASSES
    input_shape: tuple[int, int, int] = (32, 64, 64)
    convs_per_stage: int = 2

    def __post_init__(self) -> None:
        if self.channel_schedule is None:
            self.channel_schedule = [self.base_channels * 2 ** i for i in range(self.levels)]
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        self.input_shape = tuple(int(e) for e in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if self.num_classes != NUM_CLASSES:
            raise ConfigurationError(f"num_classes must be {NUM_CLASSES} (5 lobes + background)")
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if len(self.channel_schedule) != self.levels:
            raise ConfigurationError(
                f"channel_schedule has {len(self.channel_schedule)} entries for {self.levels} levels")
        if any(c <= 0 for c in self.channel_schedule):
            raise ConfigurationError("channel_schedule entries must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be a positive odd integer")
        if self.use_groupnorm:
            bad = [c for c in self.channel_schedule if c % self.groupnorm_groups]
            if self.groupnorm_groups < 1 or bad:
                raise ConfigurationError(
                    f"groupnorm_groups={self.groupnorm_groups} does not divide channels {bad}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must lie in [0, 1)")
        if self.convs_per_stage < 1:
            raise ConfigurationError("convs_per_stage must be >= 1")
        if len(self.input_shape) != 3:
            raise ConfigurationError("input_shape must be (D, H, W)")
        check_spatial(self.input_shape, self.levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def check_spatial(shape: tuple[int, ...], levels: int) -> None:
    factor = 2 ** (levels - 1)
    for name, e in zip(AXIS_NAMES, shape):
        if e < 1 or e % factor:
            raise ConfigurationError(
                f"spatial axis {name} has extent {e}, not divisible by 2^(levels-1) = {factor}")


@dataclass
class Model:
    config: ModelConfig
    parameters: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.parameters.items())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.parameters.values())).dtype

    def __call__(self, volume: Tensor, training: bool = False, seed: int = 0):
        return forward(self, volume, training=training, seed=seed)


# -- coordinates ---------------------------------------------------------

def _axis_coords(extent: int) -> np.ndarray:
    if extent == 1:
        return np.zeros(1)
    return np.array([-1.0 + 2.0 * i / (extent - 1) for i in range(extent)])


def make_coord_channels(spatial_shape: tuple[int, int, int], dtype=np.float32) -> Tensor:
    """Constant ``(1, 3, D, H, W)`` tensor of normalized x, y, z coordinates.

    Channel 0 varies along W (x), channel 1 along H (y), channel 2 along D (z);
    each spans [-1, 1] linearly, and a length-1 axis maps to 0.
    """
    d, h, w = (int(e) for e in spatial_shape)
    if min(d, h, w) < 1:
        raise ContractError(f"invalid spatial shape {spatial_shape}")
    out = np.empty((1, 3, d, h, w), dtype=dtype)
    out[0, 0] = _axis_coords(w)[None, None, :]
    out[0, 1] = _axis_coords(h)[None, :, None]
    out[0, 2] = _axis_coords(d)[:, None, None]
    return Tensor(out)


def add_coord_channels(features: Tensor) -> Tensor:
    n = features.shape[0]
    coords = make_coord_channels(features.shape[2:], dtype=features.dtype)
    if n > 1:
        coords = Tensor(np.repeat(coords.data, n, axis=0))
    return concat_channels(features, coords)


# -- parameter construction ----------------------------------------------

def _layer_specs(cfg: ModelConfig) -> list[tuple[str, str, int, int, int]]:
    """(prefix, kind, in_channels, out_channels, kernel) for every conv layer, in build order."""
    ch = cfg.channel_schedule
    k = cfg.kernel_size
    specs = []
    for lvl in range(cfg.levels):
        cin = 1 if lvl == 0 else ch[lvl]
        for j in range(cfg.convs_per_stage):
            specs.append((f"enc{lvl}.conv{j}", "conv", cin if j == 0 else ch[lvl], ch[lvl], k))
        if lvl < cfg.levels - 1:
            specs.append((f"enc{lvl}.down", "conv", ch[lvl], ch[lvl + 1], 3))
    for lvl in reversed(range(cfg.levels - 1)):
        specs.append((f"dec{lvl}.up", "up", ch[lvl + 1], ch[lvl], 2))
        cin = 2 * ch[lvl] + (3 if cfg.use_coordconv and lvl == 0 else 0)
        for j in range(cfg.convs_per_stage):
            specs.append((f"dec{lvl}.conv{j}", "conv", cin if j == 0 else ch[lvl], ch[lvl], k))
    specs.append(("head", "head", ch[0], cfg.num_classes, 1))
    if cfg.boundary_head:
        specs.append(("boundary", "head", ch[0], 1, 1))
    return specs


def _unit_draw(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    # one stream per (seed, name): toggling a technique leaves unrelated layers' draws alone
    return np.random.default_rng([seed, zlib.crc32(name.encode())]).uniform(-1.0, 1.0, size=shape)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialize all parameters for ``config``.

    Conv weights use a fan-in scaled uniform draw matched to PReLU's initial
    slope; biases and group-norm shifts start at zero, scales at one. Each
    weight has its own random stream, and the CoordConv input columns have
    theirs, so ablation variants start from the same draws wherever their
    layers coincide.
    """
    config.validate()
    params: dict[str, Tensor] = {}
    gain = np.sqrt(6.0 / (1.0 + PRELU_INIT ** 2))
    for prefix, kind, cin, cout, k in _layer_specs(config):
        name = f"{prefix}.weight"
        if kind == "up":
            unit = _unit_draw(seed, name, (cin, cout, k, k, k))
            fan_in = cin  # kernel == stride: each output voxel sees one input voxel
        else:
            coord = 3 if config.use_coordconv and prefix == "dec0.conv0" else 0
            unit = _unit_draw(seed, name, (cout, cin - coord, k, k, k))
            if coord:
                unit = np.concatenate([unit, _unit_draw(seed, name + ".coord", (cout, coord, k, k, k))], axis=1)
            fan_in = cin * k ** 3
        bound = gain / np.sqrt(fan_in)
        params[name] = Tensor((unit * bound).astype(dtype), requires_grad=True)
        params[f"{prefix}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        if kind == "head":
            continue
        if config.use_groupnorm:
            params[f"{prefix}.gn.gamma"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
            params[f"{prefix}.gn.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        params[f"{prefix}.slope"] = Tensor(np.full(cout, PRELU_INIT, dtype=dtype), requires_grad=True)
    for name, t in params.items():
        t.name = name
    return Model(config, params)


# -- forward -------------------------------------------------------------

def _activate(model: Model, prefix: str, x: Tensor) -> Tensor:
    p = model.parameters
    cfg = model.config
    if cfg.use_groupnorm:
        x = group_norm(x, cfg.groupnorm_groups, p[f"{prefix}.gn.gamma"], p[f"{prefix}.gn.beta"],
                       cfg.groupnorm_eps)
    return prelu(x, p[f"{prefix}.slope"])


def _conv_block(model: Model, prefix: str, x: Tensor) -> Tensor:
    p = model.parameters
    pad = (model.config.kernel_size - 1) // 2
    x = conv3d(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], stride=1, padding=pad)
    return _activate(model, prefix, x)


def coordconv_block(model: Model, prefix: str, features: Tensor) -> Tensor:
    """Append x/y/z coordinate channels, then run a standard conv block."""
    return _conv_block(model, prefix, add_coord_channels(features))


def _stage(model: Model, stage: str, x: Tensor, coord: bool = False) -> Tensor:
    for j in range(model.config.convs_per_stage):
        prefix = f"{stage}.conv{j}"
        x = coordconv_block(model, prefix, x) if coord and j == 0 else _conv_block(model, prefix, x)
    return x


def forward(model: Model, volume: Tensor, training: bool = False, seed: int = 0):
    """Run the network on ``(N, 1, D, H, W)`` input.

    Returns ``(lobe_probs, boundary_probs)``; the latter is None without a
    boundary head. ``seed`` only affects dropout masks while training.
    """
    cfg = model.config
    if volume.ndim != 5 or volume.shape[1] != 1:
        raise ContractError(f"expected (N, 1, D, H, W) input, got {volume.shape}")
    check_spatial(volume.shape[2:], cfg.levels)
    p = model.parameters
    top = cfg.levels - 1
    drop_seeds = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64)
    drop_levels = {top: 0, top - 1: 1}

    def maybe_drop(x: Tensor, slot: int) -> Tensor:
        return dropout(x, cfg.dropout_p, training, int(drop_seeds[slot]))

    x = volume
    skips = []
    for lvl in range(cfg.levels):
        x = _stage(model, f"enc{lvl}", x)
        if lvl in drop_levels:
            x = maybe_drop(x, drop_levels[lvl])
        if lvl < top:
            skips.append(x)
            x = conv3d(x, p[f"enc{lvl}.down.weight"], p[f"enc{lvl}.down.bias"], stride=2, padding=1)
            x = _activate(model, f"enc{lvl}.down", x)
    for lvl in reversed(range(top)):
        x = conv_transpose3d(x, p[f"dec{lvl}.up.weight"], p[f"dec{lvl}.up.bias"], stride=2)
        x = _activate(model, f"dec{lvl}.up", x)
        x = concat_channels(x, skips[lvl])
        x = _stage(model, f"dec{lvl}", x, coord=cfg.use_coordconv and lvl == 0)
        if lvl == top - 1:
            x = maybe_drop(x, 2)
    logits = conv3d(x, p["head.weight"], p["head.bias"])
    lobe_probs = softmax_channels(logits)
    boundary_probs = None
    if cfg.boundary_head:
        boundary_probs = sigmoid(conv3d(x, p["boundary.weight"], p["boundary.bias"]))
    return lobe_probs, boundary_probs
