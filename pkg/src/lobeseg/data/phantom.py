"""Synthetic chest phantoms with five lobes separated by warped fissure surfaces.

Axis convention: volumes are ``(D, H, W)`` = (z, y, x). Index 0 along D is
superior, index 0 along H is anterior, and the patient's right lung sits at
low W indices (radiological display convention).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigurationError, GenerationError

HU_MIN, HU_MAX = -1000.0, 400.0
HU_LUNG = -850.0
HU_FISSURE = -700.0
HU_TISSUE = 40.0
FISSURE_HALF_WIDTH = 0.75  # voxels along z
MIN_LOBE_FRACTION = 0.01


@dataclass
class PhantomParams:
    shape: tuple[int, int, int] = (32, 64, 64)
    fissure_visibility: float = 0.3
    deformation_amplitude: float = 1.5
    noise_sigma: float = 25.0
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.shape = tuple(int(e) for e in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise ConfigurationError(f"phantom extents must be >= 16, got {self.shape}")
        if not 0.0 <= self.fissure_visibility <= 1.0:
            raise ConfigurationError("fissure_visibility must lie in [0, 1]")
        if self.deformation_amplitude < 0:
            raise ConfigurationError("deformation_amplitude must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["spacing"] = list(self.spacing)
        return d


@dataclass
class VolumeSample:
    """Image in Hounsfield-like units with matching labels and lung mask."""

    image: np.ndarray
    labels: np.ndarray
    lung_mask: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (self.image.shape == self.labels.shape == self.lung_mask.shape):
            from ..errors import DataValidationError
            raise DataValidationError(
                f"image {self.image.shape}, labels {self.labels.shape} and mask "
                f"{self.lung_mask.shape} must share a shape")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.image.shape


def _grid(shape):
    d, h, w = shape
    z = np.linspace(-1.0, 1.0, d)[:, None, None]
    y = np.linspace(-1.0, 1.0, h)[None, :, None]
    x = np.linspace(-1.0, 1.0, w)[None, None, :]
    return z, y, x


def _warp(rng, amp_local, lx, ly):
    fx, fy = rng.uniform(0.6, 1.2, size=2)
    px, py = rng.uniform(0.0, 1.0, size=2)
    return amp_local * np.sin(2 * np.pi * (fx * lx + px)) * np.sin(2 * np.pi * (fy * ly + py))


def _visibility_field(rng, lx, ly):
    field_ = np.zeros(np.broadcast(lx, ly).shape)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        px, py = rng.uniform(0.0, 1.0, size=2)
        field_ = field_ + np.sin(2 * np.pi * (fx * lx + px)) * np.cos(2 * np.pi * (fy * ly + py))
    return field_


def _lung(rng, shape, side, z, y, x):
    """Return (inside mask, local lx, ly, lz, z radius in voxels) for one lung."""
    d, h, w = shape
    cx = side * (0.47 + rng.uniform(-0.04, 0.04))
    cy = rng.uniform(-0.05, 0.05)
    cz = rng.uniform(-0.05, 0.05)
    s = rng.uniform(0.9, 1.05)
    rx, ry, rz = 0.36 * s, 0.72 * s, 0.80 * s
    lx = (x - cx) / rx
    ly = (y - cy) / ry
    lz = (z - cz) / rz
    inside = (lx ** 2 + ly ** 2 + lz ** 2) <= 1.0
    return inside, lx, ly, lz, rz * (d - 1) / 2.0


def generate_phantom(params: PhantomParams) -> VolumeSample:
    """Build one deterministic phantom from ``params``.

    Raises:
        GenerationError: a lobe ended up with fewer than 1% of its lung's voxels.
    """
    shape = params.shape
    rng = np.random.default_rng(params.seed)
    z, y, x = _grid(shape)
    labels = np.zeros(shape, dtype=np.uint8)
    fissure = np.zeros(shape, dtype=bool)

    for side in (-1, 1):  # -1: right lung (low W), +1: left lung
        inside, lx, ly, lz, rz_vox = _lung(rng, shape, side, z, y, x)
        amp = params.deformation_amplitude / max(rz_vox, 1e-6)
        # oblique fissure: rises posteriorly, so the lower lobe is posterior-inferior
        oblique = 0.15 + rng.uniform(-0.08, 0.08) - 0.75 * ly + _warp(rng, amp, lx, ly)
        surfaces = [(oblique, inside)]
        if side < 0:
            # horizontal fissure only matters anterior to the oblique one
            horizontal = -0.05 + rng.uniform(-0.06, 0.06) - 0.1 * ly + _warp(rng, amp, lx, ly)
            lower = inside & (lz >= oblique)
            surfaces.append((horizontal, inside & ~lower))
            mid = inside & ~lower & (lz >= horizontal)
            upper = inside & ~lower & ~mid
            parts = {1: upper, 2: mid, 3: lower}
        else:
            lower = inside & (lz >= oblique)
            parts = {4: inside & ~lower, 5: lower}
        total = int(inside.sum())
        for lab, m in parts.items():
            if m.sum() < MIN_LOBE_FRACTION * max(total, 1):
                raise GenerationError(f"lobe {lab} too small (seed {params.seed})")
            labels[m] = lab

        vis = _visibility_field(rng, lx, ly)
        for surf, region in surfaces:
            near = region & (np.abs(lz - surf) * rz_vox < FISSURE_HALF_WIDTH)
            if params.fissure_visibility <= 0.0 or not near.any():
                continue
            vfield = np.broadcast_to(vis, shape)
            cut = np.quantile(vfield[near], 1.0 - params.fissure_visibility)
            fissure |= near & (vfield >= cut)

    lung = labels > 0
    image = np.full(shape, HU_TISSUE)
    image[lung] = HU_LUNG
    image[fissure & lung] = HU_FISSURE
    if params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=shape)
    image = np.clip(image, HU_MIN, HU_MAX).astype(np.float32)
    return VolumeSample(
        image=image,
        labels=labels,
        lung_mask=lung.astype(np.uint8),
        spacing=params.spacing,
        case_id=f"phantom_{params.seed:05d}",
        meta={"phantom": params.to_dict(), "fissure_voxels": int((fissure & lung).sum())},
    )


def generate_dataset(count: int, shape=(32, 64, 64), visibility: float = 0.3, seed: int = 0,
                     **kwargs) -> list[VolumeSample]:
    """``count`` phantoms with per-case seeds derived from ``seed``; failing seeds are skipped."""
    samples = []
    case_seed = seed * 100003
    while len(samples) < count:
        params = PhantomParams(shape=shape, fissure_visibility=visibility, seed=case_seed, **kwargs)
        case_seed += 1
        try:
            sample = generate_phantom(params)
        except GenerationError:
            continue
        sample.case_id = f"case_{len(samples):03d}"
        samples.append(sample)
    return samples
