"""Raw volume files with a small text header, and case directories built from them.

A volume file is::

    LOBESEG-VOLUME 1
    dtype: f32
    shape: 32 64 64
    spacing: 1.0 1.0 1.0
    role: image
    end
    <little-endian payload, x fastest, product(shape) * itemsize bytes>
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import (
    UnsupportedFormatError,
    VolumeHeaderError,
    VolumeMismatchError,
    VolumeTruncatedError,
)
from .phantom import VolumeSample

MAGIC = "LOBESEG-VOLUME"
FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
ROLE_DTYPES = {"image": "f32", "labels": "u8", "mask": "u8"}
CASE_FILES = {"image": "image.vol", "labels": "labels.vol", "mask": "mask.vol"}
CASE_MANIFEST = "case.json"
_MAX_HEADER = 4096


@dataclass
class Volume:
    data: np.ndarray
    role: str
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise UnsupportedFormatError(f"cannot store dtype {arr.dtype}")


def write_volume(data: np.ndarray, path: str | Path, role: str,
                 spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> None:
    data = np.asarray(data)
    if role not in ROLE_DTYPES:
        raise UnsupportedFormatError(f"unknown role {role!r}")
    if data.ndim != 3:
        raise VolumeMismatchError(f"volumes are (D, H, W); got shape {data.shape}")
    tag = _dtype_tag(data)
    if tag != ROLE_DTYPES[role]:
        raise VolumeMismatchError(f"role {role} requires dtype {ROLE_DTYPES[role]}, got {tag}")
    header = (
        f"{MAGIC} {FORMAT_VERSION}\n"
        f"dtype: {tag}\n"
        f"shape: {' '.join(str(e) for e in data.shape)}\n"
        f"spacing: {' '.join(repr(float(s)) for s in spacing)}\n"
        f"role: {role}\n"
        "end\n"
    )
    payload = np.ascontiguousarray(data, dtype=DTYPES[tag]).tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def _parse_header(raw: bytes, path) -> tuple[dict, int]:
    end = raw.find(b"\nend\n", 0, _MAX_HEADER)
    if end < 0:
        raise VolumeHeaderError(f"{path}: no header terminator")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise VolumeHeaderError(f"{path}: header is not ASCII") from exc
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise VolumeHeaderError(f"{path}: bad magic line {lines[0]!r}")
    if first[1] != str(FORMAT_VERSION):
        raise UnsupportedFormatError(f"{path}: unsupported format version {first[1]}")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition(":")
        if not sep:
            raise VolumeHeaderError(f"{path}: malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    missing = {"dtype", "shape", "spacing", "role"} - set(fields)
    if missing:
        raise VolumeHeaderError(f"{path}: header missing {sorted(missing)}")
    return fields, end + len(b"\nend\n")


def read_volume(path: str | Path) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    fields, offset = _parse_header(raw, path)
    tag = fields["dtype"]
    if tag not in DTYPES:
        raise UnsupportedFormatError(f"{path}: unknown dtype tag {tag!r}")
    role = fields["role"]
    if role not in ROLE_DTYPES:
        raise UnsupportedFormatError(f"{path}: unknown role {role!r}")
    if ROLE_DTYPES[role] != tag:
        raise VolumeMismatchError(f"{path}: role {role} stored with dtype {tag}")
    try:
        shape = tuple(int(e) for e in fields["shape"].split())
        spacing = tuple(float(s) for s in fields["spacing"].split())
    except ValueError as exc:
        raise VolumeHeaderError(f"{path}: non-numeric shape or spacing") from exc
    if len(shape) != 3 or min(shape) < 1 or len(spacing) != 3:
        raise VolumeHeaderError(f"{path}: shape/spacing must have three positive entries")
    dt = DTYPES[tag]
    expected = int(np.prod(shape)) * dt.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise VolumeTruncatedError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return Volume(data=data, role=role, spacing=spacing)


def write_case(sample: VolumeSample, case_dir: str | Path) -> Path:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_volume(sample.image.astype(np.float32, copy=False), case_dir / CASE_FILES["image"], "image", sample.spacing)
    write_volume(sample.labels.astype(np.uint8, copy=False), case_dir / CASE_FILES["labels"], "labels", sample.spacing)
    write_volume(sample.lung_mask.astype(np.uint8, copy=False), case_dir / CASE_FILES["mask"], "mask", sample.spacing)
    manifest = {
        "case_id": sample.case_id or case_dir.name,
        "shape": list(sample.shape),
        "spacing": list(sample.spacing),
        "files": CASE_FILES,
        "meta": sample.meta,
    }
    (case_dir / CASE_MANIFEST).write_text(json.dumps(manifest, indent=2))
    return case_dir


def read_case(case_dir: str | Path) -> VolumeSample:
    case_dir = Path(case_dir)
    try:
        manifest = json.loads((case_dir / CASE_MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeHeaderError(f"{case_dir}: unreadable case manifest") from exc
    files = manifest.get("files", CASE_FILES)
    vols = {role: read_volume(case_dir / files[role]) for role in ("image", "labels", "mask")}
    shapes = {role: v.data.shape for role, v in vols.items()}
    if len(set(shapes.values())) != 1 or tuple(manifest.get("shape", shapes["image"])) != shapes["image"]:
        raise VolumeMismatchError(f"{case_dir}: shapes disagree {shapes}")
    return VolumeSample(
        image=vols["image"].data,
        labels=vols["labels"].data,
        lung_mask=vols["mask"].data,
        spacing=vols["image"].spacing,
        case_id=manifest.get("case_id", case_dir.name),
        meta=manifest.get("meta", {}),
    )


def list_cases(dataset_dir: str | Path) -> list[Path]:
    """Case directories under ``dataset_dir`` in sorted order."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise VolumeHeaderError(f"{root}: not a dataset directory")
    return sorted(p for p in root.iterdir() if (p / CASE_MANIFEST).is_file())


def read_dataset(dataset_dir: str | Path) -> list[VolumeSample]:
    return [read_case(p) for p in list_cases(dataset_dir)]
