"""Single-file checkpoint container: JSON manifest followed by checksummed tensor blocks.

Layout::

    LOBESEG-CKPT <version>\\n
    <manifest byte length> <manifest CRC32>\\n
    <manifest JSON>
    <block 0><block 1>...

Every block entry in the manifest carries dtype, shape, offset, byte
length and a CRC32 of its bytes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..errors import CheckpointIncompatibleError, CheckpointIntegrityError, CheckpointVersionError
from ..model import Model, ModelConfig, _layer_specs
from .config import TrainConfig

MAGIC = b"LOBESEG-CKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    train_config: TrainConfig | None = None
    epoch: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer_state: dict[str, np.ndarray] | None = None
    optimizer_step: int = 0

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def _block_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": p.data for k, p in ckpt.model.parameters.items()}
    if ckpt.optimizer_state is not None:
        arrays.update({f"optim/{k}": a for k, a in ckpt.optimizer_state.items()})
    blocks, payload, offset = [], [], 0
    for name, arr in arrays.items():
        raw = _block_bytes(arr)
        blocks.append({
            "name": name,
            "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        payload.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model.config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "has_optimizer_state": ckpt.optimizer_state is not None,
        "optimizer_step": ckpt.optimizer_step,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "history": ckpt.history,
        "blocks": blocks,
    }
    mbytes = json.dumps(manifest).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(f"{len(mbytes)} {zlib.crc32(mbytes)}\n".encode())
        fh.write(mbytes)
        for raw in payload:
            fh.write(raw)
    return path


def _read_line(raw: bytes, start: int) -> tuple[bytes, int]:
    end = raw.find(b"\n", start, start + 64)
    if end < 0:
        raise CheckpointIntegrityError("checkpoint header is truncated or corrupt")
    return raw[start:end], end + 1


def _compare_configs(stored: ModelConfig, expected: ModelConfig) -> None:
    a, b = stored.to_dict(), expected.to_dict()
    for key in a:
        if a[key] != b[key]:
            raise CheckpointIncompatibleError(
                f"model config field {key!r} differs: checkpoint has {a[key]!r}, expected {b[key]!r}",
                parameter=key)


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises:
        CheckpointVersionError: unknown format version.
        CheckpointIntegrityError: corrupt header/manifest, truncated data, or checksum failure.
        CheckpointIncompatibleError: stored tensors or config disagree with ``expected_config``.
    """
    raw = Path(path).read_bytes()
    line, pos = _read_line(raw, 0)
    parts = line.split(b" ")
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    if parts[1] != str(FORMAT_VERSION).encode():
        raise CheckpointVersionError(f"{path}: format version {parts[1].decode(errors='replace')} "
                                     f"is not supported (expected {FORMAT_VERSION})")
    line, pos = _read_line(raw, pos)
    try:
        mlen, mcrc = (int(v) for v in line.split(b" "))
        mbytes = raw[pos:pos + mlen]
        if zlib.crc32(mbytes) != mcrc:
            raise CheckpointIntegrityError(f"{path}: manifest checksum mismatch")
        manifest = json.loads(mbytes.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: manifest is corrupt") from exc
    base = pos + mlen
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: manifest version {manifest.get('format_version')}")

    arrays = {}
    for blk in manifest["blocks"]:
        start = base + blk["offset"]
        chunk = raw[start:start + blk["nbytes"]]
        if len(chunk) != blk["nbytes"]:
            raise CheckpointIntegrityError(f"{path}: block {blk['name']} is truncated")
        if zlib.crc32(chunk) != blk["crc32"]:
            raise CheckpointIntegrityError(f"{path}: checksum mismatch in block {blk['name']}")
        arrays[blk["name"]] = np.frombuffer(chunk, dtype=np.dtype(blk["dtype"])).reshape(blk["shape"]).copy()
    expected_len = base + sum(b["nbytes"] for b in manifest["blocks"])
    if len(raw) != expected_len:
        raise CheckpointIntegrityError(f"{path}: file has {len(raw) - expected_len:+d} unexpected bytes")

    config = ModelConfig.from_dict(manifest["model_config"])
    if expected_config is not None:
        _compare_configs(config, expected_config)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    template = expected_parameter_shapes(config)
    for name, shape in template.items():
        if name not in params:
            raise CheckpointIncompatibleError(f"parameter {name} missing from checkpoint", parameter=name)
        if params[name].shape != shape:
            raise CheckpointIncompatibleError(
                f"parameter {name} has shape {params[name].shape}, config implies {shape}", parameter=name)
    extra = set(params) - set(template)
    if extra:
        name = sorted(extra)[0]
        raise CheckpointIncompatibleError(f"unexpected parameter {name} in checkpoint", parameter=name)
    model = Model(config, {name: Tensor(params[name], requires_grad=True, name=name)
                           for name in template})
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    tc = manifest.get("train_config")
    return Checkpoint(
        model=model,
        train_config=TrainConfig.from_dict(tc) if tc else None,
        epoch=manifest["epoch"],
        seed=manifest["seed"],
        history=manifest["history"],
        optimizer_state=optim if manifest["has_optimizer_state"] else None,
        optimizer_step=manifest.get("optimizer_step", 0),
    )


def expected_parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes implied by ``config`` without allocating weights (used in diagnostics)."""
    shapes = {}
    for prefix, kind, cin, cout, k in _layer_specs(config):
        shapes[f"{prefix}.weight"] = (cin, cout, k, k, k) if kind == "up" else (cout, cin, k, k, k)
        shapes[f"{prefix}.bias"] = (cout,)
        if kind == "head":
            continue
        if config.use_groupnorm:
            shapes[f"{prefix}.gn.gamma"] = (cout,)
            shapes[f"{prefix}.gn.beta"] = (cout,)
        shapes[f"{prefix}.slope"] = (cout,)
    return shapes
