"""Export orchestration: block validation, FMAP1 writing, manifests.

The binary container replicates the consumer's documented FMAP1 layout:
little-endian, magic ``FMAP1``, u16 version 1, u32 map count and extents,
one u32 block index per map, a u8 dtype tag (0 = float32), then the
block-major / row-major / channel-fastest float32 payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .clipvit import ExporterError, load_model, preprocess, tap_features

_HEAD = struct.Struct("<5sHIIII")
MAGIC = b"FMAP1"
VERSION = 1
DTYPE_FLOAT32 = 0


def validate_blocks(block_indices: list[int], depth: int) -> None:
    """Block taps must be the even-sampling schedule ending at the last block."""
    if not block_indices:
        raise ExporterError("at least one block index is required")
    if sorted(block_indices) != block_indices or len(set(block_indices)) != len(block_indices):
        raise ExporterError(f"block indices must be strictly ascending, got {block_indices}")
    step = block_indices[0]
    expected = list(range(step, depth + 1, step))
    if block_indices != expected:
        raise ExporterError(
            f"block indices must be evenly spaced and end at the encoder depth "
            f"{depth} (e.g. {expected}), got {block_indices}"
        )


def write_fmap(path: str | Path, maps: np.ndarray, block_indices: list[int]) -> bytes:
    """Write the container and return the payload bytes that went into it."""
    m, h, w, c = maps.shape
    payload = np.ascontiguousarray(maps, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, m, h, w, c))
        f.write(struct.pack(f"<{m}I", *block_indices))
        f.write(struct.pack("<B", DTYPE_FLOAT32))
        f.write(payload)
    return payload


@dataclass
class ExportManifest:
    image: str
    resolution: list[int]
    block_indices: list[int]
    output: str
    payload_sha256: str
    weights: str
    penultimate_final: bool

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def manifest_path_for(out_path: str | Path) -> Path:
    out = Path(out_path)
    return out.with_name(out.name + ".manifest.json")


def export_image(
    image: str | Path,
    block_indices: list[int],
    out: str | Path,
    weights: str | Path | None = None,
    random_init_seed: int | None = None,
    penultimate_final: bool = False,
    arch: dict | None = None,
) -> ExportManifest:
    """Run the vision transformer on one image and write per-block features."""
    model = load_model(weights=weights, random_init_seed=random_init_seed, arch=arch)
    depth = model.config.num_hidden_layers
    validate_blocks(block_indices, depth)
    size = model.config.image_size
    pixels = preprocess(image, size)
    maps = tap_features(model, pixels, block_indices, penultimate_final)
    payload = write_fmap(out, maps, block_indices)
    manifest = ExportManifest(
        image=str(image),
        resolution=[size, size],
        block_indices=list(block_indices),
        output=str(out),
        payload_sha256=hashlib.sha256(payload).hexdigest(),
        weights=str(weights) if weights is not None else f"random-init(seed={random_init_seed})",
        penultimate_final=penultimate_final,
    )
    manifest.write(manifest_path_for(out))
    return manifest
