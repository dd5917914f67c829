"""FMAP1 binary container for feature-map stacks and token sequences.

Fixed little-endian layout:

    magic    5 bytes  b"FMAP1"
    version  u16      currently 1
    M        u32      number of maps
    H, W, C  u32 each map extents
    indices  M x u32  encoder block index per map
    dtype    u8       0 = float32 (the only defined tag)
    payload  M*H*W*C little-endian float32, block-major, row-major spatial,
             channel fastest

Token sequences reuse the same container with M=1, H=1, W=length, C=width.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FeatureFileError
from .fusion import FeatureStack

MAGIC = b"FMAP1"
VERSION = 1
DTYPE_FLOAT32 = 0

_HEAD = struct.Struct("<5sHIIII")


def write_feature_file(path: str | Path, stack: FeatureStack) -> None:
    m, h, w, c = stack.maps.shape
    payload = np.ascontiguousarray(stack.maps, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, m, h, w, c))
        f.write(struct.pack(f"<{m}I", *stack.block_indices))
        f.write(struct.pack("<B", DTYPE_FLOAT32))
        f.write(payload.tobytes())


def read_feature_file(path: str | Path) -> FeatureStack:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEAD.size:
        raise FeatureFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, m, h, w, c = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    offset = _HEAD.size
    idx_bytes = 4 * m
    if len(raw) < offset + idx_bytes + 1:
        raise FeatureFileError(f"{path}: truncated block-index table")
    indices = list(struct.unpack_from(f"<{m}I", raw, offset))
    offset += idx_bytes
    (dtype_tag,) = struct.unpack_from("<B", raw, offset)
    offset += 1
    if dtype_tag != DTYPE_FLOAT32:
        raise FeatureFileError(f"{path}: unknown dtype tag {dtype_tag}")
    expected = m * h * w * c * 4
    payload = raw[offset:]
    if len(payload) != expected:
        raise FeatureFileError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    maps = np.frombuffer(payload, dtype="<f4").reshape(m, h, w, c)
    return FeatureStack(maps=maps.copy(), block_indices=indices)


def write_token_file(path: str | Path, tokens: np.ndarray) -> None:
    """Store an L x width token matrix as a single-map FMAP1 file."""
    length, width = tokens.shape
    stack = FeatureStack(
        maps=tokens.reshape(1, 1, length, width), block_indices=[0]
    )
    write_feature_file(path, stack)
