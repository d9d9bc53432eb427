"""Dense tensor container and bit-exact binary I/O.

The on-disk layout is fixed so that dumps written anywhere decode
identically everywhere:

    bytes 0-3    magic "CFD1"
    bytes 4-5    version, u16 LE (currently 1)
    byte  6      dtype code, u8 (0 = little-endian float32)
    byte  7      reserved, must be 0
    bytes 8-11   layer index, u32 LE
    bytes 12-27  dims B, C, H, W, u32 LE each
    bytes 28-    B*C*H*W float32 LE values in [b][c][y][x] order

A capture session is a directory of files ``layer_<i>.cfd``.  The same
container stores network weights with the dims reinterpreted as
(out, in, kh, kw); see :mod:`freqprune.micronet`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    IndexOutOfRange,
    InvariantViolation,
    IoFailure,
    NonFiniteData,
    TruncatedPayload,
    UnsupportedVersion,
)

MAGIC = b"CFD1"
VERSION = 1
DTYPE_F32LE = 0

_HEADER = struct.Struct("<4sHBBIIIII")
HEADER_SIZE = _HEADER.size  # 28


@dataclass(frozen=True)
class FeatureMapBatch:
    """Captured activations for one layer: data indexed [b][c][y][x]."""

    layer_index: int
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise InvariantViolation(
                f"batch data must be 4-dimensional, got shape {arr.shape}"
            )
        if min(arr.shape) < 1:
            raise InvariantViolation(f"all dims must be >= 1, got {arr.shape}")
        if self.layer_index < 0:
            raise InvariantViolation(f"layer_index must be >= 0, got {self.layer_index}")
        if not np.isfinite(arr).all():
            raise NonFiniteData("batch contains NaN or Inf")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


def channel_slice(batch: FeatureMapBatch, b: int, c: int) -> np.ndarray:
    """Return a copy of the H x W map for image ``b``, channel ``c``."""
    if not (0 <= b < batch.batch_size):
        raise IndexOutOfRange(f"image index {b} out of range [0, {batch.batch_size})")
    if not (0 <= c < batch.channels):
        raise IndexOutOfRange(f"channel index {c} out of range [0, {batch.channels})")
    return batch.data[b, c].copy()


def save_feature_dump(batch: FeatureMapBatch, path) -> None:
    """Write ``batch`` to ``path``; load_feature_dump reproduces it bit-exactly."""
    if not np.isfinite(batch.data).all():  # arrays are mutable after construction
        raise NonFiniteData("batch contains NaN or Inf")
    b, c, h, w = batch.data.shape
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32LE, 0, batch.layer_index, b, c, h, w)
    payload = np.ascontiguousarray(batch.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_feature_dump(path) -> FeatureMapBatch:
    """Read a dump file, validating the header and payload size."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(raw) < HEADER_SIZE:
        raise TruncatedPayload(
            f"{path}: file is {len(raw)} bytes, header needs {HEADER_SIZE}"
        )
    magic, version, dtype_code, reserved, layer_index, b, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: unsupported version {version} at byte 4")
    if dtype_code != DTYPE_F32LE:
        raise UnsupportedVersion(f"{path}: unsupported dtype code {dtype_code} at byte 6")
    if reserved != 0:
        raise UnsupportedVersion(f"{path}: reserved byte at offset 7 must be 0")

    expected = b * c * h * w * 4
    actual = len(raw) - HEADER_SIZE
    if actual != expected:
        raise TruncatedPayload(
            f"{path}: payload at byte {HEADER_SIZE} is {actual} bytes, "
            f"dims ({b},{c},{h},{w}) require {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(b, c, h, w)
    if not np.isfinite(data).all():
        raise NonFiniteData(f"{path}: payload contains NaN or Inf")
    return FeatureMapBatch(layer_index=layer_index, data=data.copy())
