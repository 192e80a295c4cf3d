"""Dense tensor helpers: grouped reductions, absolute percentiles, binary file format.

Tensors are plain ``numpy.ndarray`` objects. On disk every payload is
little-endian float32; in memory, stored tensors are float32 and kernels
promote to float64.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

MAGIC = b"PTQTNSR\x00"
VERSION = 1

PathLike = Union[str, Path]


class TensorFormatError(ValueError):
    """Raised for malformed, truncated or unsupported tensor files."""


class Layout(enum.IntEnum):
    NCHW = 0
    OIHW = 1
    VECTOR = 2
    MATRIX = 3


def default_layout(arr: np.ndarray) -> Layout:
    if arr.ndim == 1:
        return Layout.VECTOR
    if arr.ndim == 2:
        return Layout.MATRIX
    return Layout.NCHW


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Convert ``data`` to an array and reject empty or non-finite content."""
    arr = np.asarray(data, dtype=dtype)
    if arr.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class AxisGroup:
    """Statistics granularity: the whole tensor, or one group per channel along ``axis``."""

    per_channel: bool = False
    axis: int = 0

    @classmethod
    def whole(cls) -> "AxisGroup":
        return cls(False, 0)

    @classmethod
    def channel(cls, axis: int = 0) -> "AxisGroup":
        return cls(True, axis)

    def num_groups(self, shape: Tuple[int, ...]) -> int:
        if not self.per_channel:
            return 1
        if self.axis >= len(shape):
            raise ValueError(f"channel axis {self.axis} out of range for rank {len(shape)}")
        return shape[self.axis]

    def split(self, t: np.ndarray) -> np.ndarray:
        """Return a 2-D view ``(groups, elements_per_group)``."""
        if not self.per_channel:
            return t.reshape(1, -1)
        if self.axis >= t.ndim:
            raise ValueError(f"channel axis {self.axis} out of range for rank {t.ndim}")
        return np.moveaxis(t, self.axis, 0).reshape(t.shape[self.axis], -1)

    def broadcast_shape(self, ndim: int) -> Tuple[int, ...]:
        """Shape that lets a per-group vector broadcast against a tensor of rank ``ndim``."""
        if not self.per_channel:
            return (1,) * ndim
        shape = [1] * ndim
        shape[self.axis] = -1
        return tuple(shape)


@dataclass(frozen=True)
class StatsSummary:
    min: np.ndarray
    max: np.ndarray
    abs_max: np.ndarray
    abs_mean: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray

    def __len__(self) -> int:
        return len(self.min)


def reduce_stats(t, g: AxisGroup = AxisGroup()) -> StatsSummary:
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("empty input")
    x = g.split(t).astype(np.float64)
    a = np.abs(x)
    n = x.shape[1]
    return StatsSummary(
        min=x.min(axis=1),
        max=x.max(axis=1),
        abs_max=a.max(axis=1),
        abs_mean=a.mean(axis=1),
        mean=x.mean(axis=1),
        std=x.std(axis=1),
        count=np.full(x.shape[0], n, dtype=np.int64),
    )


def percentile_abs(t, k: float, g: AxisGroup = AxisGroup()) -> np.ndarray:
    """Per-group k-th percentile of ``|t|`` with linear interpolation between order statistics."""
    if not 0.0 <= k <= 100.0:
        raise ValueError(f"percentile k={k} outside [0, 100]")
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("empty input")
    a = np.abs(g.split(t).astype(np.float64))
    if k == 100.0:
        return a.max(axis=1)
    return np.percentile(a, k, axis=1, method="linear")


# --- binary file format ---------------------------------------------------
#
# header:    magic[8] | version u16 | count u32
# directory: count x (name_len u16 | name utf-8 | offset u64)
# entry:     rank u16 | layout u16 | shape u32[rank] | float32 payload

_HEAD = struct.Struct("<8sHI")
_ENTRY = struct.Struct("<HH")


def save_tensors(
    path: PathLike,
    tensors: Mapping[str, np.ndarray],
    layouts: Optional[Mapping[str, Layout]] = None,
) -> None:
    layouts = layouts or {}
    names = list(tensors)
    encoded = [n.encode("utf-8") for n in names]
    dir_size = sum(2 + len(e) + 8 for e in encoded)
    offset = _HEAD.size + dir_size

    blobs = []
    offsets = []
    for name in names:
        arr = np.array(tensors[name], dtype="<f4", order="C")
        if arr.ndim > 0xFFFF:
            raise ValueError(f"rank too large for {name}")
        layout = layouts.get(name, default_layout(arr))
        blob = _ENTRY.pack(arr.ndim, int(layout))
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
        offsets.append(offset)
        offset += len(blob)
        blobs.append(blob)

    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(names)))
        for e, off in zip(encoded, offsets):
            fh.write(struct.pack("<H", len(e)) + e + struct.pack("<Q", off))
        for blob in blobs:
            fh.write(blob)


def _take(buf: bytes, pos: int, n: int) -> bytes:
    if pos + n > len(buf):
        raise TensorFormatError("truncated tensor file")
    return buf[pos:pos + n]


def load_tensors_with_layouts(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Layout]]:
    buf = Path(path).read_bytes()
    magic, version, count = _HEAD.unpack(_take(buf, 0, _HEAD.size))
    if magic != MAGIC:
        raise TensorFormatError("bad magic: not a tensor file")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")

    pos = _HEAD.size
    directory = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _take(buf, pos, 2))
        pos += 2
        name = _take(buf, pos, nlen).decode("utf-8")
        pos += nlen
        (off,) = struct.unpack("<Q", _take(buf, pos, 8))
        pos += 8
        directory.append((name, off))

    tensors: Dict[str, np.ndarray] = {}
    layouts: Dict[str, Layout] = {}
    for name, off in directory:
        rank, layout = _ENTRY.unpack(_take(buf, off, _ENTRY.size))
        p = off + _ENTRY.size
        shape = struct.unpack(f"<{rank}I", _take(buf, p, 4 * rank))
        p += 4 * rank
        n = int(np.prod(shape, dtype=np.int64))
        payload = _take(buf, p, 4 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        try:
            layouts[name] = Layout(layout)
        except ValueError:
            raise TensorFormatError(f"unknown layout tag {layout} for {name}") from None
    return tensors, layouts


def load_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    return load_tensors_with_layouts(path)[0]
