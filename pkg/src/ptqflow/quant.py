"""Uniform symmetric quantization: integer ranges, clamp/round, dequantize, MSE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import AxisGroup


@dataclass(frozen=True)
class IntRange:
    bits: int
    signed: bool

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 1 <= self.bits <= 16:
            raise ValueError(f"word-length {self.bits} outside 1..16")

    @property
    def int_min(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def int_max(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1


def make_int_range(bits: int, signed: bool) -> IntRange:
    return IntRange(int(bits), bool(signed))


@dataclass(frozen=True)
class QuantParams:
    """Everything needed to fake-quantize one tensor: range, per-group scales, grouping."""

    range: IntRange
    scales: np.ndarray
    group: AxisGroup = AxisGroup()

    def __post_init__(self):
        scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if scales.ndim != 1 or scales.size == 0:
            raise ValueError("scales must be a non-empty vector")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("every scale must be positive and finite")
        if not self.group.per_channel and scales.size != 1:
            raise ValueError("whole-tensor grouping takes exactly one scale")
        object.__setattr__(self, "scales", scales)


def quantize(x: float, s: float, r: IntRange) -> int:
    """Map a real value onto the integer grid: round(clamp(x / s)), ties to even."""
    if not (s > 0 and math.isfinite(s)):
        raise ValueError(f"scale must be positive and finite, got {s}")
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    q = min(max(x / s, r.int_min), r.int_max)
    return int(round(q))  # python round() is ties-to-even


def dequantize(q: int, s: float) -> float:
    return q * s


def quantize_array(x: np.ndarray, scales: np.ndarray, r: IntRange) -> np.ndarray:
    """Vectorised ``quantize``; ``scales`` must already broadcast against ``x``."""
    return np.rint(np.clip(np.asarray(x, dtype=np.float64) / scales, r.int_min, r.int_max))


def fake_quantize_tensor(t: np.ndarray, p: QuantParams) -> np.ndarray:
    t = np.asarray(t)
    groups = p.group.num_groups(t.shape)
    if groups != p.scales.size:
        raise ValueError(f"{p.scales.size} scales for {groups} groups of shape {t.shape}")
    s = p.scales.reshape(p.group.broadcast_shape(t.ndim))
    return quantize_array(t, s, p.range) * s


def clamp_counts(t: np.ndarray, p: QuantParams) -> tuple:
    """Number of elements clamped at the low and at the high end of the range."""
    s = p.scales.reshape(p.group.broadcast_shape(np.ndim(t)))
    q = np.asarray(t, dtype=np.float64) / s
    return int(np.count_nonzero(q < p.range.int_min)), int(np.count_nonzero(q > p.range.int_max))


def quant_mse(fp, q) -> float:
    fp = np.asarray(fp, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if fp.shape != q.shape:
        raise ValueError(f"shape mismatch {fp.shape} vs {q.shape}")
    if fp.size == 0:
        raise ValueError("empty input")
    return float(np.mean((fp - q) ** 2))
