"""Scaling-factor computation from weight tensors and streamed activation statistics.

Five methods are supported:

    AbsMax      s = max|x| / int_max
    AbsP        s = per_k(|x|) / int_max
    LSQ         s = 2 <|x|> / sqrt(int_max)
    LSQPlus     s = max(|mu - 3 sigma|, |mu + 3 sigma|) / |int_min|     (weights only)
    BatchQuant  s = mean_c(max_c - min_c) / (int_max - int_min)          (activations only)
"""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .quant import IntRange, QuantParams
from .tensor import AxisGroup, StatsSummary

DEFAULT_K = 99.99
DEFAULT_RESERVOIR = 1 << 20


class CalibrationError(ValueError):
    """Degenerate statistics or an invalid method/target combination."""


class Method(str, enum.Enum):
    ABSMAX = "absmax"
    ABSP = "absp"
    LSQ = "lsq"
    LSQ_PLUS = "lsqplus"
    BATCHQUANT = "batchquant"


WEIGHT_METHODS = frozenset({Method.ABSMAX, Method.ABSP, Method.LSQ, Method.LSQ_PLUS})
ACTIVATION_METHODS = frozenset({Method.ABSMAX, Method.ABSP, Method.LSQ, Method.BATCHQUANT})

_DISPLAY = {
    Method.ABSMAX: "AbsMax",
    Method.ABSP: "AbsP",
    Method.LSQ: "LSQ",
    Method.LSQ_PLUS: "LSQPlus",
    Method.BATCHQUANT: "BatchQuant",
}


@dataclass(frozen=True)
class ScaleMethod:
    kind: Method
    k: float = DEFAULT_K

    def __post_init__(self):
        object.__setattr__(self, "kind", Method(self.kind))
        if not 0.0 <= self.k <= 100.0:
            raise ValueError(f"percentile k={self.k} outside [0, 100]")

    @classmethod
    def parse(cls, text: str, k: float = DEFAULT_K) -> "ScaleMethod":
        key = text.strip().lower().replace("+", "plus").replace("_", "").replace("-", "")
        try:
            return cls(Method(key), k)
        except ValueError:
            raise ValueError(f"unknown scale method {text!r}") from None

    @property
    def name(self) -> str:
        return _DISPLAY[self.kind]

    def check_target(self, weights: bool) -> None:
        if weights and self.kind not in WEIGHT_METHODS:
            raise CalibrationError(f"{self.name} is activation-only")
        if not weights and self.kind not in ACTIVATION_METHODS:
            raise CalibrationError(f"{self.name} is weight-only")


# --- streaming statistics ---------------------------------------------------


@dataclass
class CalibrationStats:
    """Running per-group aggregates plus a seeded uniform reservoir of ``|x|``.

    Updates are sequential per group. ``merge`` combines two partial
    accumulators; min/max/sums are order-insensitive, the reservoir merge is
    deterministic for a fixed merge order.
    """

    group: AxisGroup = AxisGroup()
    capacity: int = DEFAULT_RESERVOIR
    seed: int = 0
    num_groups: Optional[int] = None
    min: Optional[np.ndarray] = None
    max: Optional[np.ndarray] = None
    abs_max: Optional[np.ndarray] = None
    sum_abs: Optional[np.ndarray] = None
    sum: Optional[np.ndarray] = None
    sum_sq: Optional[np.ndarray] = None
    count: Optional[np.ndarray] = None
    reservoir: List[np.ndarray] = field(default_factory=list)
    _rng: Optional[np.random.Generator] = field(default=None, repr=False)

    def __post_init__(self):
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)

    def _init(self, groups: int) -> None:
        self.num_groups = groups
        self.min = np.full(groups, np.inf)
        self.max = np.full(groups, -np.inf)
        self.abs_max = np.zeros(groups)
        self.sum_abs = np.zeros(groups)
        self.sum = np.zeros(groups)
        self.sum_sq = np.zeros(groups)
        self.count = np.zeros(groups, dtype=np.int64)
        self.reservoir = [np.empty(0) for _ in range(groups)]

    @property
    def empty(self) -> bool:
        return self.count is None or not np.any(self.count)

    def update(self, t: np.ndarray) -> "CalibrationStats":
        t = np.asarray(t)
        groups = self.group.num_groups(t.shape)
        if self.num_groups is None:
            self._init(groups)
        elif groups != self.num_groups:
            raise ValueError(f"layout mismatch: {groups} groups, expected {self.num_groups}")
        if t.size == 0:
            return self
        x = self.group.split(t).astype(np.float64)
        a = np.abs(x)
        np.minimum(self.min, x.min(axis=1), out=self.min)
        np.maximum(self.max, x.max(axis=1), out=self.max)
        np.maximum(self.abs_max, a.max(axis=1), out=self.abs_max)
        self.sum_abs += a.sum(axis=1)
        self.sum += x.sum(axis=1)
        self.sum_sq += (x * x).sum(axis=1)
        for gi in range(groups):
            self.reservoir[gi] = self._feed(self.reservoir[gi], int(self.count[gi]), a[gi])
        self.count += x.shape[1]
        return self

    def _feed(self, res: np.ndarray, seen: int, values: np.ndarray) -> np.ndarray:
        # algorithm R, vectorised; later stream elements win on slot collisions
        cap = self.capacity
        if cap <= 0:
            return res
        fill = min(max(cap - len(res), 0), len(values))
        if fill:
            res = np.concatenate([res, values[:fill]])
        rest = values[fill:]
        if rest.size == 0:
            return res
        idx = seen + fill + np.arange(rest.size)
        slots = self._rng.integers(0, idx + 1)
        keep = slots < cap
        slots, vals = slots[keep][::-1], rest[keep][::-1]
        slots, first = np.unique(slots, return_index=True)
        res = res.copy()
        res[slots] = vals[first]
        return res

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        if other.empty:
            return self.copy()
        if self.empty:
            return other.copy()
        if self.num_groups != other.num_groups:
            raise ValueError("cannot merge stats with different group counts")
        out = self.copy()
        np.minimum(out.min, other.min, out=out.min)
        np.maximum(out.max, other.max, out=out.max)
        np.maximum(out.abs_max, other.abs_max, out=out.abs_max)
        out.sum_abs += other.sum_abs
        out.sum += other.sum
        out.sum_sq += other.sum_sq
        for gi in range(out.num_groups):
            a, b = self.reservoir[gi], other.reservoir[gi]
            if len(a) + len(b) <= out.capacity:
                out.reservoir[gi] = np.concatenate([a, b])
            else:
                ka = out._rng.hypergeometric(int(self.count[gi]), int(other.count[gi]), out.capacity)
                ka = min(ka, len(a))
                kb = min(out.capacity - ka, len(b))
                out.reservoir[gi] = np.concatenate([
                    out._rng.choice(a, ka, replace=False),
                    out._rng.choice(b, kb, replace=False),
                ])
        out.count = self.count + other.count
        return out

    def copy(self) -> "CalibrationStats":
        out = CalibrationStats(self.group, self.capacity, self.seed)
        out._rng = copy.deepcopy(self._rng)
        if self.num_groups is not None:
            out.num_groups = self.num_groups
            for name in ("min", "max", "abs_max", "sum_abs", "sum", "sum_sq", "count"):
                setattr(out, name, getattr(self, name).copy())
            out.reservoir = [r.copy() for r in self.reservoir]
        return out

    def _require(self) -> None:
        if self.empty:
            raise CalibrationError("no calibration data")

    @property
    def mean(self) -> np.ndarray:
        self._require()
        return self.sum / self.count

    @property
    def abs_mean(self) -> np.ndarray:
        self._require()
        return self.sum_abs / self.count

    @property
    def std(self) -> np.ndarray:
        self._require()
        mu = self.sum / self.count
        return np.sqrt(np.maximum(self.sum_sq / self.count - mu * mu, 0.0))

    def percentile_abs(self, k: float) -> np.ndarray:
        self._require()
        if not 0.0 <= k <= 100.0:
            raise ValueError(f"percentile k={k} outside [0, 100]")
        if k == 100.0:
            return self.abs_max.copy()
        out = np.empty(self.num_groups)
        for gi, res in enumerate(self.reservoir):
            if res.size == 0:
                raise CalibrationError("empty percentile reservoir")
            out[gi] = np.percentile(res, k, method="linear")
        return out

    def summary(self) -> StatsSummary:
        self._require()
        return StatsSummary(
            min=self.min.copy(), max=self.max.copy(), abs_max=self.abs_max.copy(),
            abs_mean=self.abs_mean, mean=self.mean, std=self.std, count=self.count.copy(),
        )


def update_stats(acc: Optional[CalibrationStats], t: np.ndarray, g: AxisGroup, **kwargs) -> CalibrationStats:
    if acc is None:
        acc = CalibrationStats(g, **kwargs)
    elif acc.group != g:
        raise ValueError("layout mismatch: accumulator grouping differs")
    return acc.update(t)


def weight_stats(w: np.ndarray, g: AxisGroup) -> CalibrationStats:
    """Exact statistics for an in-memory weight tensor (reservoir holds every element)."""
    return CalibrationStats(g, capacity=max(int(np.asarray(w).size), 1)).update(w)


# --- scale formulas ----------------------------------------------------------


def _positive(s: np.ndarray, what: str) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise CalibrationError(f"non-finite {what} scale")
    if np.any(s <= 0):
        raise CalibrationError(f"degenerate all-zero group ({what})")
    return s


def scale_absmax(stats: CalibrationStats, r: IntRange) -> np.ndarray:
    stats._require()
    return _positive(stats.abs_max / r.int_max, "AbsMax")


def scale_absp(stats: CalibrationStats, k: float, r: IntRange) -> np.ndarray:
    return _positive(stats.percentile_abs(k) / r.int_max, "AbsP")


def scale_lsq(stats: CalibrationStats, r: IntRange) -> np.ndarray:
    return _positive(2.0 * stats.abs_mean / math.sqrt(r.int_max), "LSQ")


def scale_lsq_plus(stats: CalibrationStats, r: IntRange) -> np.ndarray:
    if not r.signed:
        raise CalibrationError("LSQ+ is weight-only")
    mu, sigma = stats.mean, stats.std
    top = np.maximum(np.abs(mu - 3 * sigma), np.abs(mu + 3 * sigma))
    return _positive(top / abs(r.int_min), "LSQ+")


def scale_batchquant(stats: CalibrationStats, r: IntRange) -> np.ndarray:
    if r.signed:
        raise CalibrationError("BatchQuant is activation-only")
    stats._require()
    spread = float(np.mean(stats.max - stats.min))
    return _positive(np.array([spread / (r.int_max - r.int_min)]), "BatchQuant")


def compute_quant_params(
    method: ScaleMethod,
    g: AxisGroup,
    stats: CalibrationStats,
    bits: int,
    signed: bool,
) -> QuantParams:
    """Build QuantParams; signed ranges are weights, unsigned ranges are activations.

    Activation scales are always per-tensor. BatchQuant expects per-channel
    activation stats and collapses them to one scale.
    """
    method.check_target(weights=signed)
    r = IntRange(int(bits), bool(signed))
    if not signed and g.per_channel:
        raise CalibrationError("activation scales are always layerwise")
    if method.kind is Method.BATCHQUANT:
        if not stats.group.per_channel:
            raise CalibrationError("BatchQuant needs per-channel activation statistics")
        return QuantParams(r, scale_batchquant(stats, r), AxisGroup.whole())
    if stats.group != g:
        raise CalibrationError("statistics grouping does not match requested grouping")
    if method.kind is Method.ABSMAX:
        s = scale_absmax(stats, r)
    elif method.kind is Method.ABSP:
        s = scale_absp(stats, method.k, r)
    elif method.kind is Method.LSQ:
        s = scale_lsq(stats, r)
    else:
        s = scale_lsq_plus(stats, r)
    return QuantParams(r, s, g)


# --- calibration profile file ----------------------------------------------


def summary_to_dict(s: StatsSummary) -> dict:
    return {
        "min": s.min.tolist(), "max": s.max.tolist(), "abs_max": s.abs_max.tolist(),
        "abs_mean": s.abs_mean.tolist(), "mean": s.mean.tolist(), "std": s.std.tolist(),
        "count": [int(c) for c in s.count],
    }


def scales_to_dict(p: QuantParams) -> dict:
    return {
        "bits": p.range.bits,
        "signed": p.range.signed,
        "per_channel": p.group.per_channel,
        "axis": p.group.axis,
        "scales": [float(v).hex() for v in p.scales],
        "scales_decimal": [repr(float(v)) for v in p.scales],
    }


def params_from_dict(d: dict) -> QuantParams:
    return QuantParams(
        IntRange(int(d["bits"]), bool(d["signed"])),
        np.array([float.fromhex(v) for v in d["scales"]]),
        AxisGroup(bool(d["per_channel"]), int(d["axis"])),
    )


def write_profile(path, profile: dict) -> None:
    Path(path).write_text(json.dumps(profile, indent=1, sort_keys=True) + "\n")


def read_profile(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format") != "ptqflow-profile":
        raise ValueError(f"{path}: not a calibration profile")
    if data.get("version") != 1:
        raise ValueError(f"{path}: unsupported profile version {data.get('version')}")
    return data


def profile_params(profile: dict) -> Dict[str, Dict[str, QuantParams]]:
    """``{"weights": {node: params}, "activations": {site: params}}`` from a loaded profile."""
    out: Dict[str, Dict[str, QuantParams]] = {"weights": {}, "activations": {}}
    for section in out:
        for key, entry in profile.get(section, {}).items():
            if "params" in entry:
                out[section][key] = params_from_dict(entry["params"])
    return out
