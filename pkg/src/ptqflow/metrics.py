"""Accuracy, cost models, Pareto fronts and sweep-report emission."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .graph import ModelGraph, QuantPlan

FP32_PJ_PER_MAC = 75.0
INT8_ENERGY_RATIO = 27.0

# memory-access energy per bit, picojoules
MEMORY_PJ_PER_BIT = {"DDR3": 70.0, "LPDDR3": 21.0, "DDR4": 15.0, "SRAM": 0.055}


def top1_accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logits rows vs {labels.shape[0]} labels")
    # np.argmax returns the lowest index among ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def acc_diff(accuracies: Sequence[float], groups: Sequence) -> np.ndarray:
    """Each accuracy minus the mean accuracy of its word-length group."""
    acc = np.asarray(accuracies, dtype=np.float64)
    keys = list(groups)
    if len(keys) != len(acc):
        raise ValueError("one group key per accuracy required")
    if len(acc) == 0:
        raise ValueError("empty group")
    out = np.empty_like(acc)
    for key in dict.fromkeys(keys):
        idx = np.array([i for i, k in enumerate(keys) if k == key])
        vals = acc[idx]
        out[idx] = vals - math.fsum(vals) / len(vals)
    return out


# --- costs ------------------------------------------------------------------


def weight_elements(g: ModelGraph) -> int:
    return sum(int(g.tensors[n.weight].size) for n in g.nodes if n.kind in ("Conv2D", "FullyConnected"))


def activation_elements(g: ModelGraph) -> int:
    """Per-frame activation count, once per producing node (Quant and Output re-label, not produce)."""
    shapes = g.infer_shapes()
    return sum(int(np.prod(shapes[n.id])) for n in g.nodes if n.kind not in ("Quant", "Output"))


def memory_footprint(g: ModelGraph, wl_w: int, wl_a: int) -> float:
    return (weight_elements(g) * wl_w + activation_elements(g) * wl_a) / 8


def mac_count(g: ModelGraph) -> int:
    shapes = g.infer_shapes()
    total = 0
    for n in g.nodes:
        if n.kind == "Conv2D":
            a = n.attrs
            total += int(np.prod(shapes[n.id])) * a["in_channels"] * a["kernel"] * a["kernel"]
        elif n.kind == "FullyConnected":
            total += n.attrs["in_features"] * n.attrs["out_features"]
    return total


@dataclass
class EnergyModel:
    """Energy per MAC (pJ) by (wl_w, wl_a), an fp32 reference, and memory pJ/bit per technology."""

    fp32_pj: float = FP32_PJ_PER_MAC
    mac_pj: Dict[Tuple[int, int], float] = field(default_factory=dict)
    memory_pj_per_bit: Dict[str, float] = field(default_factory=lambda: dict(MEMORY_PJ_PER_BIT))

    @classmethod
    def default(cls) -> "EnergyModel":
        # multiplier energy taken proportional to wl_w * wl_a, pinned at 8/8 by the 27x ratio
        int8 = FP32_PJ_PER_MAC / INT8_ENERGY_RATIO
        table = {(w, a): int8 * (w * a) / 64 for w in range(1, 17) for a in range(1, 17)}
        table[(8, 8)] = int8
        return cls(FP32_PJ_PER_MAC, table)

    def validate(self) -> "EnergyModel":
        if not self.fp32_pj > 0:
            raise ValueError("fp32 energy must be positive")
        for key, v in self.mac_pj.items():
            if not v > 0:
                raise ValueError(f"energy for {key} must be positive")
            w, a = key
            for nb in ((w - 1, a), (w, a - 1)):
                if nb in self.mac_pj and self.mac_pj[nb] > v:
                    raise ValueError(f"energy table increases when word-length drops at {nb}")
        for tech, v in self.memory_pj_per_bit.items():
            if not v > 0:
                raise ValueError(f"memory energy for {tech} must be positive")
        return self

    def per_mac_pj(self, wl_w: int, wl_a: int) -> float:
        if (wl_w, wl_a) == (32, 32):
            return self.fp32_pj
        try:
            return self.mac_pj[(wl_w, wl_a)]
        except KeyError:
            raise KeyError(f"no MAC energy entry for {wl_w}/{wl_a}") from None

    def to_dict(self) -> dict:
        return {
            "fp32_pj_per_mac": self.fp32_pj,
            "mac_pj": {f"{w}x{a}": v for (w, a), v in sorted(self.mac_pj.items())},
            "memory_pj_per_bit": dict(sorted(self.memory_pj_per_bit.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyModel":
        table = {}
        for key, v in d.get("mac_pj", {}).items():
            w, a = key.lower().split("x")
            table[(int(w), int(a))] = float(v)
        return cls(
            float(d.get("fp32_pj_per_mac", FP32_PJ_PER_MAC)),
            table,
            {k: float(v) for k, v in d.get("memory_pj_per_bit", MEMORY_PJ_PER_BIT).items()},
        ).validate()

    @classmethod
    def load(cls, path) -> "EnergyModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def energy_estimate(macs: int, model: EnergyModel, wl_w: int, wl_a: int) -> float:
    """MAC energy in joules."""
    return macs * model.per_mac_pj(wl_w, wl_a) * 1e-12


def memory_energy(footprint_bytes: float, model: EnergyModel) -> Dict[str, float]:
    """Energy to move the footprint once, per memory technology (joules); never added to MAC energy."""
    bits = footprint_bytes * 8
    return {tech: bits * pj * 1e-12 for tech, pj in sorted(model.memory_pj_per_bit.items())}


# --- Pareto / correlation -------------------------------------------------------


def pareto_front(costs: Sequence[float], accuracies: Sequence[float]) -> List[int]:
    """Indices of non-dominated (cost, accuracy) points, sorted by cost then index.

    A point is dominated when another has cost <= and accuracy >=, one strictly.
    Exact duplicates of a non-dominated point are all kept.
    """
    cost = np.asarray(costs, dtype=np.float64)
    acc = np.asarray(accuracies, dtype=np.float64)
    if cost.shape != acc.shape:
        raise ValueError("costs and accuracies differ in length")
    order = np.lexsort((np.arange(len(cost)), cost))
    front: List[int] = []
    best = -np.inf
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and cost[order[j]] == cost[order[i]]:
            j += 1
        block = order[i:j]
        top = acc[block].max()
        if top > best:
            front.extend(int(b) for b in block if acc[b] == top)
            best = top
        i = j
    return front


def pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Pearson correlation, or None when either column is constant or too short."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if den == 0.0:
        return None
    return float(np.dot(dx, dy) / den)


# --- records & reports -----------------------------------------------------------


@dataclass
class ExperimentRecord:
    plan: Optional[QuantPlan]
    top1: float = float("nan")
    agreement: float = float("nan")
    weight_mse: Dict[str, float] = field(default_factory=dict)
    activation_mse: Dict[str, float] = field(default_factory=dict)
    footprint_bytes: float = float("nan")
    energy_joules: float = float("nan")
    memory_energy_joules: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def weight_mse_mean(self) -> float:
        return float(np.mean(list(self.weight_mse.values()))) if self.weight_mse else 0.0

    @property
    def activation_mse_mean(self) -> float:
        return float(np.mean(list(self.activation_mse.values()))) if self.activation_mse else 0.0

    def row(self) -> dict:
        p = self.plan
        row = {
            "wl_w": p.wl_w if p else 32,
            "wl_a": p.wl_a if p else 32,
            "wsm": p.wsm.name if p else "",
            "asm": p.asm.name if p else "",
            "weight_group": p.weight_group if p else "",
            "residual": p.residual if p else "",
            "k_w": p.wsm.k if p else "",
            "k_a": p.asm.k if p else "",
        }
        if self.error:
            row.update({c: "" for c in METRIC_COLUMNS})
            row.update({f"memory_energy_{t}": "" for t in MEMORY_PJ_PER_BIT})
        else:
            row.update({
                "top1": self.top1,
                "agreement": self.agreement,
                "weight_mse": self.weight_mse_mean,
                "activation_mse": self.activation_mse_mean,
                "footprint_bytes": self.footprint_bytes,
                "energy_joules": self.energy_joules,
            })
            row.update({f"memory_energy_{t}": self.memory_energy_joules.get(t, "") for t in MEMORY_PJ_PER_BIT})
        row["error"] = self.error or ""
        return row

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict() if self.plan else None,
            "top1": self.top1,
            "agreement": self.agreement,
            "weight_mse": dict(sorted(self.weight_mse.items())),
            "weight_mse_mean": self.weight_mse_mean,
            "activation_mse": dict(sorted(self.activation_mse.items())),
            "activation_mse_mean": self.activation_mse_mean,
            "footprint_bytes": self.footprint_bytes,
            "energy_joules": self.energy_joules,
            "memory_energy_joules": self.memory_energy_joules,
            "error": self.error,
        }


PLAN_COLUMNS = ["wl_w", "wl_a", "wsm", "asm", "weight_group", "residual", "k_w", "k_a"]
METRIC_COLUMNS = ["top1", "agreement", "weight_mse", "activation_mse", "footprint_bytes", "energy_joules"]
COLUMNS = PLAN_COLUMNS + METRIC_COLUMNS + [f"memory_energy_{t}" for t in MEMORY_PJ_PER_BIT] + ["error"]


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, rows: List[dict], columns: List[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])


def read_rows(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v) -> float:
    return float(v) if v not in ("", None) else float("nan")


def summarize(rows: List[dict]) -> dict:
    """Pareto indices on both cost axes, MSE/accuracy correlations, acc_diff per record."""
    ok = [i for i, r in enumerate(rows) if not r.get("error")]
    acc = [_num(rows[i]["top1"]) for i in ok]
    fp = [_num(rows[i]["footprint_bytes"]) for i in ok]
    en = [_num(rows[i]["energy_joules"]) for i in ok]
    wm = [_num(rows[i]["weight_mse"]) for i in ok]
    am = [_num(rows[i]["activation_mse"]) for i in ok]
    diffs = acc_diff(acc, [(rows[i]["wl_w"], rows[i]["wl_a"]) for i in ok]) if ok else np.array([])
    return {
        "rows": len(rows),
        "failed_rows": [i for i, r in enumerate(rows) if r.get("error")],
        "pareto_footprint": [ok[i] for i in pareto_front(fp, acc)] if ok else [],
        "pareto_energy": [ok[i] for i in pareto_front(en, acc)] if ok else [],
        "pearson_accuracy_weight_mse": pearson(acc, wm),
        "pearson_accuracy_activation_mse": pearson(acc, am),
        "acc_diff": {str(ok[j]): float(d) for j, d in enumerate(diffs)},
    }


def emit_sweep_report(records: List[ExperimentRecord], out_dir) -> Dict[str, Path]:
    """Write sweep.csv, sweep.json, scatter.csv and grid.csv under ``out_dir``."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in records]
    paths = {
        "table": out / "sweep.csv",
        "summary": out / "sweep.json",
        "scatter": out / "scatter.csv",
        "grid": out / "grid.csv",
    }
    write_rows(paths["table"], rows, COLUMNS)
    summary = summarize(rows)
    paths["summary"].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    scatter = [
        {"row": i, "top1": r["top1"], "weight_mse": r["weight_mse"], "activation_mse": r["activation_mse"]}
        for i, r in enumerate(rows) if not r["error"]
    ]
    write_rows(paths["scatter"], scatter, ["row", "top1", "weight_mse", "activation_mse"])

    cells: Dict[Tuple[int, int], List[float]] = {}
    for r in rows:
        if not r["error"]:
            cells.setdefault((r["wl_w"], r["wl_a"]), []).append(r["top1"])
    grid = [
        {"wl_w": w, "wl_a": a, "n": len(v), "top1_mean": float(np.mean(v)), "top1_max": float(np.max(v)),
         "top1_min": float(np.min(v))}
        for (w, a), v in sorted(cells.items())
    ]
    write_rows(paths["grid"], grid, ["wl_w", "wl_a", "n", "top1_mean", "top1_max", "top1_min"])
    return paths


CRITERIA = ("wsm", "asm", "weight_group", "residual")


def build_report(rows: List[dict], bins: int = 10) -> dict:
    """Pareto fronts, correlations and acc_diff histograms per criterion from sweep rows."""
    if not rows:
        raise ValueError("empty report")
    summary = summarize(rows)
    ok = [i for i, r in enumerate(rows) if not r.get("error")]
    diffs = np.array([summary["acc_diff"][str(i)] for i in ok])
    if len(diffs):
        edges = np.histogram_bin_edges(diffs, bins=bins)
    else:
        edges = np.array([0.0, 1.0])
    hist = {}
    for crit in CRITERIA:
        per_value = {}
        for value in sorted({rows[i][crit] for i in ok}):
            sel = np.array([rows[i][crit] == value for i in ok])
            counts, _ = np.histogram(diffs[sel], bins=edges)
            per_value[value] = {
                "counts": counts.tolist(),
                "mean_acc_diff": float(diffs[sel].mean()),
                "n": int(sel.sum()),
            }
        hist[crit] = per_value
    summary["acc_diff_histogram"] = {"edges": edges.tolist(), "criteria": hist}
    return summary


def acc_diff_groups(rows: List[dict]) -> Dict[str, float]:
    """Sum of acc_diff per word-length group (each ~0)."""
    summary = summarize(rows)
    sums: Dict[str, List[float]] = {}
    for i, d in summary["acc_diff"].items():
        r = rows[int(i)]
        sums.setdefault(f"{r['wl_w']}/{r['wl_a']}", []).append(d)
    return {k: math.fsum(v) for k, v in sums.items()}


def pareto_rows(rows: List[dict], indices: List[int]) -> List[dict]:
    return [dict(rows[i], row=i) for i in indices]

