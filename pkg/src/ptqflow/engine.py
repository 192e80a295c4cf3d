"""Float, fake-quantized and calibrating execution of a ModelGraph."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .calibration import DEFAULT_RESERVOIR, CalibrationStats
from .graph import WEIGHTED, GraphError, ModelGraph
from .quant import fake_quantize_tensor
from .tensor import AxisGroup, load_tensors, save_tensors


class Mode(str, enum.Enum):
    FLOAT = "float"
    FAKEQUANT = "fakequant"
    CALIBRATE = "calibrate"


# --- kernels -------------------------------------------------------------------


def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int = 1, padding: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, ho, wo, kh, kw) -> (n, ho, wo, c*kh*kw); reduction runs channel, row, column
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    y = cols @ w.reshape(o, -1).T
    if b is not None:
        y = y + b
    return np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def max_pool(x: np.ndarray, k: int, stride: int, padding: int = 0) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def avg_pool(x: np.ndarray, k: int, stride: int, padding: int = 0) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.mean(axis=(4, 5))


def fully_connected(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> np.ndarray:
    y = x.reshape(x.shape[0], -1) @ w.T
    return y + b if b is not None else y


# --- calibration sink / trace ----------------------------------------------------


@dataclass
class SiteStats:
    """Activation statistics for one Quant site: layerwise with reservoir, channelwise min/max."""

    layer: CalibrationStats
    channel: CalibrationStats
    tag: Optional[str] = None

    @classmethod
    def new(cls, seed: int, capacity: int = DEFAULT_RESERVOIR, tag: Optional[str] = None) -> "SiteStats":
        return cls(
            CalibrationStats(AxisGroup.whole(), capacity, seed),
            CalibrationStats(AxisGroup.channel(1), 0, seed),
            tag,
        )

    def update(self, t: np.ndarray) -> None:
        self.layer.update(t)
        self.channel.update(t)

    def merge(self, other: "SiteStats") -> "SiteStats":
        return SiteStats(self.layer.merge(other.layer), self.channel.merge(other.channel), self.tag)


@dataclass
class Trace:
    """Per-site running squared quantization error and clamp counters (FakeQuant mode)."""

    sq_err: Dict[str, float] = field(default_factory=dict)
    count: Dict[str, int] = field(default_factory=dict)
    low_clamps: Dict[str, int] = field(default_factory=dict)
    high_clamps: Dict[str, int] = field(default_factory=dict)

    def record(self, site: str, fp: np.ndarray, q: np.ndarray, low: int, high: int) -> None:
        d = fp - q
        self.sq_err[site] = self.sq_err.get(site, 0.0) + float(np.sum(d * d))
        self.count[site] = self.count.get(site, 0) + fp.size
        self.low_clamps[site] = self.low_clamps.get(site, 0) + low
        self.high_clamps[site] = self.high_clamps.get(site, 0) + high

    def mse(self) -> Dict[str, float]:
        return {k: self.sq_err[k] / self.count[k] for k in self.sq_err}


# --- forward -------------------------------------------------------------------


def quantized_weights(g: ModelGraph) -> Dict[str, np.ndarray]:
    """Fake-quantized weight tensors keyed by layer id."""
    out = {}
    for n in g.nodes:
        if n.kind in WEIGHTED:
            if n.id not in g.weight_quant:
                raise GraphError(f"{n.id}: unresolved weight quantization params")
            out[n.id] = fake_quantize_tensor(g.tensors[n.weight], g.weight_quant[n.id])
    return out


def _check_fakequant(g: ModelGraph) -> None:
    missing = [n.id for n in g.quant_sites() if n.quant is None]
    missing += [n.id for n in g.nodes if n.kind in WEIGHTED and n.id not in g.weight_quant]
    if missing:
        raise GraphError([f"{m}: unresolved quantization params" for m in missing])


def forward(
    g: ModelGraph,
    x: np.ndarray,
    mode: Mode = Mode.FLOAT,
    stats: Optional[Dict[str, SiteStats]] = None,
    trace: Optional[Trace] = None,
    weights: Optional[Dict[str, np.ndarray]] = None,
    seed: int = 0,
) -> np.ndarray:
    """Run ``x`` (N, C, H, W) through the graph and return the logits (N, classes).

    Float mode treats Quant nodes as pass-through. FakeQuant applies each
    node's params and uses fake-quantized weights. Calibrate is Float plus a
    statistics update at every Quant site, keyed by the quantized node id.
    """
    mode = Mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected an (N, C, H, W) batch, got shape {x.shape}")
    expected = tuple(g.input_node.attrs["shape"])
    if x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {expected}")
    if mode is Mode.CALIBRATE and stats is None:
        raise ValueError("calibrate mode needs a statistics sink")
    if mode is Mode.FAKEQUANT:
        _check_fakequant(g)
        if weights is None:
            weights = quantized_weights(g)

    vals: Dict[str, np.ndarray] = {}
    last_use = {}
    for i, n in enumerate(g.nodes):
        for src in n.inputs:
            last_use[src] = i

    def param(name):
        return None if name is None else g.tensors[name].astype(np.float64)

    for i, n in enumerate(g.nodes):
        ins = [vals[s] for s in n.inputs]
        a = n.attrs
        k = n.kind
        if k == "Input":
            y = x
        elif k == "Conv2D":
            w = weights[n.id] if mode is Mode.FAKEQUANT else param(n.weight)
            y = conv2d(ins[0], w, param(n.bias), a.get("stride", 1), a.get("padding", 0))
        elif k == "FullyConnected":
            w = weights[n.id] if mode is Mode.FAKEQUANT else param(n.weight)
            y = fully_connected(ins[0], w, param(n.bias))
        elif k == "BatchNorm":
            shape = (1, -1) + (1,) * (ins[0].ndim - 2)
            gamma, beta, mean, var = (param(n.params[p]).reshape(shape) for p in ("gamma", "beta", "mean", "var"))
            y = (ins[0] - mean) / np.sqrt(var + float(a.get("eps", 1e-5))) * gamma + beta
        elif k == "ReLU":
            y = np.maximum(ins[0], 0.0)
        elif k == "Add":
            y = ins[0] + ins[1]
        elif k == "MaxPool":
            y = max_pool(ins[0], a["kernel"], a.get("stride", a["kernel"]), a.get("padding", 0))
        elif k == "AvgPool":
            if a.get("global"):
                y = ins[0].mean(axis=(2, 3), keepdims=True)
            else:
                y = avg_pool(ins[0], a["kernel"], a.get("stride", a["kernel"]), a.get("padding", 0))
        elif k == "Quant":
            site = n.inputs[0]
            if mode is Mode.FAKEQUANT:
                y = fake_quantize_tensor(ins[0], n.quant)
                if trace is not None:
                    s = float(n.quant.scales[0])
                    low = int(np.count_nonzero(ins[0] < s * n.quant.range.int_min))
                    high = int(np.count_nonzero(ins[0] > s * n.quant.range.int_max))
                    trace.record(site, ins[0], y, low, high)
            else:
                if mode is Mode.CALIBRATE:
                    if site not in stats:
                        stats[site] = SiteStats.new(seed, tag=n.tag)
                    stats[site].update(ins[0])
                y = ins[0]
        elif k == "Output":
            y = ins[0].reshape(ins[0].shape[0], -1)
        else:
            raise GraphError(f"{n.id}: unsupported node kind {k}")
        vals[n.id] = y
        for src in n.inputs:
            if last_use.get(src) == i:
                del vals[src]
    return vals[g.output_node.id]


def predict(g: ModelGraph, x: np.ndarray, mode: Mode = Mode.FLOAT, batch_size: int = 250, **kwargs) -> np.ndarray:
    """Batched ``forward`` returning the concatenated logits."""
    if mode is Mode.FAKEQUANT and kwargs.get("weights") is None:
        _check_fakequant(g)
        kwargs["weights"] = quantized_weights(g)
    outs = [forward(g, x[i:i + batch_size], mode, **kwargs) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def run_calibration(
    g: ModelGraph,
    inputs: np.ndarray,
    sample_size: int = 1000,
    seed: int = 0,
    batch_size: int = 100,
) -> Dict[str, SiteStats]:
    """Collect activation statistics at every Quant site over a seeded random sample."""
    n = len(inputs)
    if n == 0:
        raise ValueError("empty dataset")
    if sample_size > n:
        raise ValueError(f"calibration sample {sample_size} exceeds dataset size {n}")
    if sample_size < 1:
        raise ValueError("calibration sample must hold at least one input")
    order = np.random.default_rng(seed).permutation(n)[:sample_size]
    stats: Dict[str, SiteStats] = {}
    for i in range(0, sample_size, batch_size):
        forward(g, inputs[order[i:i + batch_size]], Mode.CALIBRATE, stats=stats, seed=seed)
    return stats


# --- dataset files -------------------------------------------------------------


def _labels_path(path: Path) -> Path:
    return path.with_suffix(".labels")


def save_dataset(path, inputs: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    path = Path(path)
    save_tensors(path, {"inputs": np.asarray(inputs, dtype=np.float32)})
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != len(inputs):
            raise ValueError("labels length must equal the number of inputs")
        _labels_path(path).write_bytes(labels.astype("<u4").tobytes())


def load_dataset(path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    path = Path(path)
    inputs = load_tensors(path)["inputs"]
    lp = _labels_path(path)
    labels = None
    if lp.exists():
        raw = lp.read_bytes()
        if len(raw) != 4 * len(inputs):
            raise ValueError(f"{lp}: expected {len(inputs)} labels, found {len(raw) // 4}")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    return inputs, labels

