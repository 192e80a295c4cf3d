"""Seeded toy residual CNN and synthetic dataset for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .engine import Mode, forward, predict, save_dataset
from .graph import ModelGraph, Node, check_graph, save_model
from .tensor import save_tensors


@dataclass(frozen=True)
class FixtureSpec:
    seed: int = 0
    input_shape: Tuple[int, int, int] = (3, 16, 16)
    blocks: int = 2
    widths: Tuple[int, ...] = (8, 16)
    classes: int = 10
    dataset_size: int = 1000
    heavy_tail: bool = False
    golden_size: int = 4
    logit_scale: float = 10.0

    def __post_init__(self):
        if not 1 <= self.blocks <= 4:
            raise ValueError("block count must be in 1..4")
        if any(v <= 0 for v in (*self.input_shape, *self.widths, self.classes, self.dataset_size)):
            raise ValueError("all fixture sizes must be positive")
        if not self.widths:
            raise ValueError("at least one channel width required")


@dataclass
class _Builder:
    rng: np.random.Generator
    heavy_tail: bool
    nodes: List[Node] = field(default_factory=list)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, node: Node) -> str:
        self.nodes.append(node)
        return node.id

    def weight(self, name: str, shape: Tuple[int, ...], fan_in: int) -> str:
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if self.heavy_tail:
            # 1% of weights become 10x outliers
            mask = self.rng.random(shape) < 0.01
            w = np.where(mask, w * 10.0, w)
        self.tensors[name] = w.astype(np.float32)
        return name

    def conv(self, nid: str, src: str, cin: int, cout: int, k: int, stride: int) -> str:
        w = self.weight(f"{nid}.weight", (cout, cin, k, k), cin * k * k)
        return self.add(Node(nid, "Conv2D", [src], {
            "in_channels": cin, "out_channels": cout, "kernel": k, "stride": stride, "padding": k // 2,
        }, weight=w))

    def bn(self, nid: str, src: str, c: int, gamma_scale: float = 1.0) -> str:
        params = {}
        self.tensors[f"{nid}.gamma"] = (gamma_scale * self.rng.uniform(0.8, 1.2, c)).astype(np.float32)
        self.tensors[f"{nid}.beta"] = self.rng.normal(0.0, 0.1, c).astype(np.float32)
        self.tensors[f"{nid}.mean"] = np.zeros(c, np.float32)
        self.tensors[f"{nid}.var"] = np.ones(c, np.float32)
        for p in ("gamma", "beta", "mean", "var"):
            params[p] = f"{nid}.{p}"
        return self.add(Node(nid, "BatchNorm", [src], {"channels": c, "eps": 1e-5}, params=params))


def class_prototypes(spec: FixtureSpec) -> np.ndarray:
    """One coarse 4x4 pattern per class and input channel, values in [0, 1]."""
    rng = np.random.default_rng([spec.seed, 4])
    return rng.uniform(0.0, 1.0, size=(spec.classes, spec.input_shape[0], 4, 4))


def sample_inputs(rng: np.random.Generator, n: int, shape: Tuple[int, int, int], prototypes: np.ndarray) -> np.ndarray:
    """Smooth images in [0, 1]: a jittered class prototype upsampled to full size, plus pixel noise."""
    c, h, w = shape
    cls = rng.integers(0, len(prototypes), size=n)
    coarse = prototypes[cls] + rng.normal(0.0, 0.05, size=(n, c, 4, 4))
    img = np.repeat(np.repeat(coarse, -(-h // 4), axis=2), -(-w // 4), axis=3)[:, :, :h, :w]
    img = img + rng.normal(0.0, 0.02, size=(n, c, h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _activations(g: ModelGraph, upto: str, x: np.ndarray) -> np.ndarray:
    idx = [n.id for n in g.nodes].index(upto)
    sub = ModelGraph(g.nodes[:idx + 1] + [Node("_out", "Output", [upto])], g.tensors)
    shape = sub.infer_shapes()[upto]
    return forward(sub, x, Mode.FLOAT).reshape((len(x),) + tuple(shape))


def build_model(spec: FixtureSpec) -> ModelGraph:
    rng = np.random.default_rng([spec.seed, 0])
    b = _Builder(rng, spec.heavy_tail)
    c_in = spec.input_shape[0]
    x = b.add(Node("input", "Input", attrs={"shape": list(spec.input_shape)}))

    width = spec.widths[0]
    x = b.conv("stem.conv", x, c_in, width, 3, 1)
    x = b.bn("stem.bn", x, width)
    x = b.add(Node("stem.relu", "ReLU", [x]))

    for i in range(spec.blocks):
        out = spec.widths[min(i, len(spec.widths) - 1)]
        stride = 1 if out == width else 2
        p = f"block{i}"
        y = b.conv(f"{p}.conv1", x, width, out, 3, stride)
        y = b.bn(f"{p}.bn1", y, out)
        y = b.add(Node(f"{p}.relu1", "ReLU", [y]))
        y = b.conv(f"{p}.conv2", y, out, out, 3, 1)
        y = b.bn(f"{p}.bn2", y, out, gamma_scale=0.5)
        if stride != 1 or out != width:
            s = b.conv(f"{p}.down", x, width, out, 1, stride)
            s = b.bn(f"{p}.down_bn", s, out, gamma_scale=0.5)
        else:
            s = x
        y = b.add(Node(f"{p}.add", "Add", [y, s]))
        x = b.add(Node(f"{p}.relu2", "ReLU", [y]))
        width = out

    x = b.add(Node("pool", "AvgPool", [x], {"global": True}))
    b.tensors["fc.weight"] = np.zeros((spec.classes, width), np.float32)
    b.tensors["fc.bias"] = np.zeros(spec.classes, np.float32)
    x = b.add(Node("fc", "FullyConnected", [x], {"in_features": width, "out_features": spec.classes},
                   weight="fc.weight", bias="fc.bias"))
    b.add(Node("output", "Output", [x]))
    g = ModelGraph(b.nodes, b.tensors)

    # data-dependent init: BN running stats from a probe batch
    probe = sample_inputs(np.random.default_rng([spec.seed, 1]), 256, spec.input_shape, class_prototypes(spec))
    for n in g.nodes:
        if n.kind == "BatchNorm":
            a = _activations(g, n.inputs[0], probe).astype(np.float64)
            g.tensors[n.params["mean"]] = a.mean(axis=(0, 2, 3)).astype(np.float32)
            g.tensors[n.params["var"]] = a.var(axis=(0, 2, 3)).astype(np.float32)
    # classifier head: nearest class mean over pooled features of prototype samples
    protos = class_prototypes(spec)
    prng = np.random.default_rng([spec.seed, 5])
    per_class = []
    for c in range(spec.classes):
        xs = sample_inputs(prng, 32, spec.input_shape, protos[c:c + 1])
        per_class.append(_activations(g, "pool", xs).reshape(32, -1).astype(np.float64).mean(axis=0))
    centroids = np.array(per_class)
    centre = centroids.mean(axis=0)
    w = centroids - centre
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    g.tensors["fc.weight"] = (w * spec.logit_scale).astype(np.float32)
    g.tensors["fc.bias"] = (-(g.tensors["fc.weight"].astype(np.float64) @ centre)).astype(np.float32)
    return check_graph(g)


def build_dataset(g: ModelGraph, spec: FixtureSpec) -> Tuple[np.ndarray, np.ndarray, int]:
    """Inputs plus labels taken from the float model's own argmax.

    Regenerates with the next data seed until every class appears, when the
    dataset is large enough (>= 50 samples per class) for that to be expected.
    Returns the data seed actually used.
    """
    need_all = spec.dataset_size >= 50 * spec.classes
    data_seed = spec.seed
    for _ in range(100):
        x = sample_inputs(np.random.default_rng([data_seed, 2]), spec.dataset_size, spec.input_shape,
                          class_prototypes(spec))
        labels = np.argmax(predict(g, x, Mode.FLOAT), axis=1)
        if not need_all or len(np.unique(labels)) == spec.classes:
            return x, labels, data_seed
        data_seed += 1
    raise RuntimeError("could not cover every class; widen the dataset")


def write_fixture(spec: FixtureSpec, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = build_model(spec)
    paths = {
        "model": out / "model.json",
        "tensors": out / "model.bin",
        "dataset": out / "dataset.bin",
        "labels": out / "dataset.labels",
        "golden": out / "golden.bin",
    }
    save_model(g, paths["model"])

    golden_in = sample_inputs(np.random.default_rng([spec.seed, 3]), spec.golden_size, spec.input_shape,
                              class_prototypes(spec))
    golden_out = forward(g, golden_in, Mode.FLOAT).astype(np.float32)
    save_tensors(paths["golden"], {"input": golden_in, "logits": golden_out})

    x, labels, _ = build_dataset(g, spec)
    save_dataset(paths["dataset"], x, labels)
    return paths
