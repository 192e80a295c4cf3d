"""Graph IR for small residual CNNs, plus the BN-folding and quantization passes.

A model on disk is a JSON manifest (nodes in topological order, explicit
edges, tensor names, quantization params) next to a binary tensor file.
Passes never mutate their input; they return a new ``ModelGraph``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .calibration import ScaleMethod, params_from_dict, scales_to_dict
from .quant import QuantParams
from .tensor import AxisGroup, Layout, TensorFormatError, load_tensors, save_tensors

MANIFEST_FORMAT = "ptqflow-model"
MANIFEST_VERSION = 1

KINDS = (
    "Input", "Conv2D", "BatchNorm", "ReLU", "Add", "MaxPool", "AvgPool",
    "FullyConnected", "Quant", "Output",
)
WEIGHTED = ("Conv2D", "FullyConnected")
BN_PARAMS = ("gamma", "beta", "mean", "var")

ACTIVATION_TAG = "activation"
RESIDUAL_TAG = "residual"


class GraphError(ValueError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class Node:
    id: str
    kind: str
    inputs: List[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    weight: Optional[str] = None
    bias: Optional[str] = None
    params: Dict[str, str] = field(default_factory=dict)
    tag: Optional[str] = None
    quant: Optional[QuantParams] = None


@dataclass(frozen=True)
class QuantPlan:
    wl_w: int
    wl_a: int
    wsm: ScaleMethod
    asm: ScaleMethod
    weight_group: str = "channel"
    residual: str = "fpres"

    def __post_init__(self):
        if self.weight_group not in ("channel", "layer"):
            raise ValueError(f"weight group must be channel or layer, got {self.weight_group!r}")
        if self.residual not in ("fpres", "qres"):
            raise ValueError(f"residual mode must be fpres or qres, got {self.residual!r}")
        for wl in (self.wl_w, self.wl_a):
            if not 1 <= wl <= 16:
                raise ValueError(f"word-length {wl} outside 1..16")
        self.wsm.check_target(weights=True)
        self.asm.check_target(weights=False)

    @property
    def weight_axis_group(self) -> AxisGroup:
        return AxisGroup.channel(0) if self.weight_group == "channel" else AxisGroup.whole()

    def key(self) -> tuple:
        return (self.wl_w, self.wl_a, self.wsm.name, self.asm.name, self.weight_group, self.residual)

    def to_dict(self) -> dict:
        return {
            "wl_w": self.wl_w, "wl_a": self.wl_a,
            "wsm": self.wsm.kind.value, "asm": self.asm.kind.value,
            "k_w": self.wsm.k, "k_a": self.asm.k,
            "weight_group": self.weight_group, "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPlan":
        return cls(
            int(d["wl_w"]), int(d["wl_a"]),
            ScaleMethod.parse(d["wsm"], float(d.get("k_w", 99.99))),
            ScaleMethod.parse(d["asm"], float(d.get("k_a", 99.99))),
            d["weight_group"], d["residual"],
        )


@dataclass
class ModelGraph:
    nodes: List[Node]
    tensors: Dict[str, np.ndarray]
    plan: Optional[QuantPlan] = None
    weight_quant: Dict[str, QuantParams] = field(default_factory=dict)

    def copy(self) -> "ModelGraph":
        # tensors are treated as immutable, so sharing the arrays is safe
        return ModelGraph(copy.deepcopy(self.nodes), dict(self.tensors), self.plan, dict(self.weight_quant))

    def node(self, nid: str) -> Node:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def by_kind(self, kind: str) -> List[Node]:
        return [n for n in self.nodes if n.kind == kind]

    def consumers(self, nid: str) -> List[Node]:
        return [n for n in self.nodes if nid in n.inputs]

    @property
    def input_node(self) -> Node:
        return self.by_kind("Input")[0]

    @property
    def output_node(self) -> Node:
        return self.by_kind("Output")[0]

    def quant_sites(self) -> List[Node]:
        return self.by_kind("Quant")

    @property
    def is_quantized(self) -> bool:
        return self.plan is not None or bool(self.quant_sites())

    def infer_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Per-sample output shape of every node; raises GraphError on disagreement."""
        shapes = _infer(self)
        if isinstance(shapes, list):
            raise GraphError(shapes)
        return shapes


# --- validation & shape inference -------------------------------------------


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _infer(g: ModelGraph):
    errors: List[str] = []
    shapes: Dict[str, Tuple[int, ...]] = {}
    for n in g.nodes:
        if any(i not in shapes for i in n.inputs):
            missing = [i for i in n.inputs if i not in shapes]
            errors.append(f"{n.id}: inputs {missing} undefined or not topologically earlier")
            continue
        ins = [shapes[i] for i in n.inputs]
        try:
            shapes[n.id] = _node_shape(g, n, ins)
        except GraphError as e:
            errors.extend(e.errors)
    return errors or shapes


def _node_shape(g: ModelGraph, n: Node, ins: List[Tuple[int, ...]]) -> Tuple[int, ...]:
    a = n.attrs
    if n.kind == "Input":
        return tuple(int(v) for v in a["shape"])
    x = ins[0]
    if n.kind == "Conv2D":
        if len(x) != 3 or x[0] != a["in_channels"]:
            raise GraphError(f"{n.id}: expects {a['in_channels']} input channels, got shape {x}")
        k, s, p = a["kernel"], a.get("stride", 1), a.get("padding", 0)
        h, w = _conv_out(x[1], k, s, p), _conv_out(x[2], k, s, p)
        if h < 1 or w < 1:
            raise GraphError(f"{n.id}: empty output")
        return (a["out_channels"], h, w)
    if n.kind == "FullyConnected":
        feat = int(np.prod(x))
        if feat != a["in_features"]:
            raise GraphError(f"{n.id}: expects {a['in_features']} features, got {feat}")
        return (a["out_features"],)
    if n.kind in ("MaxPool", "AvgPool"):
        if len(x) != 3:
            raise GraphError(f"{n.id}: pooling needs a feature map")
        if a.get("global"):
            return (x[0], 1, 1)
        k, s, p = a["kernel"], a.get("stride", a["kernel"]), a.get("padding", 0)
        return (x[0], _conv_out(x[1], k, s, p), _conv_out(x[2], k, s, p))
    if n.kind == "BatchNorm":
        if x[0] != a["channels"]:
            raise GraphError(f"{n.id}: expects {a['channels']} channels, got {x[0]}")
        return x
    if n.kind == "Add":
        if ins[0] != ins[1]:
            raise GraphError(f"{n.id}: operand shapes differ {ins[0]} vs {ins[1]}")
        return x
    return x


def validate_graph(g: ModelGraph) -> List[str]:
    """Return a list of problems (empty when the graph is well formed)."""
    errors: List[str] = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        errors.append("duplicate node ids")
    for n in g.nodes:
        if n.kind not in KINDS:
            errors.append(f"{n.id}: unknown kind {n.kind}")
        if n.kind == "Input":
            if n.inputs:
                errors.append(f"{n.id}: Input takes no inputs")
        elif not n.inputs:
            errors.append(f"{n.id}: has no inputs")
        if n.kind == "Add" and len(n.inputs) != 2:
            errors.append(f"{n.id}: Add needs exactly 2 inputs, has {len(n.inputs)}")
        elif n.kind not in ("Add", "Input") and len(n.inputs) > 1:
            errors.append(f"{n.id}: {n.kind} takes one input")
        if n.kind in WEIGHTED:
            if not n.weight or n.weight not in g.tensors:
                errors.append(f"{n.id}: weight tensor {n.weight!r} missing")
            if n.bias is not None and n.bias not in g.tensors:
                errors.append(f"{n.id}: bias tensor {n.bias!r} missing")
        if n.kind == "BatchNorm":
            for p in BN_PARAMS:
                if n.params.get(p) not in g.tensors:
                    errors.append(f"{n.id}: batch-norm {p} tensor missing")
    if len(g.by_kind("Input")) != 1:
        errors.append("graph needs exactly one Input node")
    if len(g.by_kind("Output")) != 1:
        errors.append("graph needs exactly one Output node")
    if errors:
        return errors

    # topological order doubles as the acyclicity check
    shapes = _infer(g)
    if isinstance(shapes, list):
        return shapes
    for n in g.nodes:
        if n.kind == "Conv2D":
            a = n.attrs
            want = (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"])
            if g.tensors[n.weight].shape != want:
                errors.append(f"{n.id}: weight shape {g.tensors[n.weight].shape}, expected {want}")
        if n.kind == "FullyConnected":
            want = (n.attrs["out_features"], n.attrs["in_features"])
            if g.tensors[n.weight].shape != want:
                errors.append(f"{n.id}: weight shape {g.tensors[n.weight].shape}, expected {want}")
        if n.kind in WEIGHTED and n.bias is not None:
            out = g.tensors[n.weight].shape[0]
            if g.tensors[n.bias].shape != (out,):
                errors.append(f"{n.id}: bias shape {g.tensors[n.bias].shape}, expected ({out},)")
    return errors


def check_graph(g: ModelGraph) -> ModelGraph:
    errors = validate_graph(g)
    if errors:
        raise GraphError(errors)
    return g


# --- passes ------------------------------------------------------------------


def fold_batchnorm(g: ModelGraph) -> ModelGraph:
    """Merge every BatchNorm into the Conv2D/FullyConnected that feeds it."""
    out = g.copy()
    for bn in [n for n in out.nodes if n.kind == "BatchNorm"]:
        prev = out.node(bn.inputs[0])
        if prev.kind not in WEIGHTED:
            raise GraphError(f"{bn.id}: batch-norm input {prev.id} is {prev.kind}, cannot fold")
        if len(out.consumers(prev.id)) != 1:
            raise GraphError(f"{bn.id}: {prev.id} has other consumers, cannot fold")

        t = out.tensors
        gamma, beta, mean, var = (t[bn.params[p]].astype(np.float64) for p in BN_PARAMS)
        factor = gamma / np.sqrt(var + float(bn.attrs.get("eps", 1e-5)))
        w = t[prev.weight].astype(np.float64)
        w = w * factor.reshape((-1,) + (1,) * (w.ndim - 1))
        b = t[prev.bias].astype(np.float64) if prev.bias else np.zeros(w.shape[0])
        b = (b - mean) * factor + beta

        t[prev.weight] = w.astype(np.float32)
        if prev.bias is None:
            prev.bias = f"{prev.id}.bias"
        t[prev.bias] = b.astype(np.float32)
        for p in BN_PARAMS:
            t.pop(bn.params[p], None)
        for c in out.consumers(bn.id):
            c.inputs = [prev.id if i == bn.id else i for i in c.inputs]
        out.nodes.remove(bn)
    return out


def insert_quant_nodes(g: ModelGraph, plan: QuantPlan) -> ModelGraph:
    """Place activation Q nodes on the input and after every ReLU, residual Q nodes on Add outputs (qRes)."""
    if g.is_quantized:
        raise GraphError("graph already carries a quantization plan")
    if g.by_kind("BatchNorm"):
        raise GraphError("fold batch-norm before inserting quantization nodes")
    # re-validate the method/target split in case the plan was built unchecked
    plan.wsm.check_target(weights=True)
    plan.asm.check_target(weights=False)

    out = g.copy()
    nodes: List[Node] = []
    for n in out.nodes:
        nodes.append(n)
        tag = None
        if n.kind in ("Input", "ReLU"):
            tag = ACTIVATION_TAG
        elif n.kind == "Add" and plan.residual == "qres":
            tag = RESIDUAL_TAG
        if tag is None:
            continue
        qid = f"{n.id}.q"
        for c in out.nodes:
            c.inputs = [qid if i == n.id else i for i in c.inputs]
        nodes.append(Node(qid, "Quant", [n.id], tag=tag))
    out.nodes = nodes
    out.plan = plan
    return out


def resolve_params(
    g: ModelGraph,
    weight_params: Dict[str, QuantParams],
    site_params: Dict[str, QuantParams],
) -> ModelGraph:
    """Attach weight QuantParams (keyed by layer id) and site QuantParams (keyed by the quantized node id)."""
    if g.plan is None:
        raise GraphError("graph has no quantization plan")
    out = g.copy()
    missing = []
    for n in out.nodes:
        if n.kind in WEIGHTED:
            if n.id not in weight_params:
                missing.append(f"weights of {n.id}")
            else:
                out.weight_quant[n.id] = weight_params[n.id]
        if n.kind == "Quant":
            src = n.inputs[0]
            if src not in site_params:
                missing.append(f"site {src}")
            else:
                n.quant = site_params[src]
    if missing:
        raise GraphError([f"missing quantization params: {m}" for m in missing])
    return out


def passthrough(g: ModelGraph) -> ModelGraph:
    """Drop all Quant nodes and the plan, reconnecting their consumers."""
    out = g.copy()
    for q in out.quant_sites():
        for c in out.consumers(q.id):
            c.inputs = [q.inputs[0] if i == q.id else i for i in c.inputs]
    out.nodes = [n for n in out.nodes if n.kind != "Quant"]
    out.plan = None
    out.weight_quant = {}
    return out


# --- persistence -----------------------------------------------------------


def _node_to_dict(n: Node) -> dict:
    d = {"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "attrs": dict(n.attrs)}
    if n.weight is not None:
        d["weight"] = n.weight
    if n.bias is not None:
        d["bias"] = n.bias
    if n.params:
        d["params"] = dict(n.params)
    if n.tag is not None:
        d["tag"] = n.tag
    if n.quant is not None:
        d["quant"] = scales_to_dict(n.quant)
    return d


def _node_from_dict(d: dict) -> Node:
    return Node(
        id=d["id"], kind=d["kind"], inputs=list(d.get("inputs", [])), attrs=dict(d.get("attrs", {})),
        weight=d.get("weight"), bias=d.get("bias"), params=dict(d.get("params", {})),
        tag=d.get("tag"), quant=params_from_dict(d["quant"]) if "quant" in d else None,
    )


def _layouts(g: ModelGraph) -> Dict[str, Layout]:
    lay: Dict[str, Layout] = {}
    for n in g.nodes:
        if n.kind == "Conv2D" and n.weight:
            lay[n.weight] = Layout.OIHW
    return lay


def save_model(g: ModelGraph, path) -> None:
    """Write ``<path>`` (manifest) and ``<path stem>.bin`` (tensors)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensor_file = path.with_suffix(".bin")
    referenced = sorted(_referenced(g))
    save_tensors(tensor_file, {k: g.tensors[k] for k in referenced}, _layouts(g))
    lines = [
        "{",
        f' "format": {json.dumps(MANIFEST_FORMAT)},',
        f' "version": {MANIFEST_VERSION},',
        f' "tensors": {json.dumps(tensor_file.name)},',
        f' "plan": {json.dumps(g.plan.to_dict() if g.plan else None, sort_keys=True)},',
        ' "weight_quant": ' + json.dumps(
            {k: scales_to_dict(v) for k, v in sorted(g.weight_quant.items())}, sort_keys=True) + ",",
        ' "nodes": [',
    ]
    body = [f"  {json.dumps(_node_to_dict(n), sort_keys=True)}" for n in g.nodes]
    lines.append(",\n".join(body))
    lines += [" ]", "}"]
    path.write_text("\n".join(lines) + "\n")


def _referenced(g: ModelGraph) -> set:
    names = set()
    for n in g.nodes:
        names.update(x for x in (n.weight, n.bias) if x)
        names.update(n.params.values())
    return names


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise TensorFormatError(f"{path}: malformed manifest ({e})") from None
    if data.get("format") != MANIFEST_FORMAT:
        raise TensorFormatError(f"{path}: not a model manifest")
    if data.get("version") != MANIFEST_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {data.get('version')}")
    tensors = load_tensors(path.parent / data["tensors"])
    g = ModelGraph(
        nodes=[_node_from_dict(d) for d in data["nodes"]],
        tensors=tensors,
        plan=QuantPlan.from_dict(data["plan"]) if data.get("plan") else None,
        weight_quant={k: params_from_dict(v) for k, v in data.get("weight_quant", {}).items()},
    )
    dangling = sorted(n for n in _referenced(g) if n not in tensors)
    if dangling:
        raise GraphError([f"dangling tensor reference {n}" for n in dangling])
    return g
