"""End-to-end PTQ flow: fold, calibrate, resolve scales, quantize, evaluate, sweep."""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .calibration import (
    DEFAULT_K,
    CalibrationError,
    CalibrationStats,
    Method,
    ScaleMethod,
    compute_quant_params,
    params_from_dict,
    scales_to_dict,
    summary_to_dict,
    weight_stats,
)
from .engine import Mode, SiteStats, Trace, predict, quantized_weights, run_calibration
from .graph import (
    WEIGHTED,
    GraphError,
    ModelGraph,
    QuantPlan,
    check_graph,
    fold_batchnorm,
    insert_quant_nodes,
    passthrough,
    resolve_params,
)
from .metrics import (
    EnergyModel,
    ExperimentRecord,
    energy_estimate,
    mac_count,
    memory_energy,
    memory_footprint,
    top1_accuracy,
)
from .quant import QuantParams, quant_mse
from .tensor import AxisGroup

PROFILE_FORMAT = "ptqflow-profile"

# plan used only to expose every possible site (qRes is the superset)
_SITE_PLAN = QuantPlan(8, 8, ScaleMethod(Method.ABSMAX), ScaleMethod(Method.ABSMAX), "channel", "qres")


def prepare(g: ModelGraph) -> ModelGraph:
    """Validate and fold batch-norm (no-op for graphs without BN)."""
    check_graph(g)
    if g.by_kind("BatchNorm"):
        g = fold_batchnorm(g)
    return check_graph(g)


@dataclass
class Calibration:
    sites: Dict[str, SiteStats]
    weights: Dict[str, Dict[str, CalibrationStats]]
    samples: int
    seed: int


def calibrate(folded: ModelGraph, inputs: np.ndarray, samples: int = 1000, seed: int = 0) -> Calibration:
    if folded.is_quantized:
        raise GraphError("calibrate the float model, not a quantized one")
    sites = run_calibration(insert_quant_nodes(folded, _SITE_PLAN), inputs, samples, seed)
    weights = {}
    for n in folded.nodes:
        if n.kind in WEIGHTED:
            w = folded.tensors[n.weight]
            weights[n.id] = {
                "channel": weight_stats(w, AxisGroup.channel(0)),
                "layer": weight_stats(w, AxisGroup.whole()),
            }
    return Calibration(sites, weights, samples, seed)


def activation_params(method: ScaleMethod, site: SiteStats, bits: int) -> QuantParams:
    stats = site.channel if method.kind is Method.BATCHQUANT else site.layer
    return compute_quant_params(method, AxisGroup.whole(), stats, bits, signed=False)


def plan_params(
    folded: ModelGraph, plan: QuantPlan, calib: Calibration,
) -> Tuple[Dict[str, QuantParams], Dict[str, QuantParams]]:
    """Weight params per layer and activation params per site; every failure is reported with its id."""
    errors: List[str] = []
    wparams: Dict[str, QuantParams] = {}
    sparams: Dict[str, QuantParams] = {}
    key = plan.weight_group
    for nid, stats in calib.weights.items():
        try:
            wparams[nid] = compute_quant_params(plan.wsm, plan.weight_axis_group, stats[key], plan.wl_w, True)
        except CalibrationError as e:
            errors.append(f"{nid}: {e}")
    for sid, site in calib.sites.items():
        if site.tag == "residual" and plan.residual == "fpres":
            continue
        try:
            sparams[sid] = activation_params(plan.asm, site, plan.wl_a)
        except CalibrationError as e:
            errors.append(f"{sid}: {e}")
    if errors:
        raise CalibrationError("; ".join(errors))
    return wparams, sparams


def quantize_graph(folded: ModelGraph, plan: QuantPlan, wparams, sparams) -> ModelGraph:
    return resolve_params(insert_quant_nodes(folded, plan), wparams, sparams)


# --- profile ------------------------------------------------------------------------


def make_profile(folded: ModelGraph, plan: QuantPlan, calib: Calibration) -> dict:
    """Per-site statistics and scales for ``plan``; degenerate sites are listed under ``errors``."""
    profile = {
        "format": PROFILE_FORMAT,
        "version": 1,
        "plan": plan.to_dict(),
        "calibration": {"samples": calib.samples, "seed": calib.seed},
        "weights": {},
        "activations": {},
        "errors": [],
    }
    for nid, stats in sorted(calib.weights.items()):
        group = stats[plan.weight_group]
        entry = {"tensor": folded.node(nid).weight, "group": plan.weight_group,
                 "stats": summary_to_dict(group.summary())}
        try:
            p = compute_quant_params(plan.wsm, plan.weight_axis_group, group, plan.wl_w, True)
            entry["params"] = scales_to_dict(p)
        except CalibrationError as e:
            profile["errors"].append(f"{nid}: {e}")
        profile["weights"][nid] = entry
    for sid, site in sorted(calib.sites.items()):
        ch = site.channel
        entry = {
            "tag": site.tag,
            "stats": summary_to_dict(site.layer.summary()),
            "channel_min": ch.min.tolist(),
            "channel_max": ch.max.tolist(),
        }
        try:
            entry["params"] = scales_to_dict(activation_params(plan.asm, site, plan.wl_a))
        except CalibrationError as e:
            profile["errors"].append(f"{sid}: {e}")
        profile["activations"][sid] = entry
    return profile


def _compatible(profile_plan: dict, plan: QuantPlan) -> List[str]:
    want = plan.to_dict()
    keys = ("wl_w", "wl_a", "wsm", "asm", "k_w", "k_a", "weight_group")
    return [f"{k}: profile has {profile_plan.get(k)!r}, plan wants {want[k]!r}"
            for k in keys if profile_plan.get(k) != want[k]]


def quantize_with_profile(folded: ModelGraph, plan: QuantPlan, profile: dict) -> ModelGraph:
    if folded.is_quantized:
        raise GraphError("model is already quantized")
    mismatch = _compatible(profile["plan"], plan)
    if mismatch:
        raise GraphError(["profile incompatible with plan: " + m for m in mismatch])
    wparams = {k: params_from_dict(v["params"]) for k, v in profile["weights"].items() if "params" in v}
    sparams = {k: params_from_dict(v["params"]) for k, v in profile["activations"].items() if "params" in v}
    return quantize_graph(folded, plan, wparams, sparams)


# --- evaluation -------------------------------------------------------------------------


def evaluate(
    g: ModelGraph,
    inputs: np.ndarray,
    labels: np.ndarray,
    energy: Optional[EnergyModel] = None,
    float_logits: Optional[np.ndarray] = None,
) -> ExperimentRecord:
    """Accuracy, MSEs and costs for a float or quantized model."""
    energy = energy or EnergyModel.default()
    if labels is None:
        raise ValueError("evaluation needs a labelled dataset")
    if float_logits is None:
        float_logits = predict(g, inputs, Mode.FLOAT)
    float_pred = np.argmax(float_logits, axis=1)
    plan = g.plan

    cost_graph = prepare(passthrough(g))
    wl_w, wl_a = (plan.wl_w, plan.wl_a) if plan else (32, 32)
    footprint = memory_footprint(cost_graph, wl_w, wl_a)
    rec = ExperimentRecord(
        plan=plan,
        footprint_bytes=footprint,
        energy_joules=energy_estimate(mac_count(cost_graph), energy, wl_w, wl_a),
        memory_energy_joules=memory_energy(footprint, energy),
    )
    if plan is None:
        rec.top1 = top1_accuracy(float_logits, labels)
        rec.agreement = 1.0
        return rec

    weights = quantized_weights(g)
    trace = Trace()
    logits = predict(g, inputs, Mode.FAKEQUANT, trace=trace, weights=weights)
    rec.top1 = top1_accuracy(logits, labels)
    rec.agreement = top1_accuracy(logits, float_pred)
    rec.weight_mse = {n.id: quant_mse(g.tensors[n.weight], weights[n.id]) for n in g.nodes if n.kind in WEIGHTED}
    rec.activation_mse = trace.mse()
    return rec


# --- sweeps -------------------------------------------------------------------------


def _plans(wls: Iterable[Tuple[int, int]], wsms, asms, k: float) -> List[QuantPlan]:
    out = []
    for (w, a), wsm, asm, group, res in itertools.product(wls, wsms, asms, ("channel", "layer"), ("fpres", "qres")):
        out.append(QuantPlan(w, a, ScaleMethod(wsm, k), ScaleMethod(asm, k), group, res))
    return out


STATISTICAL = (Method.ABSMAX, Method.ABSP)


def full_grid(k: float = DEFAULT_K, lo: int = 4, hi: int = 8) -> List[QuantPlan]:
    """All (wl_w, wl_a) in lo..hi squared, times the 16 statistical settings."""
    wls = [(w, a) for w in range(lo, hi + 1) for a in range(lo, hi + 1)]
    return _plans(wls, STATISTICAL, STATISTICAL, k)


def equal_grid(k: float = DEFAULT_K, lo: int = 6, hi: int = 8) -> List[QuantPlan]:
    return _plans([(b, b) for b in range(lo, hi + 1)], STATISTICAL, STATISTICAL, k)


def options_grid(k: float = DEFAULT_K, lo: int = 6, hi: int = 8) -> List[QuantPlan]:
    """Every compatible WSM x ASM pair, both distributions and residual modes, equal word-lengths."""
    wsms = (Method.ABSMAX, Method.ABSP, Method.LSQ, Method.LSQ_PLUS)
    asms = (Method.ABSMAX, Method.ABSP, Method.LSQ, Method.BATCHQUANT)
    return _plans([(b, b) for b in range(lo, hi + 1)], wsms, asms, k)


def sort_plans(plans: Iterable[QuantPlan]) -> List[QuantPlan]:
    return sorted(plans, key=lambda p: p.key())


_WORKER: dict = {}


def _init_worker(state: dict) -> None:
    _WORKER.clear()
    _WORKER.update(state)


def _run_plan(plan: QuantPlan) -> ExperimentRecord:
    s = _WORKER
    try:
        wparams, sparams = plan_params(s["folded"], plan, s["calib"])
        g = quantize_graph(s["folded"], plan, wparams, sparams)
        return evaluate(g, s["inputs"], s["labels"], s["energy"], s["float_logits"])
    except (CalibrationError, GraphError, ValueError, KeyError) as e:
        return ExperimentRecord(plan=plan, error=f"{type(e).__name__}: {e}")


def sweep(
    folded: ModelGraph,
    inputs: np.ndarray,
    labels: np.ndarray,
    plans: Iterable[QuantPlan],
    calib: Calibration,
    energy: Optional[EnergyModel] = None,
    jobs: int = 1,
    progress=None,
) -> List[ExperimentRecord]:
    """Evaluate every plan; rows come back in canonical plan order whatever the worker count."""
    plans = sort_plans(plans)
    state = {
        "folded": folded, "inputs": inputs, "labels": labels, "calib": calib,
        "energy": energy or EnergyModel.default(),
        "float_logits": predict(folded, inputs, Mode.FLOAT),
    }
    if jobs <= 1:
        _init_worker(state)
        out = []
        for p in plans:
            out.append(_run_plan(p))
            if progress:
                progress(len(out), len(plans))
        return out
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(state,)) as pool:
        return list(pool.map(_run_plan, plans))
