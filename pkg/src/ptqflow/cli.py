"""Command-line entry point: fixtures | calibrate | quantize | eval | sweep | report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import pipeline
from .calibration import DEFAULT_K, CalibrationError, ScaleMethod, read_profile, write_profile
from .engine import load_dataset
from .fixtures import FixtureSpec, write_fixture
from .graph import GraphError, QuantPlan, load_model, save_model
from .metrics import COLUMNS, EnergyModel, build_report, emit_sweep_report, pareto_rows, read_rows, write_rows
from .tensor import TensorFormatError

log = logging.getLogger("ptqflow")

DEFAULTS = {
    "wl_w": 8,
    "wl_a": 8,
    "wsm": "absp",
    "asm": "absp",
    "weight_group": "channel",
    "residual": "fpres",
    "percentile_k": DEFAULT_K,
    "calib_samples": 1000,
    "seed": 0,
    "jobs": 1,
    "study": "full",
    "blocks": 2,
    "dataset_size": 1000,
}


class UsageError(Exception):
    pass


def read_config(path) -> Dict[str, str]:
    """Flat ``key = value`` file; keys use flag spelling (``wl-w`` or ``wl_w``)."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--wl-w", type=int, help="weight word-length in bits (default 8)")
    p.add_argument("--wl-a", type=int, help="activation word-length in bits (default 8)")
    p.add_argument("--wsm", help="weight scale method: absmax|absp|lsq|lsqplus (default absp)")
    p.add_argument("--asm", help="activation scale method: absmax|absp|lsq|batchquant (default absp)")
    p.add_argument("--weight-group", choices=["channel", "layer"])
    p.add_argument("--residual", choices=["fpres", "qres"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptqflow", description="Post-training quantization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file or directory")
        return p

    p = common(sub.add_parser("fixtures", help="generate the toy model and dataset"))
    p.add_argument("--blocks", type=int)
    p.add_argument("--dataset-size", type=int)
    p.add_argument("--heavy-tail", action="store_true", help="inject 1%% x10 weight outliers")

    p = common(sub.add_parser("calibrate", help="write a calibration profile"))
    p.add_argument("--model")
    p.add_argument("--dataset")
    _add_plan_flags(p)
    p.add_argument("--percentile-k", type=float)
    p.add_argument("--calib-samples", type=int)

    p = common(sub.add_parser("quantize", help="build a fake-quantized model from a profile"))
    p.add_argument("--model")
    p.add_argument("--profile")
    _add_plan_flags(p)
    p.add_argument("--percentile-k", type=float)

    p = common(sub.add_parser("eval", help="evaluate a float or quantized model"))
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--energy-model")

    p = common(sub.add_parser("sweep", help="run a word-length / quantization-option grid"))
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--study", choices=["full", "equal", "options"],
                   help="full: 4-8 bit grid; equal: 6-8 bit equal word-lengths; options: all methods at 6-8 bit")
    p.add_argument("--percentile-k", type=float)
    p.add_argument("--calib-samples", type=int)
    p.add_argument("--energy-model")
    p.add_argument("--jobs", type=int)

    p = common(sub.add_parser("report", help="Pareto fronts and acc_diff histograms from a sweep"))
    p.add_argument("--sweep", help="sweep.csv written by the sweep command")
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge config file values and defaults under explicit flags."""
    config = read_config(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if value is not None and value is not False:
            continue
        if key in config:
            default = DEFAULTS.get(key)
            if isinstance(default, bool) or key == "heavy_tail":
                value = config[key].lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                value = int(config[key])
            elif isinstance(default, float):
                value = float(config[key])
            else:
                value = config[key]
        elif key in DEFAULTS:
            value = DEFAULTS[key]
        setattr(args, key, value)
    return args


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def plan_from_args(args) -> QuantPlan:
    k = float(args.percentile_k)
    return QuantPlan(
        int(args.wl_w), int(args.wl_a),
        ScaleMethod.parse(args.wsm, k), ScaleMethod.parse(args.asm, k),
        args.weight_group, args.residual,
    )


def _energy(args) -> EnergyModel:
    return EnergyModel.load(args.energy_model) if args.energy_model else EnergyModel.default()


def _load_data(path):
    inputs, labels = load_dataset(path)
    return inputs, labels


def cmd_fixtures(args) -> int:
    _need(args, "out")
    spec = FixtureSpec(seed=args.seed, blocks=args.blocks, dataset_size=args.dataset_size,
                       heavy_tail=bool(args.heavy_tail))
    paths = write_fixture(spec, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_calibrate(args) -> int:
    _need(args, "model", "dataset", "out")
    plan = plan_from_args(args)
    folded = pipeline.prepare(load_model(args.model))
    inputs, _ = _load_data(args.dataset)
    calib = pipeline.calibrate(folded, inputs, args.calib_samples, args.seed)
    profile = pipeline.make_profile(folded, plan, calib)
    write_profile(args.out, profile)
    if profile["errors"]:
        raise CalibrationError("; ".join(profile["errors"]))
    print(f"profile: {args.out} ({len(profile['weights'])} layers, {len(profile['activations'])} sites)")
    return 0


def cmd_quantize(args) -> int:
    _need(args, "model", "profile", "out")
    g = load_model(args.model)
    if g.is_quantized:
        raise GraphError(f"{args.model} is already quantized")
    plan = plan_from_args(args)
    q = pipeline.quantize_with_profile(pipeline.prepare(g), plan, read_profile(args.profile))
    save_model(q, args.out)
    print(f"quantized model: {args.out} ({len(q.quant_sites())} quant nodes)")
    return 0


def _print_record(rec) -> None:
    p = rec.plan
    tag = f"{p.wl_w}/{p.wl_a} {p.wsm.name}/{p.asm.name} {p.weight_group} {p.residual}" if p else "float"
    print(f"{tag}: top1={rec.top1:.4f} agreement={rec.agreement:.4f} "
          f"weight_mse={rec.weight_mse_mean:.3e} activation_mse={rec.activation_mse_mean:.3e} "
          f"footprint={rec.footprint_bytes:.0f}B energy={rec.energy_joules:.3e}J")


def cmd_eval(args) -> int:
    _need(args, "model", "dataset")
    g = load_model(args.model)
    inputs, labels = _load_data(args.dataset)
    if labels is None:
        raise UsageError(f"{args.dataset}: no label sidecar found")
    rec = pipeline.evaluate(g, inputs, labels, _energy(args))
    _print_record(rec)
    if args.out:
        Path(args.out).write_text(json.dumps(rec.to_dict(), indent=1, sort_keys=True) + "\n")
        write_rows(Path(args.out).with_suffix(".csv"), [rec.row()], COLUMNS)
    return 0


def cmd_sweep(args) -> int:
    _need(args, "model", "dataset", "out")
    k = float(args.percentile_k)
    plans = {"full": pipeline.full_grid, "equal": pipeline.equal_grid, "options": pipeline.options_grid}[args.study](k)
    folded = pipeline.prepare(load_model(args.model))
    inputs, labels = _load_data(args.dataset)
    if labels is None:
        raise UsageError(f"{args.dataset}: no label sidecar found")
    calib = pipeline.calibrate(folded, inputs, args.calib_samples, args.seed)

    def progress(done, total):
        log.info("sweep %d/%d", done, total)

    records = pipeline.sweep(folded, inputs, labels, plans, calib, _energy(args), args.jobs, progress)
    paths = emit_sweep_report(records, args.out)
    failed = [r for r in records if r.error]
    print(f"sweep: {len(records)} rows -> {paths['table']}")
    if failed:
        print(json.dumps({"errors": [f"row {records.index(r)}: {r.error}" for r in failed]}), file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    _need(args, "sweep", "out")
    rows = read_rows(args.sweep)
    report = build_report(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    cols = ["row"] + list(rows[0].keys())
    write_rows(out / "pareto_footprint.csv", pareto_rows(rows, report["pareto_footprint"]), cols)
    write_rows(out / "pareto_energy.csv", pareto_rows(rows, report["pareto_energy"]), cols)
    print(f"report: {out / 'report.json'} (pareto footprint {len(report['pareto_footprint'])}, "
          f"energy {len(report['pareto_energy'])})")
    return 0


COMMANDS = {
    "fixtures": cmd_fixtures,
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except (UsageError, GraphError, CalibrationError, TensorFormatError, ValueError, KeyError, OSError) as e:
        errors = e.errors if isinstance(e, GraphError) else [str(e)]
        print(json.dumps({"command": args.command, "errors": errors}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
