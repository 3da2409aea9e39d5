"""Command-line driver.

Exit codes: 0 success, 1 a frozen regression bound was violated, 2 usage or
contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import approxnl as nl
from .calib import allocate_groups, build_problem, collect_stats
from .fxp import FxError, FxFormat
from .groupquant import (
    GroupPlan,
    dequantize_group_tensor,
    fit_plan,
    quantize_group_tensor,
)
from .refmodel import (
    QuantConfig,
    SyntheticBlock,
    check_expectations,
    heavy_tailed_preset,
    simulate_block,
    sweep_error,
)
from .tensorio import (
    ConfigError,
    FramingError,
    RunConfig,
    Tensor,
    load_config,
    read_tensor,
    write_tensor,
)

REPORT_SCHEMA = "nlquant.report/1"
PLAN_SCHEMA = "nlquant.plan/1"
TENSOR_SUFFIX = ".qtns"

log = logging.getLogger("nlquant")


class UsageError(Exception):
    pass


def make_report(command: str, config: RunConfig, metrics: dict, seed=None) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "command": command,
        "config": config.to_dict(),
        "metrics": metrics,
        "provenance": {
            "seed": config.seed if seed is None else seed,
            "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    }


def _emit(report: dict, out) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n")


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _fmt(cfg: RunConfig) -> FxFormat:
    return FxFormat(cfg.total_bits, cfg.frac_bits)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    cfg = _config(args)
    domain = args.domain or cfg.sweep_domains[args.kernel]
    report = sweep_error(args.kernel, domain, _fmt(cfg), extended=args.extended,
                         vectors=args.vectors, length=args.length, seed=cfg.seed)
    applicable, ok, bounds = check_expectations(report)
    metrics = report.to_dict()
    metrics["frozen_bounds"] = bounds if applicable else None
    metrics["within_bounds"] = ok
    csv = args.csv
    if csv is None and args.out is not None:
        csv = Path(args.out).with_suffix(".csv")
    if csv is not None:
        report.write_csv(csv)
        metrics["csv"] = str(csv)
    _emit(make_report("sweep", cfg, metrics), args.out)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def _layer_files(root: Path) -> dict[str, list[Path]]:
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if subdirs:
        layers = {d.name: sorted(d.glob("*" + TENSOR_SUFFIX)) for d in subdirs}
    else:
        layers = {root.name: sorted(root.glob("*" + TENSOR_SUFFIX))}
    empty = [name for name, files in layers.items() if not files]
    if empty:
        raise UsageError(f"layer {empty[0]!r} has no {TENSOR_SUFFIX} samples")
    return layers


def _load_samples(files: list[Path]) -> list[np.ndarray]:
    samples = []
    shape = None
    for f in files:
        x = read_tensor(f).dequantized()
        if x.ndim == 0:
            raise UsageError(f"{f}: scalar sample has no channel axis")
        if shape is None:
            shape = x.shape
        elif x.shape != shape:
            raise UsageError(f"{f}: shape {x.shape} differs from {shape} of {files[0].name}")
        samples.append(x)
    return samples


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    layers = _layer_files(Path(args.activations))
    stacked, stats = {}, {}
    for name, files in layers.items():
        samples = _load_samples(files)
        stats[name] = collect_stats(samples)
        stacked[name] = np.concatenate([s.reshape(-1, s.shape[-1]) for s in samples])
        if stats[name].min.min() == stats[name].max.max():
            log.warning("layer %s: calibration data is constant; plan is degenerate", name)

    budget = math.inf if cfg.bop_budget is None else cfg.bop_budget
    names, problem = build_problem(stacked, cfg.bits, budget, cfg.candidate_groups,
                                   cfg.clamp_percentile)
    groups = allocate_groups(problem)

    plan_layers, metrics_layers = {}, {}
    for name, g, choice in zip(names, groups, problem.layers):
        plan = fit_plan(stacked[name], g, cfg.bits, cfg.clamp_percentile, snap=cfg.snap)
        plan_layers[name] = plan.to_dict()
        metrics_layers[name] = {
            "groups": g,
            "bop": problem.bop(names.index(name), g),
            "kl_costs": {str(c): cost for c, cost in zip(choice.candidates, choice.costs)},
            "k": plan.k.tolist(),
            "stats": stats[name].summary(),
        }
    plan_doc = {"schema": PLAN_SCHEMA, "bits": cfg.bits, "layers": plan_layers}
    Path(args.out).write_text(json.dumps(plan_doc, indent=2) + "\n")
    metrics = {
        "plan": str(args.out),
        "total_bop": problem.total_bop(groups),
        "objective": problem.objective(groups),
        "layers": metrics_layers,
    }
    _emit(make_report("calibrate", cfg, metrics), args.report)
    return 0


def load_plans(path) -> dict[str, GroupPlan]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not a plan file ({exc})") from None
    if doc.get("schema") != PLAN_SCHEMA:
        raise UsageError(f"{path}: expected schema {PLAN_SCHEMA}")
    return {name: GroupPlan.from_dict(d) for name, d in doc["layers"].items()}


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    cfg = _config(args)
    plans = load_plans(args.plan)
    if args.layer is None:
        if len(plans) != 1:
            raise UsageError(f"plan has layers {sorted(plans)}; pick one with --layer")
        layer = next(iter(plans))
    elif args.layer not in plans:
        raise UsageError(f"layer {args.layer!r} not in plan (have {sorted(plans)})")
    else:
        layer = args.layer
    plan = plans[layer]
    x = read_tensor(args.tensor).dequantized()
    if x.ndim == 0 or x.shape[-1] != plan.n_channels:
        raise UsageError(f"tensor has {x.shape[-1] if x.ndim else 0} channels, "
                         f"plan {layer!r} covers {plan.n_channels}")
    q = quantize_group_tensor(x, plan)
    codes = q.codes.astype(np.int8 if plan.bits <= 8 else np.int32)
    write_tensor(args.out, Tensor(codes, meta={"layer": layer, "order": "permuted",
                                               "plan": plan.to_dict()}))
    recon = dequantize_group_tensor(q)
    metrics = {
        "layer": layer,
        "out": str(args.out),
        "shape": list(codes.shape),
        "reconstruction_mse": float(np.mean((recon - x) ** 2)),
        "clamped": int(np.count_nonzero(np.abs(q.codes) == plan.q_max)),
    }
    _emit(make_report("quantize", cfg, metrics), args.report)
    return 0


# ---------------------------------------------------------------------------
# simulate / census
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    block = heavy_tailed_preset(seed) if args.preset == "heavy-tailed" else SyntheticBlock(seed=seed)
    bits = cfg.bits if args.bits is None else args.bits
    quant = QuantConfig(bits, args.groups, cfg.clamp_percentile, cfg.snap)
    res = simulate_block(block, "integer", quant, _fmt(cfg))
    metrics = {
        "preset": args.preset,
        "bits": bits,
        "groups": args.groups,
        **res.metrics,
        "op_counts": res.counter.as_dict(),
        "plans": {site: {"groups": p.n_groups, "k": p.k.tolist(), "base_scale": p.base_scale}
                  for site, p in res.plans.items()},
    }
    _emit(make_report("simulate", cfg, metrics, seed=seed), args.out)
    return 0


def cmd_census(args) -> int:
    cfg = _config(args)
    counter = nl.op_census(args.kernel, args.size, fmt=_fmt(cfg))
    _emit(make_report("census", cfg, {"kernel": args.kernel, "size": args.size,
                                      **counter.as_dict()}), args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlquant", allow_abbrev=False,
                                description="Integer-only nonlinear kernels and group quantization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON run configuration")

    s = sub.add_parser("sweep", allow_abbrev=False, help="kernel error sweep against its oracle")
    common(s)
    s.add_argument("--kernel", required=True, choices=nl.KERNELS)
    s.add_argument("--domain", help="lo:hi:step or int8 (default from config)")
    s.add_argument("--extended", action="store_true", help="allow positive exp inputs")
    s.add_argument("--vectors", type=int, default=256, help="rows for vector kernels")
    s.add_argument("--length", type=int, default=64, help="row length for vector kernels")
    s.add_argument("--out", help="report path (default: stdout)")
    s.add_argument("--csv", help="pointwise CSV path (default: next to --out)")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("calibrate", allow_abbrev=False, help="build group plans from samples")
    common(c)
    c.add_argument("--activations", required=True, help="directory of per-layer sample tensors")
    c.add_argument("--out", required=True, help="plan file to write")
    c.add_argument("--report", help="report path (default: stdout)")
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quantize", allow_abbrev=False, help="group-quantize a tensor with a plan")
    common(q)
    q.add_argument("--tensor", required=True)
    q.add_argument("--plan", required=True)
    q.add_argument("--layer", help="plan layer (required if the plan has several)")
    q.add_argument("--out", required=True, help="quantized tensor file to write")
    q.add_argument("--report", help="report path (default: stdout)")
    q.set_defaults(func=cmd_quantize)

    m = sub.add_parser("simulate", allow_abbrev=False, help="integer vs fp32 synthetic block")
    common(m)
    m.add_argument("--seed", type=int)
    m.add_argument("--preset", choices=("default", "heavy-tailed"), default="default")
    m.add_argument("--bits", type=int, choices=(4, 6, 8, 16, 32))
    m.add_argument("--groups", type=int, default=8)
    m.add_argument("--out", help="report path (default: stdout)")
    m.set_defaults(func=cmd_simulate)

    k = sub.add_parser("census", allow_abbrev=False, help="primitive-operation counts of a kernel")
    common(k)
    k.add_argument("--kernel", required=True, choices=nl.KERNELS)
    k.add_argument("--size", type=int, default=64)
    k.add_argument("--out", help="report path (default: stdout)")
    k.set_defaults(func=cmd_census)
    return p


def _glue_negative_values(argv: list[str]) -> list[str]:
    # "--domain -6:6:0.001" would otherwise parse as a flag
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--domain" and i + 1 < len(argv):
            out.append(f"--domain={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_glue_negative_values(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FramingError, FxError, ValueError, OSError) as exc:
        print(f"nlquant {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
