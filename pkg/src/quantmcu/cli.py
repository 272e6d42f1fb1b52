"""Command-line interface.

Subcommands: ``inspect`` (static shape/MAC/overlap analysis), ``plan``
(build and report a quantization plan), ``simulate`` (plan plus per-sample
dynamic classification), and ``sweep`` (phi or lambda grids). Exit codes:
0 success, 2 bad input, 3 infeasible memory constraint.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline, refengine
from .errors import Infeasible, QuantMCUError
from .netgraph import (
    NetworkSpec,
    infer_shapes,
    load_network,
    mac_count,
    redundancy_ratio,
    split_patches,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3


def _parse_candidates(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad candidate list {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("candidate list is empty")
    return values


def _parse_grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantmcu",
        description="Value-driven mixed-precision quantization planner for "
                    "patch-based CNN inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("net", help="network description file (JSON)")
        p.add_argument("--strict-grid", action="store_true",
                       help="reject patch grids that do not tile evenly")

    def add_planning(p):
        p.add_argument("--calibration", required=True,
                       help="directory of .qmtn calibration tensors")
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--seed", type=int,
                           help="seed for synthetic Gaussian weights")
        group.add_argument("--weights",
                           help="weight pack file (concatenated QMTN records)")
        p.add_argument("-o", "--output", required=True, help="report file (JSON)")
        p.add_argument("--phi", type=float, default=pipeline.DEFAULT_PHI,
                       help="outlier threshold in [0, 1) (default %(default)s)")
        p.add_argument("--lambda", dest="lam", type=float,
                       default=pipeline.DEFAULT_LAMBDA,
                       help="accuracy/computation weight in [0, 1] "
                            "(default %(default)s)")
        p.add_argument("-k", "--bins", type=int, default=256,
                       help="entropy histogram bins (default %(default)s)")
        p.add_argument("--mem-limit", type=int, default=None,
                       help="adjacent-pair memory budget in bytes "
                            "(default: unconstrained)")
        p.add_argument("--candidates", type=_parse_candidates, default=(8, 4, 2),
                       help="candidate bitwidths, e.g. 8,4,2 (default 8,4,2)")
        p.add_argument("--eq1-literal", action="store_true",
                       help="threshold the raw Gaussian density instead of the "
                            "normalized tail rule")
        p.add_argument("--phi-baseline", choices=("int8", "fp32"), default="int8",
                       help="BitOPs baseline that normalizes the Phi score")
        p.add_argument("--dynamic", action="store_true",
                       help="also simulate per-sample dynamic patch classes")

    p_inspect = sub.add_parser("inspect", help="print shapes, MACs, and overlap")
    add_common(p_inspect)
    p_inspect.add_argument("-o", "--output", default=None,
                           help="optional JSON report file")

    p_plan = sub.add_parser("plan", help="build a quantization plan")
    add_common(p_plan)
    add_planning(p_plan)

    p_sim = sub.add_parser("simulate",
                           help="plan and simulate per-sample dynamic classes")
    add_common(p_sim)
    add_planning(p_sim)

    p_sweep = sub.add_parser("sweep", help="sweep phi or lambda over a grid")
    add_common(p_sweep)
    add_planning(p_sweep)
    p_sweep.add_argument("--param", choices=("phi", "lambda"), required=True)
    p_sweep.add_argument("--grid", type=_parse_grid, required=True,
                         help="comma-separated strictly increasing values")

    return parser


def _config_from_args(args) -> pipeline.PlanConfig:
    return pipeline.PlanConfig(
        phi=args.phi, lam=args.lam, bins=args.bins, mem_limit=args.mem_limit,
        candidates=args.candidates, phi_baseline=args.phi_baseline,
        eq1_literal=args.eq1_literal, strict_grid=args.strict_grid,
        dynamic=args.dynamic or args.command == "simulate",
        seed=args.seed,
    )


def _load_inputs(args) -> tuple[NetworkSpec, refengine.WeightSet,
                                refengine.CalibrationSet]:
    net = load_network(args.net)
    if args.weights is not None:
        weights = refengine.load_weight_pack(args.weights, net)
    else:
        weights = refengine.synthetic_weights(net, args.seed)
    cal = refengine.load_calibration(args.calibration)
    return net, weights, cal


def cmd_inspect(args) -> int:
    net = load_network(args.net)
    shapes = infer_shapes(net)
    macs = mac_count(net, shapes)
    branches = split_patches(net, strict=args.strict_grid)
    ratio = redundancy_ratio(net, branches)

    print(f"network {net.name}: input "
          f"{shapes[0].height}x{shapes[0].width}x{shapes[0].channels}, "
          f"{net.num_layers} layers, patch grid "
          f"{net.patch_grid[0]}x{net.patch_grid[1]} at depth {net.patch_depth}")
    print(f"{'layer':>5}  {'kind':<14} {'output':<12} {'MACs':>12}")
    for j, layer in enumerate(net.layers):
        out = shapes[j + 1]
        print(f"{j:>5}  {layer.kind:<14} "
              f"{f'{out.height}x{out.width}x{out.channels}':<12} {macs[j]:>12}")
    print(f"total MACs: {sum(macs)}")
    print("branches:")
    for b in branches:
        r0 = b.regions[0]
        rs = b.regions[-1]
        print(f"  patch {b.patch_id}: input rows [{r0.row_start},{r0.row_end}) "
              f"cols [{r0.col_start},{r0.col_end}) -> tile rows "
              f"[{rs.row_start},{rs.row_end}) cols [{rs.col_start},{rs.col_end})")
    print(f"redundancy ratio: {ratio:.4f}")

    if args.output:
        doc = {
            "network": net.name,
            "shapes": [[s.height, s.width, s.channels] for s in shapes],
            "macs": macs,
            "branches": [
                {
                    "patch_id": list(b.patch_id),
                    "regions": [[r.row_start, r.row_end, r.col_start, r.col_end]
                                for r in b.regions],
                    "overlap_elements": list(b.overlap_elements),
                }
                for b in branches
            ],
            "redundancy_ratio": ratio,
        }
        pipeline.save_report(args.output, doc)
    return EXIT_OK


def _format_factor(base: float, new: float) -> str:
    if new <= 0:
        return "n/a"
    return f"{base / new:.2f}x"


def _print_plan_summary(plan: pipeline.QuantPlan) -> None:
    outlier = sum(1 for bp in plan.branches
                  if bp.label.value == "outlier")
    total = len(plan.branches)
    print(f"patch classes: {outlier} outlier / {total - outlier} non-outlier "
          f"of {total}")

    histogram: dict[int, int] = {}
    for bp in plan.branches:
        for b in bp.bits:
            histogram[b] = histogram.get(b, 0) + 1
    for b in plan.post_stage_bits:
        histogram[b] = histogram.get(b, 0) + 1
    hist = ", ".join(f"{b}-bit: {histogram[b]}" for b in sorted(histogram,
                                                                reverse=True))
    print(f"bitwidth histogram (feature maps): {hist}")

    t = plan.totals
    print(f"BitOPs layer-based(8b): {t['bitops_layer_based']:.3e}")
    print(f"BitOPs patch-based(8b): {t['bitops_patch8']:.3e}  "
          f"(redundancy ratio {t['redundancy_ratio']:.3f})")
    print(f"BitOPs plan:            {t['bitops_plan']:.3e}  "
          f"({_format_factor(t['bitops_patch8'], t['bitops_plan'])} vs patch8, "
          f"{_format_factor(t['bitops_layer_based'], t['bitops_plan'])} vs "
          f"layer-based)")
    print(f"peak memory patch8: {t['peak_mem_patch8']} B, plan: "
          f"{t['peak_mem_plan']} B "
          f"({_format_factor(t['peak_mem_patch8'], t['peak_mem_plan'])})")
    sqnr = plan.fidelity.sqnr_db
    print(f"SQNR: {'n/a' if sqnr is None else f'{sqnr:.2f} dB'}", end="")
    if plan.fidelity.agreement is not None:
        print(f", top-1 agreement: {plan.fidelity.agreement:.3f}", end="")
    print()
    if plan.dynamic is not None:
        print(f"dynamic mode: mean BitOPs {plan.dynamic['bitops_plan_mean']:.3e}, "
              f"mean outlier fraction {plan.dynamic['outlier_fraction_mean']:.3f}")
    for note in plan.warnings:
        print(f"warning: {note}")


def cmd_plan(args) -> int:
    net, weights, cal = _load_inputs(args)
    cfg = _config_from_args(args)
    plan = pipeline.build_plan(net, weights, cal, cfg)
    pipeline.save_report(args.output, pipeline.plan_to_dict(plan))
    _print_plan_summary(plan)
    print(f"report written to {args.output}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    net, weights, cal = _load_inputs(args)
    cfg = _config_from_args(args)
    result = pipeline.sweep(net, weights, cal, cfg, args.param, args.grid)
    doc = {
        "config": {
            "phi": cfg.phi, "lambda": cfg.lam, "k": cfg.bins, "M": cfg.mem_limit,
            "candidates": list(cfg.candidates), "seed": cfg.seed,
        },
    }
    doc.update(pipeline.sweep_to_dict(result))
    pipeline.save_report(args.output, doc)

    print(f"sweep over {result.param}:")
    print(f"{result.param:>8}  {'BitOPs plan':>14}  {'outlier frac':>12}  "
          f"{'SQNR dB':>9}")
    for row in result.rows:
        if row.error:
            print(f"{row.value:>8.3f}  {row.error}")
            continue
        sqnr = "n/a" if row.sqnr_db is None else f"{row.sqnr_db:9.2f}"
        print(f"{row.value:>8.3f}  {row.bitops_plan:>14.4e}  "
              f"{row.outlier_fraction:>12.3f}  {sqnr}")
    print(f"report written to {args.output}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args)
        if args.command in ("plan", "simulate"):
            return cmd_plan(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        parser.error(f"unknown command {args.command}")
    except Infeasible as exc:
        print(f"error: infeasible: {exc} (branch {exc.branch_id})",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    except (QuantMCUError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
