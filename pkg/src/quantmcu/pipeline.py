"""End-to-end planning pipeline.

calibrate -> fit -> classify -> score -> search -> evaluate. Produces a
QuantPlan with computation/memory totals against the layer-based and
all-8-bit patch-based baselines, output-fidelity metrics, and a JSON
report. Sweeps rebuild plans across a parameter grid while reusing the
calibration work.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import actstats, netgraph, refengine, vdpc, vdqs
from .errors import Infeasible, ZeroBitops
from .netgraph import MemoryModel, NetworkSpec
from .refengine import CalibrationSet, WeightSet
from .vdpc import PatchLabel, Policy

SQNR_CAP_DB = 300.0

DEFAULT_PHI = 0.96
DEFAULT_LAMBDA = 0.6


@dataclass(frozen=True)
class PlanConfig:
    phi: float = DEFAULT_PHI
    lam: float = DEFAULT_LAMBDA
    bins: int = actstats.DEFAULT_BINS
    mem_limit: int | None = None
    candidates: tuple[int, ...] = vdqs.DEFAULT_CANDIDATES
    b_last: int = 8
    phi_baseline: str = "int8"
    eq1_literal: bool = False
    strict_grid: bool = False
    dynamic: bool = False
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must be in [0, 1), got {self.phi}")
        self.search_config()  # validates the shared fields

    def search_config(self) -> vdqs.SearchConfig:
        return vdqs.SearchConfig(
            lam=self.lam, candidates=self.candidates, bins=self.bins,
            mem_limit=self.mem_limit, b_last=self.b_last,
            phi_baseline=self.phi_baseline,
        )


@dataclass
class BranchPlan:
    patch_id: tuple[int, int]
    label: PatchLabel
    policy: Policy
    bits: tuple[int, ...]            # feature maps 0..patch_depth
    table: vdqs.QuantScoreTable | None


@dataclass
class Fidelity:
    sqnr_db: float | None
    agreement: float | None


@dataclass
class QuantPlan:
    config: dict
    branches: list[BranchPlan]
    post_stage_bits: tuple[int, ...]  # feature maps patch_depth+1 .. N
    totals: dict
    fidelity: Fidelity
    warnings: list[str]
    sample_labels: list[list[PatchLabel]] = field(default_factory=list)
    dynamic: dict | None = None


@dataclass
class SweepRow:
    value: float
    bitops_plan: float | None
    outlier_fraction: float | None
    sqnr_db: float | None
    agreement: float | None
    error: str | None = None


@dataclass
class SweepResult:
    param: str
    grid: tuple[float, ...]
    rows: list[SweepRow]


def worker_count(tasks: int) -> int:
    """Parallelism cap from QUANTMCU_THREADS (0 or unset = auto)."""
    raw = os.environ.get("QUANTMCU_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, tasks))


class PlanContext:
    """Calibration-dependent state shared by every plan built on one setup.

    Everything here is independent of phi and lambda, so sweeps pay for
    the forward passes, pools, ranges, and entropy cells exactly once.
    """

    def __init__(self, net: NetworkSpec, weights: WeightSet, cal: CalibrationSet,
                 strict_grid: bool = False):
        self.net = net
        self.weights = weights
        self.qweights = weights.quantized8()
        self.cal = cal
        self.shapes = netgraph.infer_shapes(net)
        self.branches = netgraph.split_patches(net, strict=strict_grid)
        self.pools = refengine.calibrate(net, weights, cal, self.branches)
        self.depth = net.patch_depth
        self.num_layers = net.num_layers

        # pools and min/max ranges
        self._branch_pools = [
            [self.pools.branch_pool(bi, d) for d in range(self.depth + 1)]
            for bi in range(len(self.branches))
        ]
        self._full_pools = [self.pools.full_pool(d)
                            for d in range(self.num_layers + 1)]
        self.branch_ranges = [
            [actstats.calibration_range(pool) for pool in per_branch]
            for per_branch in self._branch_pools
        ]
        self.full_ranges = [actstats.calibration_range(p) for p in self._full_pools]

        # MAC accounting
        self.full_macs = netgraph.mac_count(net, self.shapes)
        self.branch_shapes = [netgraph.branch_shapes(net, b) for b in self.branches]
        self.branch_macs = [netgraph.mac_count(net, bs) for bs in self.branch_shapes]

        patch_macs = sum(sum(bm) for bm in self.branch_macs)
        post_macs = sum(self.full_macs[self.depth:])
        self.bitops_layer_based = netgraph.bitops(
            self.full_macs, vdqs.WEIGHT_BITS, [8] * self.num_layers
        )
        self.bitops_patch8 = (patch_macs + post_macs) * vdqs.WEIGHT_BITS * 8
        self.redundancy = netgraph.redundancy_ratio(net, self.branches)

        self.gaussian = actstats.fit_gaussian(self._full_pools[0])
        self._raw_tables: dict = {}

    # -- score tables ----------------------------------------------------------

    def branch_stats(self, bi: int) -> list[vdqs.MapStats]:
        rows = []
        for d in range(self.depth + 1):
            consumer = float(self.branch_macs[bi][d]) if d < self.depth else 0.0
            rows.append(vdqs.MapStats(
                index=d,
                elements=self.branch_shapes[bi][d].elements,
                consumer_macs=consumer,
                pool=self._branch_pools[bi][d],
                value_range=self.branch_ranges[bi][d],
            ))
        return rows

    def post_stats(self, stitched_mem: int) -> list[vdqs.MapStats]:
        s = self.depth
        # the merge layer consumes the pinned map, so its MACs still count
        # toward the chain total that normalizes Phi
        rows = [vdqs.MapStats(
            index=s, elements=self.shapes[s].elements,
            consumer_macs=float(self.full_macs[s]),
            pool=None, value_range=None, pinned_bits=8, fixed_mem=stitched_mem,
        )]
        for d in range(s + 1, self.num_layers + 1):
            consumer = float(self.full_macs[d]) if d < self.num_layers else 0.0
            rows.append(vdqs.MapStats(
                index=d, elements=self.shapes[d].elements,
                consumer_macs=consumer,
                pool=self._full_pools[d], value_range=self.full_ranges[d],
            ))
        return rows

    def score_table(self, key, stats: list[vdqs.MapStats],
                    cfg: vdqs.SearchConfig) -> vdqs.QuantScoreTable:
        """Build (or re-score) a chain's table; entropy cells are cached."""
        cache_key = (key, cfg.bins, cfg.b_last, cfg.phi_baseline, cfg.candidates)
        base = self._raw_tables.get(cache_key)
        if base is None:
            base = vdqs.build_score_table(key, stats, cfg)
            self._raw_tables[cache_key] = base
        return rescore_table(base, cfg.lam)

    # -- simulation ------------------------------------------------------------

    def simulate_sample(self, sample_index: int, branch_bits: list[tuple[int, ...]],
                        post_bits: tuple[int, ...]) -> np.ndarray:
        """Quantized output map for one calibration sample under a plan."""
        x = self.cal.samples[sample_index]
        s = self.depth
        if (all(b == actstats.IDENTITY_BITS for bits in branch_bits for b in bits)
                and all(b == actstats.IDENTITY_BITS for b in post_bits)):
            return self.pools.full_maps[sample_index][-1]
        tiles = []
        for bi, branch in enumerate(self.branches):
            maps = refengine.forward_branch(
                self.net, self.weights, x, branch,
                bits=list(branch_bits[bi]), ranges=self.branch_ranges[bi],
                quantized_weights=self.qweights,
            )
            tiles.append(maps[-1])
        fmap = refengine.stitch(
            self.branches, tiles, s,
            (self.shapes[s].height, self.shapes[s].width, self.shapes[s].channels),
        )
        return refengine.forward_tail(
            self.net, self.qweights, fmap, s,
            bits=list(post_bits),
            ranges=[self.full_ranges[d] for d in range(s + 1, self.num_layers + 1)],
        )

    def fidelity(self, branch_bits: list[tuple[int, ...]],
                 post_bits: tuple[int, ...],
                 sample_indices=None) -> Fidelity:
        indices = range(len(self.cal)) if sample_indices is None else sample_indices
        sqnrs, agreements = [], []
        ends_in_fc = self.net.layers[-1].kind == "fc"
        for si in indices:
            ref = self.pools.full_maps[si][-1].astype(np.float64)
            out = self.simulate_sample(si, branch_bits, post_bits).astype(np.float64)
            signal = float((ref ** 2).sum())
            noise = float(((ref - out) ** 2).sum())
            if noise == 0.0:
                sqnrs.append(None if signal == 0.0 else SQNR_CAP_DB)
            elif signal == 0.0:
                sqnrs.append(-SQNR_CAP_DB)
            else:
                sqnrs.append(
                    min(10.0 * math.log10(signal / noise), SQNR_CAP_DB))
            if ends_in_fc:
                agreements.append(
                    float(np.argmax(ref.ravel()) == np.argmax(out.ravel())))
        defined = [v for v in sqnrs if v is not None]
        return Fidelity(
            sqnr_db=float(np.mean(defined)) if defined else None,
            agreement=float(np.mean(agreements)) if ends_in_fc else None,
        )

    # -- totals ----------------------------------------------------------------

    def stitched_mem(self, branch_bits: list[tuple[int, ...]]) -> int:
        s = self.depth
        return sum(
            MemoryModel.mem(self.branch_shapes[bi][s].elements, bits[s])
            for bi, bits in enumerate(branch_bits)
        )

    def bitops_plan(self, branch_bits: list[tuple[int, ...]],
                    post_bits: tuple[int, ...]) -> float:
        s = self.depth
        total = 0.0
        for bi, bits in enumerate(branch_bits):
            for j in range(s):
                total += self.branch_macs[bi][j] * vdqs.WEIGHT_BITS * bits[j]
        if s < self.num_layers:
            # the merge layer reads the stitched map: tiles carry their
            # branch's bits, weighted by tile size
            n_map = self.shapes[s].elements
            mix = sum(
                self.branch_shapes[bi][s].elements * bits[s]
                for bi, bits in enumerate(branch_bits)
            ) / n_map
            total += self.full_macs[s] * vdqs.WEIGHT_BITS * mix
            for j in range(s + 1, self.num_layers):
                total += self.full_macs[j] * vdqs.WEIGHT_BITS * post_bits[j - s - 1]
        return total

    def peak_memory(self, branch_bits: list[tuple[int, ...]],
                    post_bits: tuple[int, ...]) -> int:
        s = self.depth
        peak = 0
        for bi, bits in enumerate(branch_bits):
            sizes = [MemoryModel.mem(self.branch_shapes[bi][d].elements, bits[d])
                     for d in range(s + 1)]
            if len(sizes) == 1:
                peak = max(peak, sizes[0])
            else:
                peak = max(peak, max(sizes[i] + sizes[i + 1]
                                     for i in range(len(sizes) - 1)))
        post_sizes = [self.stitched_mem(branch_bits)]
        for d in range(s + 1, self.num_layers + 1):
            post_sizes.append(
                MemoryModel.mem(self.shapes[d].elements, post_bits[d - s - 1]))
        if len(post_sizes) == 1:
            peak = max(peak, post_sizes[0])
        else:
            peak = max(peak, max(post_sizes[i] + post_sizes[i + 1]
                                 for i in range(len(post_sizes) - 1)))
        return peak


def rescore_table(table: vdqs.QuantScoreTable, lam: float) -> vdqs.QuantScoreTable:
    """Same entropy/BitOPs cells, new lambda weighting and rankings."""
    maps = []
    for m in table.maps:
        if m.pinned_bits is not None:
            maps.append(m)
            continue
        cells = {
            b: vdqs.ScoreCell(
                bits=c.bits, delta_b=c.delta_b, phi=c.phi, h_quant=c.h_quant,
                delta_h=c.delta_h, omega=c.omega,
                score=vdqs.quant_score(c.phi, c.omega, lam),
            )
            for b, c in m.cells.items()
        }
        ranking = tuple(sorted(cells, key=lambda b: (-cells[b].score, -b)))
        maps.append(vdqs.MapScores(
            index=m.index, elements=m.elements, consumer_macs=m.consumer_macs,
            h_fp=m.h_fp, cells=cells, ranking=ranking,
        ))
    return vdqs.QuantScoreTable(
        branch_id=table.branch_id, maps=maps,
        baseline_bitops=table.baseline_bitops, h_last=table.h_last,
        warnings=list(table.warnings),
    )


def _plan_on_context(ctx: PlanContext, cfg: PlanConfig) -> QuantPlan:
    scfg = cfg.search_config()
    notes: list[str] = []

    if ctx.gaussian.degenerate:
        om = None
        notes.append("sigma is zero at the split map; all patches classified "
                     "non-outlier")
    else:
        om = actstats.OutlierModel(ctx.gaussian, cfg.phi,
                                   literal_rule=cfg.eq1_literal)
    classes, sample_labels = vdpc.classify_all(ctx.pools, om)
    policies = vdpc.assign_policies(classes)

    branch_plans: list[BranchPlan] = []
    for bi, branch in enumerate(ctx.branches):
        policy = policies[bi].policy
        try:
            table = ctx.score_table(("branch", branch.patch_id),
                                    ctx.branch_stats(bi), scfg)
        except ZeroBitops:
            table = None
            if policy is Policy.MIXED_PRECISION:
                notes.append(
                    f"branch {branch.patch_id}: no MACs to trade, keeping 8-bit")
            branch_plans.append(BranchPlan(
                patch_id=branch.patch_id, label=classes[bi].label, policy=policy,
                bits=tuple(8 for _ in range(ctx.depth + 1)), table=None,
            ))
            continue
        try:
            assignment, branch_notes = vdqs.plan_branch(policy, table, scfg)
        except Infeasible as exc:
            raise Infeasible(str(exc), branch_id=branch.patch_id) from None
        notes.extend(branch_notes)
        branch_plans.append(BranchPlan(
            patch_id=branch.patch_id, label=classes[bi].label, policy=policy,
            bits=assignment.bits,
            table=table if policy is Policy.MIXED_PRECISION else None,
        ))

    branch_bits = [bp.bits for bp in branch_plans]
    any_outlier = any(bp.label is PatchLabel.OUTLIER for bp in branch_plans)

    s, L = ctx.depth, ctx.num_layers
    if s >= L:
        post_bits: tuple[int, ...] = ()
    elif any_outlier:
        post_bits = tuple(8 for _ in range(L - s))
        mm = MemoryModel(cfg.mem_limit)
        sizes = [ctx.stitched_mem(branch_bits)] + [
            mm.mem(ctx.shapes[d].elements, 8) for d in range(s + 1, L + 1)
        ]
        for i in range(len(sizes) - 1):
            if not mm.fits(sizes[i] + sizes[i + 1]):
                notes.append(
                    f"MemoryWarning: post-stage maps ({s + i}, {s + i + 1}) "
                    f"need {sizes[i] + sizes[i + 1]} bytes at 8 bits"
                )
    else:
        try:
            post_table = ctx.score_table(
                ("post", ctx.stitched_mem(branch_bits)),
                ctx.post_stats(ctx.stitched_mem(branch_bits)), scfg)
            try:
                post_assignment = vdqs.search_bitwidths(post_table, scfg)
            except Infeasible as exc:
                raise Infeasible(str(exc), branch_id="post") from None
            notes.extend(post_table.warnings)
            post_bits = post_assignment.bits[1:]
        except ZeroBitops:
            post_bits = tuple(8 for _ in range(L - s))
            notes.append("post stage: no MACs to trade, keeping 8-bit")

    bitops_plan = ctx.bitops_plan(branch_bits, post_bits)
    peak_plan = ctx.peak_memory(branch_bits, post_bits)
    all8 = [tuple(8 for _ in range(s + 1)) for _ in ctx.branches]
    peak_patch8 = ctx.peak_memory(all8, tuple(8 for _ in range(L - s)))

    totals = {
        "bitops_layer_based": ctx.bitops_layer_based,
        "bitops_patch8": ctx.bitops_patch8,
        "bitops_plan": bitops_plan,
        "peak_mem_patch8": peak_patch8,
        "peak_mem_plan": peak_plan,
        "redundancy_ratio": ctx.redundancy,
    }
    assert bitops_plan <= ctx.bitops_patch8 + 1e-9, "plan exceeds 8-bit baseline"
    assert peak_plan <= peak_patch8, "plan peak memory exceeds 8-bit baseline"

    fidelity = ctx.fidelity(branch_bits, post_bits)

    plan = QuantPlan(
        config={
            "phi": cfg.phi, "lambda": cfg.lam, "k": cfg.bins,
            "M": cfg.mem_limit, "candidates": list(cfg.candidates),
            "seed": cfg.seed,
        },
        branches=branch_plans,
        post_stage_bits=post_bits,
        totals=totals,
        fidelity=fidelity,
        warnings=notes,
        sample_labels=sample_labels,
    )
    if cfg.dynamic:
        plan.dynamic = _simulate_dynamic(ctx, plan)
    return plan


def _simulate_dynamic(ctx: PlanContext, plan: QuantPlan) -> dict:
    """Re-plan per calibration sample using that sample's patch classes.

    The searched mixed-precision assignments stay fixed; what changes per
    sample is which branches fall back to 8-bit because their patch shows
    an outlier this time.
    """
    s, L = ctx.depth, ctx.num_layers
    static_bits = {bp.patch_id: bp.bits for bp in plan.branches}
    all8_branch = tuple(8 for _ in range(s + 1))
    rows = []
    for si, labels in enumerate(plan.sample_labels):
        branch_bits = []
        for bi, bp in enumerate(plan.branches):
            if labels[bi] is PatchLabel.OUTLIER:
                branch_bits.append(all8_branch)
            else:
                branch_bits.append(static_bits[bp.patch_id])
        sample_outlier = any(lb is PatchLabel.OUTLIER for lb in labels)
        post_bits = (tuple(8 for _ in range(L - s)) if sample_outlier
                     else plan.post_stage_bits)
        fid = ctx.fidelity(branch_bits, post_bits, sample_indices=[si])
        rows.append({
            "bitops": ctx.bitops_plan(branch_bits, post_bits),
            "outlier_fraction": (sum(1 for lb in labels
                                     if lb is PatchLabel.OUTLIER) / len(labels)),
            "sqnr_db": fid.sqnr_db,
            "agreement": fid.agreement,
        })
    sqnrs = [r["sqnr_db"] for r in rows if r["sqnr_db"] is not None]
    agreements = [r["agreement"] for r in rows if r["agreement"] is not None]
    return {
        "bitops_plan_mean": float(np.mean([r["bitops"] for r in rows])),
        "outlier_fraction_mean": float(np.mean([r["outlier_fraction"]
                                                for r in rows])),
        "sqnr_db": float(np.mean(sqnrs)) if sqnrs else None,
        "agreement": float(np.mean(agreements)) if agreements else None,
        "per_sample": rows,
    }


def build_plan(net: NetworkSpec, weights: WeightSet, cal: CalibrationSet,
               cfg: PlanConfig) -> QuantPlan:
    ctx = PlanContext(net, weights, cal, strict_grid=cfg.strict_grid)
    return _plan_on_context(ctx, cfg)


def evaluate_fidelity(net: NetworkSpec, weights: WeightSet, cal: CalibrationSet,
                      plan: QuantPlan) -> Fidelity:
    """Recompute SQNR/agreement for an existing plan."""
    ctx = PlanContext(net, weights, cal)
    return ctx.fidelity([bp.bits for bp in plan.branches], plan.post_stage_bits)


_SWEEP_DOMAINS = {"phi": (0.0, 1.0), "lambda": (0.0, 1.0)}


def sweep(net: NetworkSpec, weights: WeightSet, cal: CalibrationSet,
          cfg: PlanConfig, param: str, grid) -> SweepResult:
    """Rebuild the plan per grid value of ``phi`` or ``lambda``."""
    if param not in _SWEEP_DOMAINS:
        raise ValueError(f"sweep parameter must be one of {sorted(_SWEEP_DOMAINS)}")
    grid = tuple(float(v) for v in grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sweep grid must be strictly increasing")
    lo, hi = _SWEEP_DOMAINS[param]
    upper_ok = (v <= hi for v in grid) if param == "lambda" \
        else (v < hi for v in grid)
    if not all(v >= lo for v in grid) or not all(upper_ok):
        raise ValueError(f"{param} grid outside its domain")

    ctx = PlanContext(net, weights, cal, strict_grid=cfg.strict_grid)

    def run(value: float) -> SweepRow:
        row_cfg = replace(cfg, **{("lam" if param == "lambda" else "phi"): value},
                          dynamic=False)
        try:
            plan = _plan_on_context(ctx, row_cfg)
        except Infeasible as exc:
            return SweepRow(value=value, bitops_plan=None, outlier_fraction=None,
                            sqnr_db=None, agreement=None,
                            error=f"infeasible: {exc}")
        outlier_fraction = sum(
            1 for bp in plan.branches if bp.label is PatchLabel.OUTLIER
        ) / len(plan.branches)
        return SweepRow(
            value=value,
            bitops_plan=plan.totals["bitops_plan"],
            outlier_fraction=outlier_fraction,
            sqnr_db=plan.fidelity.sqnr_db,
            agreement=plan.fidelity.agreement,
        )

    workers = worker_count(len(grid))
    if workers == 1:
        rows = [run(v) for v in grid]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, grid))
    return SweepResult(param=param, grid=grid, rows=rows)


# --- report serialization -----------------------------------------------------

def _table_to_dict(table: vdqs.QuantScoreTable | None):
    if table is None:
        return None
    rows = []
    for m in table.maps:
        if m.pinned_bits is not None:
            rows.append({"map": m.index, "pinned_bits": m.pinned_bits})
            continue
        rows.append({
            "map": m.index,
            "h_fp": m.h_fp,
            "ranking": list(m.ranking),
            "candidates": {
                str(b): {
                    "delta_b": c.delta_b,
                    "phi": c.phi,
                    "h": c.h_quant,
                    "delta_h": c.delta_h,
                    "omega": c.omega,
                    "s": c.score,
                    "negative_delta_h": c.delta_h < 0,
                }
                for b, c in sorted(m.cells.items(), reverse=True)
            },
        })
    return {"maps": rows, "b_total": table.baseline_bitops, "h_last": table.h_last}


def plan_to_dict(plan: QuantPlan) -> dict:
    doc = {
        "config": plan.config,
        "branches": [
            {
                "patch_id": list(bp.patch_id),
                "class": bp.label.value,
                "policy": bp.policy.value,
                "bits": list(bp.bits),
                "score_table": _table_to_dict(bp.table),
            }
            for bp in plan.branches
        ],
        "post_stage_bits": list(plan.post_stage_bits),
        "totals": plan.totals,
        "fidelity": {
            "sqnr_db": plan.fidelity.sqnr_db,
            "agreement": plan.fidelity.agreement,
        },
        "warnings": plan.warnings,
    }
    if plan.dynamic is not None:
        doc["dynamic"] = plan.dynamic
    return doc


def sweep_to_dict(result: SweepResult) -> dict:
    return {
        "param": result.param,
        "grid": list(result.grid),
        "rows": [
            {
                "value": r.value,
                "bitops_plan": r.bitops_plan,
                "outlier_fraction": r.outlier_fraction,
                "sqnr_db": r.sqnr_db,
                "agreement": r.agreement,
                "error": r.error,
            }
            for r in result.rows
        ],
    }


def save_report(path, doc: dict) -> None:
    """Write the JSON report atomically; no partial file survives a failure."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    payload = json.dumps(doc, indent=2, allow_nan=False) + "\n"
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
