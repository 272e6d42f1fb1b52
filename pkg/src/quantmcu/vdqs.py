"""Value-driven quantization search.

Builds the per-feature-map quantization score table (BitOPs reduction vs
entropy reduction, weighted by lambda) and runs the iterative bitwidth
search that repairs adjacent-pair memory violations by demoting maps to
their next-best candidates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import actstats
from .errors import Infeasible, ZeroBitops
from .netgraph import MemoryModel
from .vdpc import Policy

DEFAULT_CANDIDATES = (8, 4, 2)
WEIGHT_BITS = 8
PHI_BASELINES = ("int8", "fp32")


@dataclass(frozen=True)
class SearchConfig:
    lam: float = 0.6
    candidates: tuple[int, ...] = DEFAULT_CANDIDATES
    bins: int = actstats.DEFAULT_BINS
    mem_limit: int | None = None
    b_last: int = 8
    phi_baseline: str = "int8"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if not self.candidates:
            raise ValueError("candidate set must be nonempty")
        if any(b not in actstats.QUANT_BITWIDTHS for b in self.candidates):
            raise ValueError(f"candidates must be from {actstats.QUANT_BITWIDTHS}")
        if self.b_last not in actstats.QUANT_BITWIDTHS:
            raise ValueError(f"b_last must be from {actstats.QUANT_BITWIDTHS}")
        if self.phi_baseline not in PHI_BASELINES:
            raise ValueError(f"phi_baseline must be one of {PHI_BASELINES}")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")


def baseline_unit(phi_baseline: str) -> int:
    """BitOPs per MAC in the reference model Phi normalizes against."""
    return WEIGHT_BITS * 8 if phi_baseline == "int8" else 32 * 32


def delta_bitops(consumer_macs: float, bits: int, phi_baseline: str = "int8") -> float:
    """BitOPs saved on this map's consumers by quantizing it to ``bits``."""
    if phi_baseline == "int8":
        return consumer_macs * WEIGHT_BITS * (8 - bits)
    return consumer_macs * (32 * 32 - WEIGHT_BITS * bits)


def phi_score(consumer_macs: float, bits: int, branch_bitops: float,
              phi_baseline: str = "int8") -> float:
    """Normalized BitOPs reduction; the computation half of the score."""
    if branch_bitops <= 0:
        raise ZeroBitops("branch has no MAC operations to normalize against")
    return delta_bitops(consumer_macs, bits, phi_baseline) / branch_bitops


def quant_score(phi: float, omega: float, lam: float) -> float:
    return -lam * omega + (1.0 - lam) * phi


@dataclass(frozen=True)
class ScoreCell:
    bits: int
    delta_b: float
    phi: float
    h_quant: float
    delta_h: float
    omega: float
    score: float


@dataclass
class MapStats:
    """Calibration-derived inputs for one feature map of a chain."""

    index: int                     # absolute depth in the network
    elements: int                  # local element count (drives memory)
    consumer_macs: float           # MACs of in-chain layers reading this map
    pool: np.ndarray | None        # calibration values
    value_range: tuple[float, float] | None
    pinned_bits: int | None = None  # fixed assignment (chain head of the
    fixed_mem: int | None = None    # post stage); excluded from the search


@dataclass
class MapScores:
    index: int
    elements: int
    consumer_macs: float
    h_fp: float
    cells: dict[int, ScoreCell]
    ranking: tuple[int, ...]
    pinned_bits: int | None = None
    fixed_mem: int | None = None


@dataclass
class QuantScoreTable:
    branch_id: object
    maps: list[MapScores]
    baseline_bitops: float  # all-8 (or fp32) chain total, the Phi denominator
    h_last: float           # entropy of the chain's last map at b_last
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class BitwidthAssignment:
    branch_id: object
    bits: tuple[int, ...]


def build_score_table(branch_id, stats: list[MapStats],
                      cfg: SearchConfig) -> QuantScoreTable:
    """Score every (map, candidate) cell of one chain.

    The chain's total MACs normalize Phi; the last map's entropy at
    ``b_last`` normalizes Omega. A zero denominator forces Omega to 0 with
    a warning instead of failing, since a constant output map says nothing
    about entropy trade-offs.
    """
    table_warnings: list[str] = []
    total_macs = sum(m.consumer_macs for m in stats)
    branch_bitops = total_macs * baseline_unit(cfg.phi_baseline)
    if branch_bitops <= 0:
        raise ZeroBitops(f"chain {branch_id} has no MAC operations")

    last = stats[-1]
    if last.pool is None:
        raise ValueError("last map of the chain needs a calibration pool")
    h_last = actstats.histogram_entropy(
        actstats.fake_quantize(last.pool, cfg.b_last, last.value_range),
        cfg.bins, last.value_range,
    ).entropy
    if h_last <= 0.0:
        table_warnings.append(
            f"chain {branch_id}: last feature map has zero entropy; "
            "omega forced to 0"
        )
        warnings.warn(table_warnings[-1], stacklevel=2)

    maps = []
    for ms in stats:
        if ms.pinned_bits is not None:
            maps.append(MapScores(
                index=ms.index, elements=ms.elements,
                consumer_macs=ms.consumer_macs, h_fp=float("nan"),
                cells={}, ranking=(ms.pinned_bits,),
                pinned_bits=ms.pinned_bits, fixed_mem=ms.fixed_mem,
            ))
            continue
        h_fp = actstats.histogram_entropy(ms.pool, cfg.bins, ms.value_range).entropy
        cells = {}
        for b in cfg.candidates:
            h_q = actstats.histogram_entropy(
                actstats.fake_quantize(ms.pool, b, ms.value_range),
                cfg.bins, ms.value_range,
            ).entropy
            delta_h = h_fp - h_q
            omega = delta_h / h_last if h_last > 0.0 else 0.0
            d_b = delta_bitops(ms.consumer_macs, b, cfg.phi_baseline)
            phi = d_b / branch_bitops
            cells[b] = ScoreCell(
                bits=b, delta_b=d_b, phi=phi, h_quant=h_q,
                delta_h=delta_h, omega=omega,
                score=quant_score(phi, omega, cfg.lam),
            )
        ranking = tuple(sorted(cfg.candidates,
                               key=lambda b: (-cells[b].score, -b)))
        maps.append(MapScores(
            index=ms.index, elements=ms.elements,
            consumer_macs=ms.consumer_macs, h_fp=h_fp,
            cells=cells, ranking=ranking,
        ))
    return QuantScoreTable(
        branch_id=branch_id, maps=maps,
        baseline_bitops=branch_bitops, h_last=h_last,
        warnings=table_warnings,
    )


class _Chain:
    """Mutable search state over one chain of maps."""

    def __init__(self, table: QuantScoreTable, mm: MemoryModel):
        self.mm = mm
        self.rankings = [m.ranking for m in table.maps]
        self.fixed = [m.fixed_mem for m in table.maps]
        self.elements = [m.elements for m in table.maps]
        self.position = [0] * len(table.maps)  # index into each ranking
        self.demotions = 0

    def __len__(self):
        return len(self.rankings)

    def bits(self, i: int) -> int:
        return self.rankings[i][self.position[i]]

    def mem(self, i: int) -> int:
        if self.fixed[i] is not None:
            return self.fixed[i]
        return self.mm.mem(self.elements[i], self.bits(i))

    def min_mem(self, i: int) -> int:
        if self.fixed[i] is not None:
            return self.fixed[i]
        return min(self.mm.mem(self.elements[i], b) for b in self.rankings[i])

    def pair_fits(self, i: int) -> bool:
        return self.mm.fits(self.mem(i) + self.mem(i + 1))

    def violated_pairs(self) -> list[int]:
        return [i for i in range(len(self) - 1) if not self.pair_fits(i)]

    def demote(self, i: int) -> bool:
        """Move map i to its best-ranked lower choice with strictly less memory."""
        if self.fixed[i] is not None:
            return False
        current = self.mem(i)
        for pos in range(self.position[i] + 1, len(self.rankings[i])):
            candidate = self.mm.mem(self.elements[i], self.rankings[i][pos])
            if candidate < current:
                self.position[i] = pos
                self.demotions += 1
                return True
        return False


def _repair_pair(chain: _Chain, pair: int, adjust: int) -> bool:
    """Demote the designated member while it is the pair's weakly-larger one."""
    other = pair + 1 if adjust == pair else pair
    changed = False
    while not chain.pair_fits(pair):
        if chain.mem(adjust) < chain.mem(other):
            break
        if not chain.demote(adjust):
            break
        changed = True
    return changed


def search_bitwidths(table: QuantScoreTable, cfg: SearchConfig) -> BitwidthAssignment:
    """Assign bitwidths along a chain subject to the adjacent-pair budget.

    Starts every map at its top-scored candidate, then alternates forward
    sweeps (adjusting the downstream member of each violating pair) with
    backward sweeps (adjusting the upstream member). A map is only demoted
    while its memory at least matches its partner's, and only to candidates
    that strictly shrink it. If a full sweep stalls on a violating pair,
    the pair's largest reducible member is demoted directly; stalling with
    nothing reducible means the instance is infeasible, which the upfront
    minimum-memory check already rejects.
    """
    assignment, _ = search_with_stats(table, cfg)
    return assignment


def search_with_stats(table: QuantScoreTable,
                      cfg: SearchConfig) -> tuple[BitwidthAssignment, int]:
    """``search_bitwidths`` plus the demotion count (bounded by (N+1)(m-1))."""
    mm = MemoryModel(cfg.mem_limit)
    chain = _Chain(table, mm)
    n = len(chain)
    max_demotions = sum(len(r) - 1 for r in chain.rankings)

    if cfg.mem_limit is not None and n > 1:
        for i in range(n - 1):
            if chain.min_mem(i) + chain.min_mem(i + 1) > cfg.mem_limit:
                raise Infeasible(
                    f"feature maps {table.maps[i].index} and "
                    f"{table.maps[i + 1].index} cannot fit in "
                    f"{cfg.mem_limit} bytes at any candidate bitwidth",
                    branch_id=table.branch_id,
                )

    while chain.violated_pairs():
        changed = False
        for i in range(n - 1):
            changed |= _repair_pair(chain, i, adjust=i + 1)
        for i in range(n - 1, 0, -1):
            changed |= _repair_pair(chain, i - 1, adjust=i - 1)
        if changed:
            assert chain.demotions <= max_demotions, "demotion budget exceeded"
            continue
        stalled = chain.violated_pairs()
        if not stalled:
            break
        pair = stalled[0]
        members = sorted((pair, pair + 1), key=chain.mem, reverse=True)
        if not any(chain.demote(i) for i in members):
            raise Infeasible(
                f"search stalled on pair ({table.maps[pair].index}, "
                f"{table.maps[pair + 1].index})",
                branch_id=table.branch_id,
            )
        assert chain.demotions <= max_demotions, "demotion budget exceeded"

    bits = tuple(chain.bits(i) for i in range(n))
    return BitwidthAssignment(branch_id=table.branch_id, bits=bits), chain.demotions


def plan_branch(policy: Policy, table: QuantScoreTable,
                cfg: SearchConfig) -> tuple[BitwidthAssignment, list[str]]:
    """Fixed-8 branches skip the search; mixed-precision branches run it.

    An 8-bit branch that breaks the memory budget is reported as a warning
    rather than an error: the 8-bit patch-based configuration is the
    baseline the device is assumed to run.
    """
    notes = list(table.warnings)
    if policy is Policy.FIXED8:
        bits = tuple(8 for _ in table.maps)
        mm = MemoryModel(cfg.mem_limit)
        for i in range(len(table.maps) - 1):
            a, b = table.maps[i], table.maps[i + 1]
            pair = (a.fixed_mem if a.fixed_mem is not None else mm.mem(a.elements, 8)) \
                + (b.fixed_mem if b.fixed_mem is not None else mm.mem(b.elements, 8))
            if not mm.fits(pair):
                notes.append(
                    f"MemoryWarning: branch {table.branch_id} maps "
                    f"({a.index}, {b.index}) need {pair} bytes at 8 bits, "
                    f"over the {cfg.mem_limit} byte budget"
                )
        return BitwidthAssignment(branch_id=table.branch_id, bits=bits), notes
    assignment = search_bitwidths(table, cfg)
    return assignment, notes
