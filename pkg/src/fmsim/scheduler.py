"""Tiling planners, head mapping, reduction schedules and pipeline timing.

Planning is pure arithmetic over shapes; the phase simulator converts a
list of (compute, DMA-in, DMA-out) steps into wall time under double
buffering: the DMA engine loads step i+1's tiles and drains step i-1's
output while the cores execute step i, so each steady-state slot costs
``max(compute_i, dma_in_{i+1} + dma_out_{i-1})``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .machine import MachineConfig, Route, RouteKind, dma_time, reduction_levels
from .numerics import FloatFormat, default_accumulator, parse_format


# ---------------------------------------------------------------------------
# GEMM tiling
# ---------------------------------------------------------------------------


@dataclass
class TilingPlan:
    """Spatial split across clusters plus per-cluster temporal tile shape.

    ``tile_shape`` is (m, n, k); ``temporal_tiles`` counts tiles per
    dimension for one cluster's share of the iteration space (last tiles may
    be ragged, nothing is padded).
    """

    spatial_dim: str                # "M", "K" or "none"
    spatial_parts: int
    temporal_tiles: dict
    tile_shape: tuple
    in_bytes: int = 1               # element width of A/B operands
    acc_bytes: int = 8              # element width of the resident C tile

    def validate(self, m: int, n: int, k: int) -> None:
        if self.spatial_dim not in ("M", "K", "none"):
            raise ValueError(f"bad spatial dim {self.spatial_dim!r}")
        if self.spatial_parts < 1:
            raise ValueError("spatial_parts must be >= 1")
        if self.spatial_dim == "M" and self.spatial_parts > m:
            raise ValueError("more M parts than rows")
        if self.spatial_dim == "K" and self.spatial_parts > k:
            raise ValueError("more K parts than the inner dimension")
        mt, nt, kt = self.tile_shape
        if min(mt, nt, kt) < 1:
            raise ValueError("tile dimensions must be positive")

    def spm_footprint(self) -> int:
        """Bytes of SPM the double-buffered working set occupies."""
        mt, nt, kt = self.tile_shape
        return 2 * (mt * kt + kt * nt) * self.in_bytes + mt * nt * self.acc_bytes

    def steps(self) -> int:
        total = 1
        for count in self.temporal_tiles.values():
            total *= count
        return total

    def as_dict(self) -> dict:
        return {
            "spatial_dim": self.spatial_dim,
            "spatial_parts": self.spatial_parts,
            "temporal_tiles": dict(self.temporal_tiles),
            "tile_shape": list(self.tile_shape),
        }


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _search_tile(m_local: int, n: int, k_local: int, w_in: int, w_acc: int,
                 spm: int) -> tuple[int, int, int]:
    """Pick (m, n, k) maximizing per-step tile volume under the SPM budget.

    Candidate inner depths are k_local and the powers of two below it; for
    each, m and n start square-ish (the tie-break) and the leftover budget
    flows to whichever side is not clamped by the problem extent. Ties in
    volume go to the deeper k, which the streamed inner loop prefers.
    """
    candidates = {k_local}
    kk = 1
    while kk < k_local:
        candidates.add(kk)
        kk *= 2
    best = None
    for kt in sorted(candidates, reverse=True):
        # square solution of 2*k*(m+n)*w_in + m*n*w_acc = spm with m = n
        disc = (2 * kt * w_in) ** 2 + w_acc * spm
        side = int(((disc ** 0.5) - 2 * kt * w_in) / w_acc)
        mt = max(1, min(m_local, side))
        nt = (spm - 2 * mt * kt * w_in) // (2 * kt * w_in + mt * w_acc)
        nt = max(1, min(n, nt))
        mt = (spm - 2 * nt * kt * w_in) // (2 * kt * w_in + nt * w_acc)
        mt = max(1, min(m_local, mt))
        if 2 * (mt * kt + kt * nt) * w_in + mt * nt * w_acc > spm:
            continue
        score = (mt * nt * kt, kt)
        if best is None or score > best[0]:
            best = (score, (mt, nt, kt))
    if best is None:
        raise ValueError("no feasible tile fits the scratchpad")
    return best[1]


def plan_gemm_tiling(
    m: int,
    n: int,
    k: int,
    fmt: FloatFormat | str,
    cfg: MachineConfig,
    hint: str = "M",
    acc_fmt: FloatFormat | str | None = None,
    spatial_parts: int | None = None,
) -> TilingPlan:
    """Choose a spatial split and the largest temporal tile that fits SPM.

    Default spatial dimension is M; K-spatial is only planned on request
    (fused producer/consumer chains where the operands already sit in the
    right clusters). The tile search greedily maximizes k, then m, then n
    under the double-buffering budget
    ``2*(bytes(A tile) + bytes(B tile)) + bytes(C tile) <= spm_bytes``.
    """
    if min(m, n, k) < 1:
        raise ValueError("GEMM dimensions must be >= 1")
    fmt = parse_format(fmt)
    acc = parse_format(acc_fmt) if acc_fmt else default_accumulator(fmt)
    w_in, w_acc = fmt.byte_width, acc.byte_width
    spm = cfg.spm_bytes

    if hint == "K":
        parts = spatial_parts or cfg.total_clusters
        parts = max(1, min(parts, k))
        m_local, k_local = m, _ceil_div(k, parts)
        dim = "K"
    elif hint in ("M", None, "none"):
        parts = spatial_parts or cfg.total_clusters
        parts = max(1, min(parts, m))
        m_local, k_local = _ceil_div(m, parts), k
        dim = "M" if hint == "M" else "none"
        if dim == "none":
            parts, m_local = 1, m
    else:
        raise ValueError(f"unknown spatial hint {hint!r}")

    if 4 * w_in + w_acc > spm:
        raise ValueError("SPM too small for any tile")
    mt, nt, kt = _search_tile(m_local, n, k_local, w_in, w_acc, spm)

    plan = TilingPlan(
        spatial_dim=dim,
        spatial_parts=parts,
        temporal_tiles={
            "M": _ceil_div(m_local, mt),
            "N": _ceil_div(n, nt),
            "K": _ceil_div(k_local, kt),
        },
        tile_shape=(mt, nt, kt),
        in_bytes=w_in,
        acc_bytes=w_acc,
    )
    if plan.spm_footprint() > spm:
        raise ValueError("no feasible tile fits the scratchpad")
    return plan


# ---------------------------------------------------------------------------
# Head mapping
# ---------------------------------------------------------------------------


@dataclass
class HeadMapping:
    """head index -> (cluster id, temporal slot)."""

    assignments: dict

    @property
    def n_slots(self) -> int:
        return 1 + max(slot for _, slot in self.assignments.values())

    def heads_on_cluster(self, cluster: int) -> list[int]:
        return [h for h, (c, _) in self.assignments.items() if c == cluster]


def plan_mha_mapping(n_heads: int, cfg: MachineConfig) -> HeadMapping:
    """Round-robin heads over clusters; extra heads spill into later slots."""
    if n_heads < 1:
        raise ValueError("need at least one head")
    nc = cfg.total_clusters
    return HeadMapping({h: (h % nc, h // nc) for h in range(n_heads)})


# ---------------------------------------------------------------------------
# Reduction schedule
# ---------------------------------------------------------------------------


@dataclass
class ReductionSchedule:
    """Binary reduction tree as (level, sender, receiver) triples.

    Level l pairs participants at stride 2**(l-1); with ``clusters_per_group``
    participants per group the intra-group levels come first and the root is
    participant 0.
    """

    levels: list
    n_participants: int
    clusters_per_group: int = 0

    def levels_deep(self) -> int:
        return max((lvl for lvl, _, _ in self.levels), default=0)

    def as_dict(self) -> dict:
        return {
            "n_participants": self.n_participants,
            "levels": [list(t) for t in self.levels],
        }


def make_reduction_schedule(n: int, clusters_per_group: int | None = None) -> ReductionSchedule:
    if n < 1 or (n & (n - 1)):
        raise ValueError(f"tree reduction needs a power-of-two participant count, got {n}")
    cpg = clusters_per_group or n
    triples = []
    depth = n.bit_length() - 1
    for level in range(1, depth + 1):
        stride = 1 << (level - 1)
        for receiver in range(0, n, stride * 2):
            triples.append((level, receiver + stride, receiver))
    return ReductionSchedule(triples, n, cpg)


def build_reduction_schedule(cfg: MachineConfig) -> ReductionSchedule:
    reduction_levels(cfg)  # validates power-of-two
    return make_reduction_schedule(cfg.total_clusters, cfg.clusters_per_group)


def reduction_route(level: int, schedule: ReductionSchedule) -> Route:
    """Intra-group link while the stride stays inside a group, else inter-group."""
    stride = 1 << (level - 1)
    kind = RouteKind.C2C_INTRA_GROUP if stride < schedule.clusters_per_group else RouteKind.C2C_INTER_GROUP
    return Route(kind)


# ---------------------------------------------------------------------------
# Phase pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseStep:
    compute_cycles: float
    dma_in_bytes: float = 0.0
    dma_out_bytes: float = 0.0
    route: Route = Route(RouteKind.HBM)


@dataclass
class PhaseTiming:
    prologue_ns: float
    steady_ns: float
    epilogue_ns: float
    total_ns: float
    compute_ns: float
    dma_ns: float
    bound: str  # "compute" or "memory"


def simulate_phases(steps: Sequence[PhaseStep], cfg: MachineConfig) -> PhaseTiming:
    """Wall time of a double-buffered phase.

    Prologue loads the first tile; each steady slot overlaps step i's
    compute with step i+1's loads and step i-1's writeback; the epilogue
    drains the last writeback.
    """
    if not steps:
        raise ValueError("phase needs at least one step")
    cycle_ns = 1e9 / cfg.freq_hz

    def in_ns(i: int) -> float:
        s = steps[i]
        return dma_time(s.dma_in_bytes, s.route, cfg) if s.dma_in_bytes > 0 else 0.0

    def out_ns(i: int) -> float:
        s = steps[i]
        return dma_time(s.dma_out_bytes, s.route, cfg) if s.dma_out_bytes > 0 else 0.0

    prologue = in_ns(0)
    steady = 0.0
    compute_total = 0.0
    dma_steady = 0.0
    n = len(steps)
    for i, s in enumerate(steps):
        comp = s.compute_cycles * cycle_ns
        dma = (in_ns(i + 1) if i + 1 < n else 0.0) + (out_ns(i - 1) if i > 0 else 0.0)
        steady += max(comp, dma)
        compute_total += comp
        dma_steady += dma
    epilogue = out_ns(n - 1)
    total = prologue + steady + epilogue
    bound = "compute" if compute_total >= dma_steady else "memory"
    return PhaseTiming(
        prologue_ns=prologue,
        steady_ns=steady,
        epilogue_ns=epilogue,
        total_ns=total,
        compute_ns=compute_total,
        dma_ns=prologue + dma_steady + epilogue,
        bound=bound,
    )
