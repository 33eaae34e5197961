"""Analytic end-to-end executors: NAR, AR decoding, and ViT inference.

Full-size runs never materialize weights; every phase of a transformer
block is turned into a list of double-buffered pipeline steps (compute
cycles + DMA bytes) and priced by the machine model. All blocks are
identical, so one block is costed and multiplied out.

Phase inventory per block, mirroring the kernel library's dataflow:

* the MHA kernel: per-head Q/K/V projections, the streaming-softmax
  attention core (fp32 softmax plus pack/unpack conversions for narrow
  formats), the per-head output-projection partials and their tree
  reduction over the cluster-to-cluster links;
* the feed-forward GEMMs with the GELU fused at the producer;
* layernorm + residual passes, spatially split over all clusters.

Latency buckets for the breakdown: ``gemm`` (feed-forward and stem GEMMs),
``flash_attention`` (the whole fused MHA kernel), ``layernorm``, ``gelu``,
``conversions``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .machine import MachineConfig, Route, RouteKind, compute_cycles, dma_time
from .models import (
    DEFAULT_FLOP_WEIGHTS,
    ModelConfig,
    count_flops,
    get_model,
    hbm_traffic,
)
from .numerics import FloatFormat, FP32, FP64, default_accumulator, parse_format
from .scheduler import (
    PhaseStep,
    make_reduction_schedule,
    plan_gemm_tiling,
    plan_mha_mapping,
    reduction_route,
    simulate_phases,
)

BUCKETS = ("gemm", "flash_attention", "layernorm", "gelu", "conversions")


@dataclass
class PhaseCost:
    name: str
    bucket: str
    ns: float
    plan: dict | None = None


@dataclass
class RunReport:
    model: str
    mode: str
    fmt: str
    clusters: int
    isa_mode: str
    fused: bool
    total_ns: float
    breakdown: dict
    fpu_utilization: float
    achieved_flops_per_s: float
    flops_total: float
    hbm_bytes_read: float
    hbm_bytes_written: float
    tokens_per_s: float | None = None
    images_per_s: float | None = None
    seq_len: int | None = None
    prefill_ns: float | None = None
    decode_ns: float | None = None
    new_tokens: int | None = None
    calibration: dict = field(default_factory=dict)
    flop_weights: dict = field(default_factory=dict)
    assumptions: list = field(default_factory=list)
    plans: dict = field(default_factory=dict)
    logits: list | None = None

    def breakdown_shares(self) -> dict:
        return {k: v / self.total_ns for k, v in self.breakdown.items()}

    def to_dict(self) -> dict:
        doc = {
            "model": self.model,
            "mode": self.mode,
            "fmt": self.fmt,
            "clusters": self.clusters,
            "isa_mode": self.isa_mode,
            "fused": self.fused,
            "seq_len": self.seq_len,
            "total_ns": self.total_ns,
            "breakdown_ns": dict(self.breakdown),
            "fpu_utilization": self.fpu_utilization,
            "achieved_flops_per_s": self.achieved_flops_per_s,
            "flops_total": self.flops_total,
            "hbm_bytes_read": self.hbm_bytes_read,
            "hbm_bytes_written": self.hbm_bytes_written,
            "tokens_per_s": self.tokens_per_s,
            "images_per_s": self.images_per_s,
            "prefill_ns": self.prefill_ns,
            "decode_ns": self.decode_ns,
            "new_tokens": self.new_tokens,
            "calibration": self.calibration,
            "flop_weights": self.flop_weights,
            "assumptions": list(self.assumptions),
        }
        if self.plans:
            doc["plans"] = self.plans
        if self.logits is not None:
            doc["logits"] = self.logits
        return doc


# ---------------------------------------------------------------------------
# Phase costing helpers
# ---------------------------------------------------------------------------


def _cycle_ns(cfg: MachineConfig) -> float:
    return 1e9 / cfg.freq_hz


def _act_rate(cfg: MachineConfig) -> float:
    """Elementwise FLOP/cycle per cluster (fp32 lanes at activation efficiency)."""
    return cfg.peak_flop_per_cycle(FP32) * cfg.calibration.activation_efficiency


def _gemm_phase_ns(
    name: str,
    m_total: int,
    n_total: int,
    k_total: int,
    fmt: FloatFormat,
    cfg: MachineConfig,
    *,
    parts: int = 1,
    split: str = "M",
    stream_a: bool = True,
    write_out: bool = True,
    matvec: bool = False,
    concurrent: int | None = None,
    plans: dict | None = None,
) -> float:
    """Wall time of one tiled GEMM phase on its critical cluster.

    ``parts``/``split`` describe how the iteration space is shared between
    clusters ("M": rows, "N": output columns, "local": whole problem on one
    cluster). The critical cluster carries the ragged remainder.
    """
    if split == "M":
        parts = min(parts, m_total)
        m_local, n_local = -(-m_total // parts), n_total
    elif split == "N":
        parts = min(parts, n_total)
        m_local, n_local = m_total, -(-n_total // parts)
    else:
        m_local, n_local = m_total, n_total
    plan = plan_gemm_tiling(m_local, n_local, k_total, fmt, cfg, hint="none")
    if plans is not None:
        plans[name] = plan.as_dict()
    mt, nt, kt = plan.tile_shape
    eff = cfg.isa_efficiency(fmt)
    if matvec:
        eff *= cfg.calibration.matvec_efficiency_scale
    w_in = fmt.byte_width
    w_out = fmt.byte_width
    route = Route(RouteKind.HBM,
                  concurrent=concurrent or min(cfg.total_clusters, max(parts, 1)))
    overhead = cfg.calibration.step_overhead_cycles

    steps = []
    for i0 in range(0, m_local, mt):
        rows = min(mt, m_local - i0)
        for j0 in range(0, n_local, nt):
            ncols = min(nt, n_local - j0)
            for k0 in range(0, k_total, kt):
                kk = min(kt, k_total - k0)
                cyc = compute_cycles(2.0 * rows * ncols * kk, fmt, 1, cfg, efficiency=eff)
                dma_in = kk * ncols * w_in + (rows * kk * w_in if stream_a else 0)
                dma_out = rows * ncols * w_out if (write_out and k0 + kk >= k_total) else 0
                steps.append(PhaseStep(cyc + overhead, dma_in, dma_out, route))
    timing = simulate_phases(steps, cfg)
    return timing.total_ns + cfg.calibration.phase_setup_ns


def _flash_phase_ns(
    s_q: int,
    s_kv: int,
    p_dim: int,
    fmt: FloatFormat,
    cfg: MachineConfig,
    *,
    matvec: bool = False,
) -> float:
    """One head's streaming attention on its cluster.

    Covers the two block GEMMs, the fp32 online-softmax statistics and (for
    narrow formats) the score pack/unpack conversions. K/V blocks stream
    from memory once per query block when they exceed the scratchpad.
    """
    cal = cfg.calibration
    w = fmt.byte_width
    # query block: largest power of two whose working set fits the scratchpad
    br = 1 if s_q == 1 else min(64, s_q)
    while br > 1:
        footprint = 5 * br * p_dim * w + 4 * br * p_dim + 4 * br * br
        if footprint <= cfg.spm_bytes:
            break
        br //= 2
    bc = max(br, min(s_kv, 64))
    eff = cfg.isa_efficiency(fmt)
    if matvec:
        eff *= cal.matvec_efficiency_scale
    gemm_cycles = compute_cycles(4.0 * s_q * s_kv * p_dim, fmt, 1, cfg, efficiency=eff)
    softmax_cycles = s_q * s_kv * cal.softmax_cycles_per_element
    n_steps = -(-s_q // br) * (-(-s_kv // bc))
    overhead_cycles = n_steps * cal.step_overhead_cycles
    conv_cycles = 0.0
    if _narrow(fmt):
        conv_cycles = 2.0 * s_q * s_kv / cal.conversion_elements_per_cycle
    kv_bytes = 2 * s_kv * p_dim * w
    restream = -(-s_q // br) if kv_bytes > cfg.spm_bytes // 2 else 1
    dma_ns = dma_time(s_q * p_dim * w + restream * kv_bytes,
                      Route(RouteKind.HBM, concurrent=cfg.total_clusters), cfg)
    compute_ns = (gemm_cycles + softmax_cycles + overhead_cycles + conv_cycles) * _cycle_ns(cfg)
    return max(compute_ns, dma_ns) + cal.phase_setup_ns


def _elementwise_ns(elements: float, flops_per_element: float, cfg: MachineConfig) -> float:
    return elements * flops_per_element / _act_rate(cfg) * _cycle_ns(cfg)


def _conversion_ns(elements: float, cfg: MachineConfig) -> float:
    return elements / cfg.calibration.conversion_elements_per_cycle * _cycle_ns(cfg)


def _reduction_ns(rows: int, cols: int, cfg: MachineConfig, local_folds: int = 0) -> float:
    """Tree reduction of fp32 partials over the cluster interconnect."""
    n = cfg.total_clusters
    if n == 1:
        levels_ns = 0.0
    else:
        schedule = make_reduction_schedule(n, cfg.clusters_per_group)
        levels_ns = 0.0
        for level in range(1, schedule.levels_deep() + 1):
            route = reduction_route(level, schedule)
            levels_ns += dma_time(rows * cols * 4, route, cfg)
            levels_ns += _elementwise_ns(rows * cols, 1.0, cfg)
    # heads beyond the cluster count fold into the local partial first
    levels_ns += local_folds * _elementwise_ns(rows * cols, 1.0, cfg)
    return levels_ns


# ---------------------------------------------------------------------------
# Block costing
# ---------------------------------------------------------------------------


def _narrow(fmt: FloatFormat) -> bool:
    return fmt not in (FP32, FP64)


def _block_phases_nar(
    model: ModelConfig,
    s: int,
    fmt: FloatFormat,
    cfg: MachineConfig,
    fused: bool,
    plans: dict | None,
) -> list[PhaseCost]:
    nc = cfg.total_clusters
    e, p_dim, h, ff, hp = (model.embed_dim, model.head_dim, model.heads,
                           model.mlp_dim, model.proj_width)
    mapping = plan_mha_mapping(h, cfg)
    slots = mapping.n_slots
    row_parts = min(nc, s)
    rows_c = -(-s // row_parts)
    phases: list[PhaseCost] = []

    # --- MHA kernel ---
    active = min(h, nc)
    qkv_ns = _gemm_phase_ns("mha.qkv", s, 3 * p_dim, e, fmt, cfg,
                            parts=1, split="local", concurrent=active,
                            plans=plans) * slots
    phases.append(PhaseCost("mha.qkv", "flash_attention", qkv_ns))

    attn_ns = _flash_phase_ns(s, s, p_dim, fmt, cfg)
    phases.append(PhaseCost("mha.attention", "flash_attention", attn_ns * slots))

    if fused:
        if nc & (nc - 1):
            raise ValueError(
                "fused head merging uses a tree reduction and needs a power-of-two "
                f"cluster count (got {nc}); rerun with fused=False"
            )
        out_ns = _gemm_phase_ns("mha.out_partial", s, e, p_dim, fmt, cfg,
                                parts=1, split="local", concurrent=active,
                                write_out=False, plans=plans) * slots
        red_ns = _reduction_ns(s, e, cfg, local_folds=max(0, slots - 1))
        phases.append(PhaseCost("mha.out_partial", "flash_attention", out_ns))
        phases.append(PhaseCost("mha.reduce", "flash_attention", red_ns))
    else:
        # heads write their outputs back; the projection reloads them as one GEMM
        spill_ns = 2 * dma_time(s * hp * fmt.byte_width / nc,
                                Route(RouteKind.HBM, concurrent=nc), cfg)
        out_ns = _gemm_phase_ns("mha.out_proj", s, e, hp, fmt, cfg,
                                parts=row_parts, split="M", plans=plans)
        phases.append(PhaseCost("mha.out_proj", "flash_attention", out_ns + spill_ns))

    # --- residual + norm ---
    ln_elems = rows_c * e
    ln_ns = _elementwise_ns(ln_elems, DEFAULT_FLOP_WEIGHTS.layernorm + 1.0, cfg) \
        + cfg.calibration.phase_setup_ns
    phases.append(PhaseCost("ln1", "layernorm", ln_ns))

    # --- feed-forward ---
    mlp1_ns = _gemm_phase_ns("mlp.fc1", s, ff, e, fmt, cfg,
                             parts=row_parts, split="M", plans=plans)
    phases.append(PhaseCost("mlp.fc1", "gemm", mlp1_ns))
    gelu_ns = _elementwise_ns(rows_c * ff, DEFAULT_FLOP_WEIGHTS.gelu, cfg)
    if not fused:
        gelu_ns += 2 * dma_time(s * ff * fmt.byte_width / nc,
                                Route(RouteKind.HBM, concurrent=nc), cfg)
    phases.append(PhaseCost("mlp.gelu", "gelu", gelu_ns))
    if _narrow(fmt):
        phases.append(PhaseCost("mlp.gelu.convert", "conversions",
                                _conversion_ns(2 * rows_c * ff, cfg)))
    mlp2_ns = _gemm_phase_ns("mlp.fc2", s, e, ff, fmt, cfg,
                             parts=row_parts, split="M", plans=plans)
    phases.append(PhaseCost("mlp.fc2", "gemm", mlp2_ns))

    phases.append(PhaseCost("ln2", "layernorm", ln_ns))
    return phases


def _block_phases_ar(
    model: ModelConfig,
    cache_len: int,
    fmt: FloatFormat,
    cfg: MachineConfig,
    fused: bool,
    plans: dict | None,
) -> list[PhaseCost]:
    nc = cfg.total_clusters
    e, p_dim, h, ff = model.embed_dim, model.head_dim, model.heads, model.mlp_dim
    mapping = plan_mha_mapping(h, cfg)
    slots = mapping.n_slots
    skv = cache_len + 1
    phases = []

    qkv_ns = _gemm_phase_ns("mha.qkv", 1, 3 * model.proj_width, e, fmt, cfg,
                            parts=nc, split="N", matvec=True, plans=plans)
    phases.append(PhaseCost("mha.qkv", "flash_attention", qkv_ns))
    attn_ns = _flash_phase_ns(1, skv, p_dim, fmt, cfg, matvec=True)
    phases.append(PhaseCost("mha.attention", "flash_attention", attn_ns * slots))
    out_ns = _gemm_phase_ns("mha.out_partial", 1, e, p_dim, fmt, cfg,
                            parts=1, split="local", matvec=True, write_out=not fused,
                            concurrent=min(h, nc), plans=plans) * slots
    phases.append(PhaseCost("mha.out_partial", "flash_attention", out_ns))
    if fused and not (nc & (nc - 1)):
        phases.append(PhaseCost("mha.reduce", "flash_attention",
                                _reduction_ns(1, e, cfg, local_folds=max(0, slots - 1))))

    ln_ns = _elementwise_ns(e, DEFAULT_FLOP_WEIGHTS.layernorm + 1.0, cfg) \
        + cfg.calibration.phase_setup_ns
    phases.append(PhaseCost("ln1", "layernorm", ln_ns))
    mlp1_ns = _gemm_phase_ns("mlp.fc1", 1, ff, e, fmt, cfg,
                             parts=nc, split="N", matvec=True, plans=plans)
    phases.append(PhaseCost("mlp.fc1", "gemm", mlp1_ns))
    phases.append(PhaseCost("mlp.gelu", "gelu", _elementwise_ns(ff / nc, DEFAULT_FLOP_WEIGHTS.gelu, cfg)))
    if _narrow(fmt):
        phases.append(PhaseCost("mlp.gelu.convert", "conversions", _conversion_ns(2 * ff / nc, cfg)))
    mlp2_ns = _gemm_phase_ns("mlp.fc2", 1, e, ff, fmt, cfg,
                             parts=nc, split="N", matvec=True, plans=plans)
    phases.append(PhaseCost("mlp.fc2", "gemm", mlp2_ns))
    phases.append(PhaseCost("ln2", "layernorm", ln_ns))
    return phases


def _sum_phases(phases: list[PhaseCost]) -> tuple[float, dict]:
    breakdown = {b: 0.0 for b in BUCKETS}
    total = 0.0
    for ph in phases:
        breakdown[ph.bucket] += ph.ns
        total += ph.ns
    return total, breakdown


# ---------------------------------------------------------------------------
# Executors
# ---------------------------------------------------------------------------


def _base_report(model: ModelConfig, mode: str, fmt: FloatFormat, cfg: MachineConfig,
                 fused: bool, s: int | None) -> dict:
    return dict(
        model=model.name,
        mode=mode,
        fmt=fmt.name,
        clusters=cfg.total_clusters,
        isa_mode=cfg.isa_mode,
        fused=fused,
        seq_len=s,
        calibration=cfg.calibration.as_dict(),
        flop_weights=DEFAULT_FLOP_WEIGHTS.as_dict(),
    )


def _finish(report: dict, total_ns: float, breakdown: dict, flops: float,
            fmt: FloatFormat, cfg: MachineConfig, traffic) -> RunReport:
    peak = cfg.peak_flop_per_cycle(fmt) * cfg.total_clusters * cfg.freq_hz
    achieved = flops / (total_ns * 1e-9)
    report.update(
        total_ns=total_ns,
        breakdown=breakdown,
        flops_total=flops,
        achieved_flops_per_s=achieved,
        fpu_utilization=achieved / peak,
        hbm_bytes_read=traffic.bytes_read,
        hbm_bytes_written=traffic.bytes_written,
    )
    rep = RunReport(**report)
    rep.assumptions.append(traffic.assumption)
    return rep


def run_nar(model: ModelConfig | str, s: int, fmt: FloatFormat | str, cfg: MachineConfig,
            fused: bool = True, collect_plans: bool = False) -> RunReport:
    """Prompt-encoding pass: S tokens in one invocation, causal for decoders."""
    model = get_model(model)
    fmt = parse_format(fmt)
    if not (model.seq_range[0] <= s <= model.seq_range[1]):
        raise ValueError(f"sequence length {s} outside {model.seq_range} for {model.name}")
    plans: dict | None = {} if collect_plans else None
    phases = _block_phases_nar(model, s, fmt, cfg, fused, plans)
    block_ns, block_breakdown = _sum_phases(phases)
    total_ns = block_ns * model.blocks
    breakdown = {k: v * model.blocks for k, v in block_breakdown.items()}
    flops = count_flops(model, "nar", s)
    traffic = hbm_traffic(model, "nar", s, fused=fused, fmt=fmt)
    report = _base_report(model, "nar", fmt, cfg, fused, s)
    if plans is not None:
        report["plans"] = plans
    rep = _finish(report, total_ns, breakdown, flops, fmt, cfg, traffic)
    rep.tokens_per_s = s / (total_ns * 1e-9)
    return rep


def run_vit(model: ModelConfig | str, fmt: FloatFormat | str, cfg: MachineConfig,
            fused: bool = True, collect_plans: bool = False) -> RunReport:
    """Encoder inference: non-causal blocks plus the patch-embedding and
    classifier GEMMs (modeled as equivalent-FLOP dense layers)."""
    model = get_model(model)
    if model.kind != "encoder":
        raise ValueError(f"{model.name} is not an encoder model")
    fmt = parse_format(fmt)
    s = model.seq_default
    plans: dict | None = {} if collect_plans else None
    phases = _block_phases_nar(model, s, fmt, cfg, fused, plans)
    block_ns, block_breakdown = _sum_phases(phases)
    total_ns = block_ns * model.blocks
    breakdown = {k: v * model.blocks for k, v in block_breakdown.items()}

    row_parts = min(cfg.total_clusters, s)
    stem_ns = _gemm_phase_ns("stem.patch_embed", s, model.embed_dim, model.patch_inputs,
                             fmt, cfg, parts=row_parts, split="M", plans=plans)
    head_ns = _gemm_phase_ns("stem.classifier", 1, model.classifier_classes, model.embed_dim,
                             fmt, cfg, parts=1, split="local", matvec=True, plans=plans)
    final_ln = _elementwise_ns(-(-s // row_parts) * model.embed_dim,
                               DEFAULT_FLOP_WEIGHTS.layernorm, cfg)
    total_ns += stem_ns + head_ns + final_ln
    breakdown["gemm"] += stem_ns + head_ns
    breakdown["layernorm"] += final_ln

    flops = count_flops(model, "vit", s)
    traffic = hbm_traffic(model, "vit", s, fused=fused, fmt=fmt)
    report = _base_report(model, "vit", fmt, cfg, fused, s)
    if plans is not None:
        report["plans"] = plans
    rep = _finish(report, total_ns, breakdown, flops, fmt, cfg, traffic)
    rep.images_per_s = 1.0 / (total_ns * 1e-9)
    return rep


def run_ar_generate(model: ModelConfig | str, prompt_len: int, n_new_tokens: int,
                    fmt: FloatFormat | str, cfg: MachineConfig, fused: bool = True,
                    collect_plans: bool = False, logits_seed: int | None = None) -> RunReport:
    """Autoregressive decoding: ``n_new_tokens`` single-token steps against a
    KV cache primed by an optional prompt-encoding pass.

    Throughput and utilization describe the decode phase; prefill is
    reported separately. At desk scale the functional twin runs alongside
    and its greedy logits are attached to the report.
    """
    model = get_model(model)
    fmt = parse_format(fmt)
    if n_new_tokens < 1:
        raise ValueError("need at least one new token")
    if prompt_len + n_new_tokens > model.seq_range[1]:
        raise ValueError(
            f"KV cache overflow: {prompt_len}+{n_new_tokens} exceeds {model.seq_range[1]}"
        )
    plans: dict | None = {} if collect_plans else None

    prefill_ns = 0.0
    prefill_breakdown = {b: 0.0 for b in BUCKETS}
    if prompt_len > 0:
        pre = run_nar(model, prompt_len, fmt, cfg, fused=fused)
        prefill_ns = pre.total_ns
        prefill_breakdown = pre.breakdown

    decode_ns = 0.0
    decode_breakdown = {b: 0.0 for b in BUCKETS}
    for i in range(n_new_tokens):
        phases = _block_phases_ar(model, prompt_len + i, fmt, cfg, fused,
                                  plans if i == 0 else None)
        step_ns, step_breakdown = _sum_phases(phases)
        decode_ns += step_ns * model.blocks
        for k, v in step_breakdown.items():
            decode_breakdown[k] += v * model.blocks

    decode_flops = count_flops(model, "ar", 1, n_new_tokens=n_new_tokens,
                               prompt_len=prompt_len)
    traffic = hbm_traffic(model, "ar", max(prompt_len, 1), fused=fused, fmt=fmt)
    report = _base_report(model, "ar", fmt, cfg, fused, prompt_len)
    if plans is not None:
        report["plans"] = plans
    rep = _finish(report, decode_ns, decode_breakdown, decode_flops, fmt, cfg, traffic)
    rep.prefill_ns = prefill_ns
    rep.decode_ns = decode_ns
    rep.new_tokens = n_new_tokens
    rep.total_ns = prefill_ns + decode_ns
    rep.breakdown = {k: decode_breakdown[k] + prefill_breakdown[k] for k in BUCKETS}
    rep.tokens_per_s = n_new_tokens / (decode_ns * 1e-9)
    rep.assumptions.append("utilization and tokens/s describe the decode phase only")

    if model.is_desk_scale:
        from .functional import DeskDecoder
        from .tensor import seeded_random
        seed = logits_seed if logits_seed is not None else 0
        dec = DeskDecoder(model, fmt, seed=seed)
        prompt = seeded_random(max(prompt_len, 1), model.embed_dim, fmt, seed + 7,
                               (-1.0, 1.0)) if prompt_len > 0 else None
        out = dec.generate(prompt, n_new_tokens)
        rep.logits = out.data.tolist()
    return rep
