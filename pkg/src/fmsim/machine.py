"""Hardware description and primitive cost functions.

The machine is a hierarchy of compute clusters: ``clusters_per_group``
clusters joined by a group-local crossbar, ``groups`` such groups behind a
group-level crossbar and a shared HBM. Each cluster holds 8 compute cores
sharing a software-managed scratchpad, and a DMA engine that moves tiles
while the cores compute.

Cost primitives:

* :func:`dma_time` -- affine transfer model: a fixed per-transfer overhead
  plus bytes divided by the effective rate (the measured per-cluster DMA
  rate or the route's bandwidth cap, whichever binds). HBM routes pay the
  memory round-trip latency on top; this additive composition is a modeling
  choice, the two latencies were reported separately.
* :func:`compute_cycles` -- ideal FLOPs over peak, divided by an ISA- and
  format-dependent efficiency factor.

The efficiency factors, together with the elementwise-op costs in
:class:`Calibration`, are the model's calibration constants. They are
deliberately configurable and are echoed into every report.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

from .numerics import FloatFormat, parse_format

_PEAK_DEFAULT = {"fp64": 16, "fp32": 32, "fp16": 64, "bf16": 64, "fp8e4m3": 128, "fp8e5m2": 128}


class ConfigError(ValueError):
    """Invalid machine/model configuration; carries the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


class RouteKind(enum.Enum):
    HBM = "hbm"
    C2C_INTRA_GROUP = "c2c_intra_group"
    C2C_INTER_GROUP = "c2c_inter_group"


@dataclass(frozen=True)
class Route:
    """One DMA route. ``concurrent`` is the number of simultaneous requesters
    sharing the endpoint (only meaningful for HBM routes)."""

    kind: RouteKind
    concurrent: int = 1

    def __post_init__(self):
        if self.concurrent < 1:
            raise ValueError("concurrent requesters must be >= 1")


@dataclass
class Calibration:
    """Tunable constants of the timing model (reported with every result).

    ``gemm_efficiency`` is the fraction of peak the streamed FMA inner loops
    achieve per format with the operand-streaming/loop-repetition ISA
    extensions enabled; ``baseline_slowdown`` divides it when they are off.
    Matrix-vector work (autoregressive decoding) runs at a further
    ``matvec_efficiency_scale`` of the GEMM efficiency: single-row operands
    defeat both the row-parallel core mapping and the deep unrolling.
    """

    gemm_efficiency: dict = field(default_factory=lambda: {
        "fp64": 0.80, "fp32": 0.86, "fp16": 0.76, "bf16": 0.76,
        "fp8e4m3": 0.73, "fp8e5m2": 0.73,
    })
    baseline_slowdown: float = 4.5
    matvec_efficiency_scale: float = 0.115
    softmax_cycles_per_element: float = 8.0
    conversion_elements_per_cycle: float = 2.0
    activation_efficiency: float = 0.5
    step_overhead_cycles: float = 250.0
    phase_setup_ns: float = 6000.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MachineConfig:
    clusters_per_group: int = 4
    groups: int = 4
    compute_cores_per_cluster: int = 8
    spm_bytes: int = 131072
    freq_hz: float = 1e9
    peak_flop_per_cycle_per_cluster: dict = field(default_factory=lambda: dict(_PEAK_DEFAULT))
    bw_spm: float = 256e9
    bw_cluster_xbar_per_link: float = 64e9
    bw_group_xbar_per_link: float = 64e9
    bw_hbm_total: float = 410e9
    dma_bytes_per_cycle: float = 56.0
    dma_setup_ns: float = 27.0
    dma_static_ns: float = 115.0
    hbm_roundtrip_ns: float = 88.0
    isa_mode: str = "ssr_frep"
    calibration: Calibration = field(default_factory=Calibration)

    def __post_init__(self):
        if self.clusters_per_group < 1:
            raise ConfigError("clusters_per_group", "must be >= 1")
        if self.groups < 1:
            raise ConfigError("groups", "must be >= 1")
        if self.isa_mode not in ("baseline", "ssr_frep"):
            raise ConfigError("isa_mode", f"{self.isa_mode!r} not in (baseline, ssr_frep)")
        peaks = self.peak_flop_per_cycle_per_cluster
        ladder = [peaks.get("fp64"), peaks.get("fp32"), peaks.get("fp16"), peaks.get("fp8e4m3")]
        if any(p is None or p <= 0 for p in ladder):
            raise ConfigError("peak_flop_per_cycle_per_cluster", "missing or non-positive entries")
        for lo, hi in zip(ladder, ladder[1:]):
            if hi != 2 * lo:
                raise ConfigError(
                    "peak_flop_per_cycle_per_cluster",
                    "peak must double at each precision halving step",
                )

    @property
    def total_clusters(self) -> int:
        return self.clusters_per_group * self.groups

    def peak_flop_per_cycle(self, fmt: FloatFormat | str) -> float:
        fmt = parse_format(fmt)
        try:
            return float(self.peak_flop_per_cycle_per_cluster[fmt.name])
        except KeyError:
            raise ConfigError("peak_flop_per_cycle_per_cluster", f"no entry for {fmt.name}") from None

    def isa_efficiency(self, fmt: FloatFormat | str, mode: str | None = None) -> float:
        fmt = parse_format(fmt)
        mode = mode or self.isa_mode
        eff = self.calibration.gemm_efficiency[fmt.name]
        if mode == "baseline":
            eff /= self.calibration.baseline_slowdown
        return eff

    def with_clusters(self, total: int) -> "MachineConfig":
        """Same machine scaled to ``total`` clusters, preserving the group
        width where possible (<= one group stays a single group)."""
        if total < 1:
            raise ConfigError("clusters", "must be >= 1")
        c = self.clusters_per_group
        if total <= c:
            cpg, groups = total, 1
        elif total % c == 0:
            cpg, groups = c, total // c
        else:
            cpg, groups = total, 1
        cfg = replace_config(self, clusters_per_group=cpg, groups=groups)
        return cfg


def replace_config(cfg: MachineConfig, **changes) -> MachineConfig:
    data = {
        "clusters_per_group": cfg.clusters_per_group,
        "groups": cfg.groups,
        "compute_cores_per_cluster": cfg.compute_cores_per_cluster,
        "spm_bytes": cfg.spm_bytes,
        "freq_hz": cfg.freq_hz,
        "peak_flop_per_cycle_per_cluster": dict(cfg.peak_flop_per_cycle_per_cluster),
        "bw_spm": cfg.bw_spm,
        "bw_cluster_xbar_per_link": cfg.bw_cluster_xbar_per_link,
        "bw_group_xbar_per_link": cfg.bw_group_xbar_per_link,
        "bw_hbm_total": cfg.bw_hbm_total,
        "dma_bytes_per_cycle": cfg.dma_bytes_per_cycle,
        "dma_setup_ns": cfg.dma_setup_ns,
        "dma_static_ns": cfg.dma_static_ns,
        "hbm_roundtrip_ns": cfg.hbm_roundtrip_ns,
        "isa_mode": cfg.isa_mode,
        "calibration": cfg.calibration,
    }
    data.update(changes)
    return MachineConfig(**data)


# ---------------------------------------------------------------------------
# Cost primitives
# ---------------------------------------------------------------------------


def dma_time(n_bytes: float, route: Route, cfg: MachineConfig) -> float:
    """Duration in ns of one DMA transfer over ``route``.

    Rate = min(measured per-cluster DMA rate, route bandwidth cap); HBM
    routes split the aggregate HBM bandwidth evenly among concurrent
    requesters and pay the round-trip latency once per transfer.
    """
    if n_bytes < 0:
        raise ValueError("negative transfer size")
    engine_rate = cfg.dma_bytes_per_cycle * cfg.freq_hz  # bytes/s
    if route.kind is RouteKind.HBM:
        cap = cfg.bw_hbm_total / route.concurrent
        extra = cfg.hbm_roundtrip_ns
    elif route.kind is RouteKind.C2C_INTRA_GROUP:
        cap = cfg.bw_cluster_xbar_per_link
        extra = 0.0
    elif route.kind is RouteKind.C2C_INTER_GROUP:
        cap = cfg.bw_group_xbar_per_link
        extra = 0.0
    else:  # pragma: no cover
        raise ValueError(f"invalid route {route}")
    rate = min(engine_rate, cap)
    return cfg.dma_static_ns + extra + n_bytes / rate * 1e9


def compute_cycles(
    flops: float,
    fmt: FloatFormat | str,
    n_clusters: int,
    cfg: MachineConfig,
    efficiency: float | None = None,
) -> float:
    """Cycles to execute ``flops`` on ``n_clusters`` clusters.

    ideal = flops / (peak * clusters); the returned value divides the ideal
    by the ISA efficiency factor (or an explicit override).
    """
    if flops < 0:
        raise ValueError("negative flop count")
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    peak = cfg.peak_flop_per_cycle(fmt)
    eff = efficiency if efficiency is not None else cfg.isa_efficiency(fmt)
    return flops / (peak * n_clusters) / eff


def reduction_levels(cfg: MachineConfig) -> int:
    """Depth of the binary reduction tree over all clusters: log2(C*G)."""
    n = cfg.total_clusters
    if n & (n - 1):
        raise ValueError(f"tree reduction requires a power-of-two cluster count, got {n}")
    return n.bit_length() - 1


# ---------------------------------------------------------------------------
# Config (de)serialization
# ---------------------------------------------------------------------------

_SCALAR_FIELDS = {
    "clusters_per_group": int,
    "groups": int,
    "compute_cores_per_cluster": int,
    "spm_bytes": int,
    "freq_hz": float,
    "bw_spm": float,
    "bw_cluster_xbar_per_link": float,
    "bw_group_xbar_per_link": float,
    "bw_hbm_total": float,
    "dma_bytes_per_cycle": float,
    "dma_setup_ns": float,
    "dma_static_ns": float,
    "hbm_roundtrip_ns": float,
    "isa_mode": str,
}


def machine_config_from_dict(doc: dict) -> MachineConfig:
    kwargs = {}
    for name, caster in _SCALAR_FIELDS.items():
        if name in doc:
            try:
                kwargs[name] = caster(doc[name])
            except (TypeError, ValueError):
                raise ConfigError(name, f"cannot interpret {doc[name]!r}") from None
    if "peak_flop_per_cycle_per_cluster" in doc:
        raw = doc["peak_flop_per_cycle_per_cluster"]
        if not isinstance(raw, dict):
            raise ConfigError("peak_flop_per_cycle_per_cluster", "must be a mapping")
        peaks = dict(_PEAK_DEFAULT)
        for key, val in raw.items():
            name = key.lower()
            if name == "fp8":
                peaks["fp8e4m3"] = peaks["fp8e5m2"] = float(val)
            else:
                peaks[parse_format(name).name] = float(val)
        kwargs["peak_flop_per_cycle_per_cluster"] = peaks
    if "calibration" in doc:
        raw = doc["calibration"]
        if not isinstance(raw, dict):
            raise ConfigError("calibration", "must be a mapping")
        cal = Calibration()
        for key, val in raw.items():
            if not hasattr(cal, key):
                raise ConfigError(f"calibration.{key}", "unknown calibration constant")
            if key == "gemm_efficiency":
                eff = dict(cal.gemm_efficiency)
                for f, v in val.items():
                    fname = f.lower()
                    if fname == "fp8":
                        eff["fp8e4m3"] = eff["fp8e5m2"] = float(v)
                    else:
                        eff[parse_format(fname).name] = float(v)
                cal.gemm_efficiency = eff
            else:
                setattr(cal, key, float(val))
        kwargs["calibration"] = cal
    unknown = set(doc) - set(_SCALAR_FIELDS) - {"peak_flop_per_cycle_per_cluster", "calibration"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown machine config field")
    return MachineConfig(**kwargs)


def load_machine_config(path: str | Path) -> MachineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return machine_config_from_dict(json.load(fh))


def default_machine_config() -> MachineConfig:
    """The bundled 16-cluster configuration (4 groups of 4 clusters)."""
    with resources.files("fmsim.data").joinpath("machine_16cluster.json").open("r") as fh:
        return machine_config_from_dict(json.load(fh))
