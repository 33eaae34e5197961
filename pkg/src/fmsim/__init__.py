"""Precision-emulated transformer kernels plus a machine-level simulator.

Two halves share one vocabulary of formats and shapes:

* functional: emulated number formats (:mod:`fmsim.numerics`), matrices
  (:mod:`fmsim.tensor`) and kernels (:mod:`fmsim.kernels`) that compute
  real values at desk scale;
* analytic: the machine description (:mod:`fmsim.machine`), planners
  (:mod:`fmsim.scheduler`) and executors (:mod:`fmsim.executor`) that turn
  model shapes into simulated time, utilization and memory traffic.
"""

from .numerics import (
    BF16,
    FP16,
    FP32,
    FP64,
    FP8E4M3,
    FP8E5M2,
    FloatFormat,
    format_table,
    parse_format,
    quantize,
    quantize_array,
    widening_dot,
)
from .tensor import Matrix, TileSpec, materialize, seeded_random
from .machine import (
    Calibration,
    MachineConfig,
    Route,
    RouteKind,
    compute_cycles,
    default_machine_config,
    dma_time,
    load_machine_config,
    reduction_levels,
)
from .scheduler import (
    HeadMapping,
    PhaseStep,
    PhaseTiming,
    ReductionSchedule,
    TilingPlan,
    build_reduction_schedule,
    make_reduction_schedule,
    plan_gemm_tiling,
    plan_mha_mapping,
    simulate_phases,
)
from .models import ModelConfig, PRESETS, count_flops, get_model, hbm_traffic
from .executor import RunReport, run_ar_generate, run_nar, run_vit
from .functional import DeskDecoder, KVCache

__version__ = "0.1.0"

__all__ = [
    "BF16", "FP16", "FP32", "FP64", "FP8E4M3", "FP8E5M2",
    "FloatFormat", "format_table", "parse_format", "quantize", "quantize_array",
    "widening_dot",
    "Matrix", "TileSpec", "materialize", "seeded_random",
    "Calibration", "MachineConfig", "Route", "RouteKind",
    "compute_cycles", "default_machine_config", "dma_time", "load_machine_config",
    "reduction_levels",
    "HeadMapping", "PhaseStep", "PhaseTiming", "ReductionSchedule", "TilingPlan",
    "build_reduction_schedule", "make_reduction_schedule", "plan_gemm_tiling",
    "plan_mha_mapping", "simulate_phases",
    "ModelConfig", "PRESETS", "count_flops", "get_model", "hbm_traffic",
    "RunReport", "run_ar_generate", "run_nar", "run_vit",
    "DeskDecoder", "KVCache",
    "__version__",
]
