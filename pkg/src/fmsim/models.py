"""Model zoo, FLOP accounting and the HBM traffic ledger.

The five benchmark models ship as named presets. FLOP counts follow the
usual 1 FMA = 2 FLOP convention on full (unmasked) operand rectangles;
element-wise layers contribute configurable per-element weights.

:func:`hbm_traffic` is an analytic tensor-movement ledger, not a DMA trace:
each tensor is counted once per producer/consumer hop that crosses HBM.
With layer fusion the per-head attention outputs, the score matrix and the
GELU input never round-trip through HBM (head merging happens over the
cluster-to-cluster links), so the fused read set per block is the input
row block plus the weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .machine import ConfigError
from .numerics import FloatFormat, FP16, parse_format


@dataclass(frozen=True)
class ModelConfig:
    name: str
    kind: str              # "encoder" (ViT) or "decoder" (GPT)
    blocks: int
    embed_dim: int         # E
    head_dim: int          # P
    heads: int             # H
    mlp_dim: int           # FF
    seq_default: int
    seq_range: tuple = (1, 4096)
    params: int = 0
    patch_inputs: int = 768     # ViT stem: flattened patch size (3*16*16)
    classifier_classes: int = 1000

    def __post_init__(self):
        if self.kind not in ("encoder", "decoder"):
            raise ConfigError("kind", f"{self.kind!r} not in (encoder, decoder)")
        for fname in ("blocks", "embed_dim", "head_dim", "heads", "mlp_dim"):
            if getattr(self, fname) < 0 or (fname != "blocks" and getattr(self, fname) < 1):
                raise ConfigError(fname, "must be positive")

    @property
    def proj_width(self) -> int:
        return self.heads * self.head_dim

    @property
    def is_desk_scale(self) -> bool:
        """Small enough to materialize weights and run real numerics."""
        return max(self.embed_dim, self.mlp_dim, self.proj_width) <= 128


PRESETS = {
    "vit-b": ModelConfig("vit-b", "encoder", 12, 768, 64, 12, 3072, 197,
                         (197, 197), 86_000_000),
    "vit-l": ModelConfig("vit-l", "encoder", 24, 1024, 64, 16, 4096, 197,
                         (197, 197), 307_000_000),
    "vit-h": ModelConfig("vit-h", "encoder", 32, 1280, 80, 16, 5120, 197,
                         (197, 197), 632_000_000),
    "gpt3-xl": ModelConfig("gpt3-xl", "decoder", 40, 2048, 128, 16, 8192, 1024,
                           (128, 2048), 1_300_000_000),
    "gpt-j": ModelConfig("gpt-j", "decoder", 28, 4096, 256, 16, 16384, 1024,
                         (128, 2048), 6_000_000_000),
}


def get_model(name_or_cfg: str | ModelConfig) -> ModelConfig:
    if isinstance(name_or_cfg, ModelConfig):
        return name_or_cfg
    key = name_or_cfg.strip().lower()
    if key not in PRESETS:
        raise ConfigError("model", f"{name_or_cfg!r} is not a preset; valid: {', '.join(PRESETS)}")
    return PRESETS[key]


def model_config_from_dict(doc: dict) -> ModelConfig:
    required = {"name", "kind", "blocks", "embed_dim", "head_dim", "heads", "mlp_dim",
                "seq_default"}
    missing = required - set(doc)
    if missing:
        raise ConfigError(sorted(missing)[0], "missing model config field")
    kwargs = dict(doc)
    if "seq_range" in kwargs:
        kwargs["seq_range"] = tuple(kwargs["seq_range"])
    return ModelConfig(**kwargs)


def load_model_config(path: str | Path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return model_config_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlopWeights:
    """Per-element FLOP charges for the non-GEMM layers."""

    layernorm: float = 8.0
    gelu: float = 7.0
    softmax: float = 5.0   # exp counted as one FLOP
    residual: float = 1.0

    def as_dict(self) -> dict:
        return {"layernorm": self.layernorm, "gelu": self.gelu,
                "softmax": self.softmax, "residual": self.residual}


DEFAULT_FLOP_WEIGHTS = FlopWeights()


def flop_components(model: ModelConfig, mode: str, s: int, cache_len: int = 0,
                    weights: FlopWeights = DEFAULT_FLOP_WEIGHTS) -> dict:
    """Per-block FLOP breakdown.

    NAR/ViT: query length S against S keys. AR: one query row against a
    cache of ``cache_len`` previous tokens plus itself.
    """
    if s < 1:
        raise ValueError("sequence length must be >= 1")
    e, p, h, ff, hp = model.embed_dim, model.head_dim, model.heads, model.mlp_dim, model.proj_width
    if mode == "ar":
        sq, skv = 1, cache_len + 1
    elif mode in ("nar", "vit"):
        sq = skv = s
    else:
        raise ValueError(f"unknown mode {mode!r}")
    comp = {
        "qkv_proj": 3 * 2 * sq * e * hp,
        "scores": 2 * h * sq * skv * p,
        "attn_v": 2 * h * sq * skv * p,
        "out_proj": 2 * sq * hp * e,
        "mlp": 2 * sq * e * ff * 2,
        "layernorm": weights.layernorm * 2 * sq * e,
        "gelu": weights.gelu * sq * ff,
        "softmax": weights.softmax * h * sq * skv,
        "residual": weights.residual * 2 * sq * e,
    }
    return comp


def count_flops(model: ModelConfig, mode: str, s: int,
                weights: FlopWeights = DEFAULT_FLOP_WEIGHTS,
                n_new_tokens: int | None = None, prompt_len: int = 0) -> float:
    """Total FLOPs for a full pass.

    ``mode`` is "nar"/"vit" (one pass over S tokens) or "ar" (``n_new_tokens``
    single-token steps with a cache growing from ``prompt_len``).
    """
    model = get_model(model)
    if mode == "ar":
        steps = n_new_tokens if n_new_tokens is not None else 1
        total = 0.0
        for t in range(steps):
            comp = flop_components(model, "ar", 1, cache_len=prompt_len + t, weights=weights)
            total += sum(comp.values()) * model.blocks
        return total
    comp = flop_components(model, mode, s, weights=weights)
    total = sum(comp.values()) * model.blocks
    if model.kind == "encoder":
        total += 2 * s * model.patch_inputs * model.embed_dim          # patch embedding GEMM
        total += 2 * model.embed_dim * model.classifier_classes        # classifier head
        total += weights.layernorm * s * model.embed_dim               # final norm
    return total


# ---------------------------------------------------------------------------
# HBM traffic ledger
# ---------------------------------------------------------------------------


@dataclass
class TrafficReport:
    bytes_read: float
    bytes_written: float
    per_block_read: float
    per_block_written: float
    detail: dict = field(default_factory=dict)
    assumption: str = ""


def _block_weight_elems(model: ModelConfig) -> int:
    e, hp, ff = model.embed_dim, model.proj_width, model.mlp_dim
    return 3 * e * hp + hp * e + e * ff + ff * e


def hbm_traffic(model: ModelConfig | str, mode: str, s: int, fused: bool = True,
                fmt: FloatFormat | str = FP16) -> TrafficReport:
    """Analytic per-tensor HBM movement ledger.

    Reads per block, fused: the residual-stream input (S x E) and the block
    weights; everything else stays in cluster memories or moves over the
    cluster-to-cluster links. Unfused additionally round-trips Q/K/V, the
    S x S score matrix per head, the per-head attention outputs and the
    GELU input. Softmax statistics are fp32 but SPM-resident, so they never
    appear in the ledger.
    """
    model = get_model(model)
    fmt = parse_format(fmt)
    if s < 1:
        raise ValueError("sequence length must be >= 1")
    w = fmt.byte_width
    e, hp, h, ff = model.embed_dim, model.proj_width, model.heads, model.mlp_dim

    if mode == "ar":
        sq, skv = 1, s
    elif mode in ("nar", "vit"):
        sq = skv = s
    else:
        raise ValueError(f"unknown mode {mode!r}")

    weights_b = _block_weight_elems(model) * w
    x_in_b = sq * e * w
    out_b = sq * e * w
    kv_cache_b = (2 * skv * hp * w) if mode == "ar" else 0
    kv_append_b = (2 * hp * w) if mode == "ar" else 0

    detail = {
        "weights_per_block": weights_b,
        "x_in_per_block": x_in_b,
        "kv_cache_read_per_block": kv_cache_b,
    }
    read_b = weights_b + x_in_b + kv_cache_b
    written_b = out_b + kv_append_b

    if not fused:
        qkv_b = 3 * sq * hp * w
        scores_b = h * sq * skv * w
        head_out_b = sq * hp * w
        gelu_in_b = sq * ff * w
        extra = qkv_b + scores_b + head_out_b + gelu_in_b
        detail.update({
            "qkv_per_block": qkv_b,
            "scores_per_block": scores_b,
            "head_out_per_block": head_out_b,
            "gelu_in_per_block": gelu_in_b,
        })
        read_b += extra
        written_b += extra

    blocks = model.blocks
    total_read = read_b * blocks
    total_written = written_b * blocks
    if blocks == 0:
        total_read, total_written = x_in_b, out_b
    elif model.kind == "encoder" and mode == "vit":
        stem = (model.patch_inputs * e + e * model.classifier_classes) * w
        total_read += stem
        detail["stem_weights"] = stem

    return TrafficReport(
        bytes_read=float(total_read),
        bytes_written=float(total_written),
        per_block_read=float(read_b),
        per_block_written=float(written_b),
        detail=detail,
        assumption=(
            f"tensor sizes in {fmt.name}; fp32 softmax statistics stay SPM-resident "
            "and are not counted"
        ),
    )
