"""Functional compute kernels: GEMM, attention, layernorm, GELU, reductions.

All kernels are pure and operate on :class:`~fmsim.tensor.Matrix` values.
Accumulation follows the emulated FPU: inner products fold left-to-right
with a rounding to the accumulator format after every addition, so a
float64 run of any kernel is bit-deterministic and a low-precision run
reproduces the hardware's rounding chain.

Softmax statistics and the other non-linear math always run in fp32 or
wider, whatever the storage format of the operands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics
from .numerics import (
    FloatFormat,
    FP32,
    FP64,
    default_accumulator,
    parse_format,
    quantize_array,
)
from .tensor import Matrix

# i-GELU polynomial constants (clipped second-order fit of erf).
IGELU_A = -0.2888
IGELU_B = -1.769

_SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# GEMM
# ---------------------------------------------------------------------------


def _accumulate_chain(a: np.ndarray, b: np.ndarray, acc_fmt: FloatFormat) -> np.ndarray:
    """C[i,j] = left-to-right fold over k of a[i,k]*b[k,j], rounding each add.

    Products are exact (float64); only the running sum is quantized, which
    matches the widening dot-product semantics of the FPU.
    """
    m, k = a.shape
    _, n = b.shape
    acc = np.zeros((m, n))
    if acc_fmt is FP64:
        for kk in range(k):
            acc += np.outer(a[:, kk], b[kk, :])
        return acc
    for kk in range(k):
        acc = quantize_array(acc + np.outer(a[:, kk], b[kk, :]), acc_fmt)
    return acc


def gemm_naive(
    a: Matrix,
    b: Matrix,
    alpha: float = 1.0,
    acc_fmt: FloatFormat | str | None = None,
    out_fmt: FloatFormat | str | None = None,
) -> Matrix:
    """C = alpha * A @ B with a sequential-k accumulation chain.

    Output is quantized to A's format unless ``out_fmt`` overrides it.
    """
    if a.cols != b.rows:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    acc_fmt = parse_format(acc_fmt) if acc_fmt else default_accumulator(a.fmt)
    out_fmt = parse_format(out_fmt) if out_fmt else a.fmt
    acc = _accumulate_chain(a.data, b.data, acc_fmt)
    return Matrix.from_quantized(quantize_array(alpha * acc, out_fmt), out_fmt)


def gemm_k_partials(
    a: Matrix,
    b: Matrix,
    parts: int,
    acc_fmt: FloatFormat | str | None = None,
) -> list[Matrix]:
    """Split the K dimension into ``parts`` contiguous slabs and return the
    per-slab partial products (K-spatial tiling). Partials stay in the
    accumulator format so a later reduction does not double-round."""
    if a.cols != b.rows:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if not 1 <= parts <= a.cols:
        raise ValueError(f"cannot split K={a.cols} into {parts} parts")
    acc_fmt = parse_format(acc_fmt) if acc_fmt else default_accumulator(a.fmt)
    bounds = np.linspace(0, a.cols, parts + 1, dtype=int)
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        acc = _accumulate_chain(a.data[:, lo:hi], b.data[lo:hi, :], acc_fmt)
        out.append(Matrix.from_quantized(quantize_array(acc, acc_fmt), acc_fmt))
    return out


def gemm_tiled(
    a: Matrix,
    b: Matrix,
    alpha: float = 1.0,
    plan=None,
    acc_fmt: FloatFormat | str | None = None,
    out_fmt: FloatFormat | str | None = None,
) -> Matrix:
    """GEMM with the summation reordered according to a :class:`TilingPlan`.

    Mathematically equivalent to :func:`gemm_naive`; only the association
    order of the k-sum changes (tile-by-tile instead of a single sweep).
    A plan with one K tile is bit-identical to the naive kernel.
    """
    if a.cols != b.rows:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if plan is None:
        raise ValueError("gemm_tiled requires a TilingPlan")
    M, K = a.shape
    _, N = b.shape
    plan.validate(M, N, K)
    acc_fmt = parse_format(acc_fmt) if acc_fmt else default_accumulator(a.fmt)
    out_fmt = parse_format(out_fmt) if out_fmt else a.fmt

    if plan.spatial_dim == "K":
        partials = gemm_k_partials(a, b, plan.spatial_parts, acc_fmt)
        acc = partials[0].data.copy()
        for p in partials[1:]:
            acc = quantize_array(acc + p.data, acc_fmt) if acc_fmt is not FP64 else acc + p.data
    else:
        parts = plan.spatial_parts if plan.spatial_dim == "M" else 1
        row_bounds = np.linspace(0, M, parts + 1, dtype=int)
        mt, nt, kt = plan.tile_shape
        acc = np.zeros((M, N))
        for r0, r1 in zip(row_bounds[:-1], row_bounds[1:]):
            for i0 in range(r0, r1, mt):
                i1 = min(i0 + mt, r1)
                for j0 in range(0, N, nt):
                    j1 = min(j0 + nt, N)
                    tile = np.zeros((i1 - i0, j1 - j0))
                    for k0 in range(0, K, kt):
                        k1 = min(k0 + kt, K)
                        part = _accumulate_chain(a.data[i0:i1, k0:k1], b.data[k0:k1, j0:j1], acc_fmt)
                        tile = part if k0 == 0 else (
                            tile + part if acc_fmt is FP64 else quantize_array(tile + part, acc_fmt)
                        )
                    acc[i0:i1, j0:j1] = tile
    return Matrix.from_quantized(quantize_array(alpha * acc, out_fmt), out_fmt)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionInputs:
    q: Matrix
    k: Matrix
    v: Matrix
    causal: bool = False
    scale: float | None = None

    def __post_init__(self):
        if self.q.cols != self.k.cols:
            raise ValueError("Q and K must share the projection dimension")
        if self.k.rows != self.v.rows:
            raise ValueError("K and V must have the same number of rows")
        if self.causal and self.q.rows > self.k.rows:
            raise ValueError("causal attention requires S1 <= S2")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.q.cols)


def _stats_fmt(compute_fmt: FloatFormat) -> FloatFormat:
    """Softmax statistics format: fp32, or wider if the data already is."""
    return FP64 if compute_fmt is FP64 else FP32


def _np_stats_dtype(fmt: FloatFormat):
    return np.float64 if fmt is FP64 else np.float32


def attention_naive(inp: AttentionInputs, compute_fmt: FloatFormat | str | None = None) -> Matrix:
    """Reference attention: O = softmax(scale * Q K^T + mask) V.

    Row-wise numerically stable softmax (subtract the row max) computed in
    fp32 or wider; the probability matrix is converted to the compute format
    before the A x V product, mirroring the optimized kernel's dataflow.
    """
    compute_fmt = parse_format(compute_fmt) if compute_fmt else inp.q.fmt
    acc_fmt = default_accumulator(compute_fmt)
    sfmt = _stats_fmt(compute_fmt)
    sdt = _np_stats_dtype(sfmt)

    scores = _accumulate_chain(inp.q.data, inp.k.data.T, acc_fmt)
    scores = (inp.scale * scores).astype(sdt)
    s1, s2 = scores.shape
    if inp.causal:
        offset = s2 - s1
        mask = np.triu(np.ones((s1, s2), dtype=bool), k=offset + 1)
        scores = np.where(mask, -np.inf, scores)
    m = np.max(scores, axis=1, keepdims=True)
    p = np.exp((scores - m).astype(sdt))
    denom = np.sum(p, axis=1, keepdims=True, dtype=sdt)
    probs = (p / denom).astype(sdt)

    probs_q = quantize_array(probs, compute_fmt)
    out = _accumulate_chain(probs_q, inp.v.data, acc_fmt)
    return Matrix.from_quantized(quantize_array(out, inp.q.fmt), inp.q.fmt)


@dataclass
class OnlineSoftmaxState:
    """Running statistics for one block-row of the streaming softmax."""

    m: np.ndarray       # per-row running max
    l: np.ndarray       # per-row running denominator
    o_acc: np.ndarray   # unnormalized output accumulator

    @classmethod
    def fresh(cls, rows: int, cols: int, dtype) -> "OnlineSoftmaxState":
        return cls(
            m=np.full((rows, 1), -np.inf, dtype=dtype),
            l=np.zeros((rows, 1), dtype=dtype),
            o_acc=np.zeros((rows, cols), dtype=np.float64),
        )


def flash_attention2(
    inp: AttentionInputs,
    br: int,
    bc: int,
    compute_fmt: FloatFormat | str | None = None,
) -> Matrix:
    """Block-streaming attention with online softmax (forward pass).

    Processes Q in ``br``-row blocks against K/V in ``bc``-row blocks,
    keeping a running max and denominator per row and rescaling the output
    accumulator on the fly; normalization is deferred to the end. Statistics
    run in fp32 (or fp64 for fp64 data); probabilities are converted back to
    the compute format just before each P x V product.
    """
    compute_fmt = parse_format(compute_fmt) if compute_fmt else inp.q.fmt
    acc_fmt = default_accumulator(compute_fmt)
    sfmt = _stats_fmt(compute_fmt)
    sdt = _np_stats_dtype(sfmt)

    s1, s2 = inp.q.rows, inp.k.rows
    p_dim = inp.v.cols
    if not (1 <= br <= s1 and 1 <= bc <= s2):
        raise ValueError(f"invalid block sizes br={br}, bc={bc} for {s1}x{s2}")
    offset = s2 - s1
    out = np.zeros((s1, p_dim))

    for i0 in range(0, s1, br):
        i1 = min(i0 + br, s1)
        state = OnlineSoftmaxState.fresh(i1 - i0, p_dim, sdt)
        for j0 in range(0, s2, bc):
            j1 = min(j0 + bc, s2)
            if inp.causal and j0 > i1 - 1 + offset:
                break  # block fully masked
            scores = _accumulate_chain(inp.q.data[i0:i1], inp.k.data[j0:j1].T, acc_fmt)
            scores = (inp.scale * scores).astype(sdt)
            if inp.causal:
                rows = np.arange(i0, i1)[:, None] + offset
                cols = np.arange(j0, j1)[None, :]
                scores = np.where(cols > rows, -np.inf, scores)
            block_max = np.max(scores, axis=1, keepdims=True)
            m_new = np.maximum(state.m, block_max)
            p = np.exp((scores - m_new).astype(sdt))
            corr = np.exp((state.m - m_new).astype(sdt))
            state.l = (state.l * corr + np.sum(p, axis=1, keepdims=True, dtype=sdt)).astype(sdt)
            p_q = quantize_array(p, compute_fmt)
            pv = _accumulate_chain(p_q, inp.v.data[j0:j1], acc_fmt)
            state.o_acc = state.o_acc * corr.astype(np.float64) + pv
            state.m = m_new
        out[i0:i1] = state.o_acc / state.l.astype(np.float64)
    return Matrix.from_quantized(quantize_array(out, inp.q.fmt), inp.q.fmt)


# ---------------------------------------------------------------------------
# Layernorm / GELU
# ---------------------------------------------------------------------------


def layernorm(x: Matrix, gamma, beta, eps: float = 1e-5) -> Matrix:
    """Per-row (x - mean) / sqrt(var + eps) * gamma + beta.

    Mean/variance in fp32 or wider; population (1/N) variance.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    gamma = np.asarray(gamma, dtype=np.float64).ravel()
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if gamma.size != x.cols or beta.size != x.cols:
        raise ValueError("gamma/beta length must match the column count")
    sdt = np.float64 if x.fmt is FP64 else np.float32
    d = x.data.astype(sdt)
    mean = np.mean(d, axis=1, keepdims=True, dtype=sdt)
    var = np.mean((d - mean) ** 2, axis=1, keepdims=True, dtype=sdt)
    normed = (d - mean) / np.sqrt(var + sdt(eps))
    y = normed.astype(np.float64) * gamma + beta
    return Matrix.from_quantized(quantize_array(y, x.fmt), x.fmt)


def i_gelu(x: float) -> float:
    """Clipped second-order polynomial GELU (no transcendentals).

    Exact identity for x >= -b*sqrt(2) and exact zero for x <= b*sqrt(2),
    because the clipped erf surrogate saturates at +-1 there.
    """
    t = x / _SQRT2
    clipped = min(abs(t), -IGELU_B) + IGELU_B
    l = math.copysign(IGELU_A * clipped * clipped + 1.0, t) if t != 0.0 else 0.0
    return x * 0.5 * (1.0 + l)


def i_gelu_array(x: np.ndarray) -> np.ndarray:
    t = np.asarray(x, dtype=np.float64) / _SQRT2
    clipped = np.minimum(np.abs(t), -IGELU_B) + IGELU_B
    l = np.sign(t) * (IGELU_A * clipped * clipped + 1.0)
    return x * 0.5 * (1.0 + l)


def gelu_reference(x: np.ndarray) -> np.ndarray:
    """Exact erf-based GELU, the oracle the polynomial is checked against."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + np.vectorize(math.erf)(x / _SQRT2))


# ---------------------------------------------------------------------------
# Tree reduction
# ---------------------------------------------------------------------------


def tree_reduce(partials: Sequence[Matrix], schedule) -> Matrix:
    """Sum partial matrices pairwise in the order fixed by ``schedule``.

    ``receiver += sender`` at every scheduled step; deterministic for a
    given schedule regardless of execution parallelism. The reduced result
    lands on participant 0.
    """
    if not partials:
        raise ValueError("nothing to reduce")
    shape, fmt = partials[0].shape, partials[0].fmt
    for p in partials[1:]:
        if p.shape != shape or p.fmt is not fmt:
            raise ValueError("partials must share shape and format")
    if schedule.n_participants != len(partials):
        raise ValueError(
            f"schedule covers {schedule.n_participants} participants, got {len(partials)}"
        )
    work = [Matrix(p.data.copy(), p.fmt, _trusted=True) for p in partials]
    for _level, sender, receiver in schedule.levels:
        work[receiver].accumulate_(work[sender])
    return work[0]


# ---------------------------------------------------------------------------
# Fused blocks
# ---------------------------------------------------------------------------


@dataclass
class MHAWeights:
    """Projection weights for a multi-head attention block.

    w_q/w_k/w_v are E x (H*P) with head h occupying columns [h*P, (h+1)*P);
    w_o is (H*P) x E. Biases default to zero.
    """

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    b_q: np.ndarray | None = None
    b_k: np.ndarray | None = None
    b_v: np.ndarray | None = None
    b_o: np.ndarray | None = None


@dataclass
class MHAConfig:
    heads: int
    causal: bool = False
    compute_fmt: FloatFormat | None = None
    br: int = 16
    bc: int = 16
    reduction_schedule: object | None = None  # ReductionSchedule over `heads`
    scale: float | None = None


def _add_bias(m: Matrix, bias: np.ndarray | None) -> Matrix:
    if bias is None:
        return m
    return Matrix.from_quantized(quantize_array(m.data + np.asarray(bias).ravel(), m.fmt), m.fmt)


def mha_block(x: Matrix, weights: MHAWeights, cfg: MHAConfig) -> Matrix:
    """Multi-head attention with the fused concat+linear output projection.

    Per head: project Q/K/V, run flash attention, then multiply by that
    head's row-slab of w_o, producing one partial output per head (K-spatial
    tiling over the head dimension). Partials are combined with the tree
    reduction when a schedule is given (heads must be a power of two),
    otherwise with a sequential fold.
    """
    from .tensor import TileSpec  # local import to avoid cycle at module load

    h = cfg.heads
    hp = weights.w_q.cols
    if hp % h != 0:
        raise ValueError(f"head count {h} does not divide projection width {hp}")
    p_dim = hp // h
    if weights.w_o.rows != hp or weights.w_q.rows != x.cols:
        raise ValueError("weight shapes inconsistent with input")
    compute_fmt = cfg.compute_fmt or x.fmt
    acc_fmt = default_accumulator(compute_fmt)

    q_all = _add_bias(gemm_naive(x, weights.w_q, acc_fmt=acc_fmt, out_fmt=compute_fmt), weights.b_q)
    k_all = _add_bias(gemm_naive(x, weights.w_k, acc_fmt=acc_fmt, out_fmt=compute_fmt), weights.b_k)
    v_all = _add_bias(gemm_naive(x, weights.w_v, acc_fmt=acc_fmt, out_fmt=compute_fmt), weights.b_v)

    partials = []
    for head in range(h):
        cols = TileSpec(0, head * p_dim, x.rows, p_dim)
        q_h, k_h, v_h = q_all.tile(cols), k_all.tile(cols), v_all.tile(cols)
        o_h = flash_attention2(
            AttentionInputs(q_h, k_h, v_h, causal=cfg.causal, scale=cfg.scale),
            br=min(cfg.br, x.rows),
            bc=min(cfg.bc, x.rows),
            compute_fmt=compute_fmt,
        )
        w_slab = weights.w_o.tile(TileSpec(head * p_dim, 0, p_dim, weights.w_o.cols))
        partials.append(gemm_naive(o_h, w_slab, acc_fmt=acc_fmt, out_fmt=acc_fmt))

    if cfg.reduction_schedule is not None:
        total = tree_reduce(partials, cfg.reduction_schedule)
    else:
        total = partials[0]
        for p in partials[1:]:
            total = Matrix.from_quantized(
                quantize_array(total.data + p.data, acc_fmt), acc_fmt
            )
    total = _add_bias(total, weights.b_o)
    return Matrix.from_quantized(quantize_array(total.data, x.fmt), x.fmt)


def mlp_block(
    x: Matrix,
    w1: Matrix,
    b1: np.ndarray | None,
    w2: Matrix,
    b2: np.ndarray | None,
    compute_fmt: FloatFormat | None = None,
) -> Matrix:
    """Feed-forward block: i_gelu(X W1 + b1) W2 + b2, GELU in fp32 semantics."""
    compute_fmt = compute_fmt or x.fmt
    acc_fmt = default_accumulator(compute_fmt)
    hidden = _add_bias(gemm_naive(x, w1, acc_fmt=acc_fmt, out_fmt=acc_fmt), b1)
    gfmt = _stats_fmt(compute_fmt)
    activated = i_gelu_array(quantize_array(hidden.data, gfmt))
    act = Matrix.from_quantized(quantize_array(activated, compute_fmt), compute_fmt)
    out = _add_bias(gemm_naive(act, w2, acc_fmt=acc_fmt, out_fmt=acc_fmt), b2)
    return Matrix.from_quantized(quantize_array(out.data, x.fmt), x.fmt)
