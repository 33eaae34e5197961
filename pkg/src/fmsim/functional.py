"""Desk-scale functional executor: real numerics on toy-sized models.

Full-size runs are analytic (shapes and bytes only); this module is the
numeric counterpart used for correctness work. It implements a canonical
post-norm transformer stack with seeded random weights, a causal NAR pass,
and autoregressive decoding over a KV cache. The two paths are exact
twins: AR step t reproduces row t of the causal NAR pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import MHAConfig, MHAWeights, mha_block, mlp_block
from .models import ModelConfig
from .numerics import FloatFormat, default_accumulator, parse_format, quantize_array
from .scheduler import make_reduction_schedule
from .tensor import Matrix, TileSpec, materialize, seeded_random


@dataclass
class KVCache:
    """Per-block K/V rows accumulated across decode steps (append-only)."""

    k: list = field(default_factory=list)   # one Matrix per block
    v: list = field(default_factory=list)

    @classmethod
    def empty(cls, n_blocks: int) -> "KVCache":
        return cls(k=[None] * n_blocks, v=[None] * n_blocks)

    def length(self, block: int = 0) -> int:
        return 0 if self.k[block] is None else self.k[block].rows

    def append(self, block: int, k_row: Matrix, v_row: Matrix) -> None:
        if self.k[block] is None:
            self.k[block], self.v[block] = k_row, v_row
            return
        if k_row.fmt is not self.k[block].fmt:
            raise ValueError("cache format mismatch")
        self.k[block] = Matrix.from_quantized(
            np.vstack([self.k[block].data, k_row.data]), k_row.fmt)
        self.v[block] = Matrix.from_quantized(
            np.vstack([self.v[block].data, v_row.data]), v_row.fmt)


@dataclass
class BlockWeights:
    mha: MHAWeights
    w1: Matrix
    w2: Matrix
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class DeskDecoder:
    """Toy transformer stack with materialized weights.

    Block order is post-norm: x -> x + MHA(x) -> LN -> h + MLP(h) -> LN.
    Weights are uniform random scaled by 1/sqrt(fan_in) so activations stay
    well inside every format's range.
    """

    def __init__(self, model: ModelConfig, fmt: FloatFormat | str = "fp64", seed: int = 0,
                 causal: bool | None = None):
        if not model.is_desk_scale:
            raise ValueError(f"{model.name} is not desk scale; weights would be materialized")
        self.model = model
        self.fmt = parse_format(fmt)
        self.causal = model.kind == "decoder" if causal is None else causal
        self.schedule = (
            make_reduction_schedule(model.heads) if _is_pow2(model.heads) else None
        )
        e, hp, ff = model.embed_dim, model.proj_width, model.mlp_dim
        lim_e, lim_hp, lim_ff = 0.5 / e**0.5, 0.5 / hp**0.5, 0.5 / ff**0.5
        self.blocks: list[BlockWeights] = []
        for b in range(model.blocks):
            base = seed * 1009 + b * 131
            self.blocks.append(BlockWeights(
                mha=MHAWeights(
                    w_q=seeded_random(e, hp, self.fmt, base + 1, (-lim_e, lim_e)),
                    w_k=seeded_random(e, hp, self.fmt, base + 2, (-lim_e, lim_e)),
                    w_v=seeded_random(e, hp, self.fmt, base + 3, (-lim_e, lim_e)),
                    w_o=seeded_random(hp, e, self.fmt, base + 4, (-lim_hp, lim_hp)),
                ),
                w1=seeded_random(e, ff, self.fmt, base + 5, (-lim_e, lim_e)),
                w2=seeded_random(ff, e, self.fmt, base + 6, (-lim_ff, lim_ff)),
                ln1_gamma=np.ones(e), ln1_beta=np.zeros(e),
                ln2_gamma=np.ones(e), ln2_beta=np.zeros(e),
            ))

    # -- shared per-row math ---------------------------------------------

    def _residual(self, x: Matrix, y: Matrix) -> Matrix:
        return Matrix.from_quantized(quantize_array(x.data + y.data, self.fmt), self.fmt)

    def _mha_cfg(self) -> MHAConfig:
        return MHAConfig(
            heads=self.model.heads,
            causal=self.causal,
            compute_fmt=self.fmt,
            reduction_schedule=self.schedule,
        )

    # -- NAR --------------------------------------------------------------

    def forward_nar(self, x: Matrix) -> Matrix:
        """One pass over the whole sequence (causal mask for decoders)."""
        h = x
        for bw in self.blocks:
            attn = mha_block(h, bw.mha, self._mha_cfg())
            h = kernels.layernorm(self._residual(h, attn), bw.ln1_gamma, bw.ln1_beta)
            ff = mlp_block(h, bw.w1, None, bw.w2, None, compute_fmt=self.fmt)
            h = kernels.layernorm(self._residual(h, ff), bw.ln2_gamma, bw.ln2_beta)
        return h

    # -- AR ----------------------------------------------------------------

    def ar_step(self, x_row: Matrix, cache: KVCache) -> Matrix:
        """Process one token row, appending its K/V to the cache per block."""
        acc_fmt = default_accumulator(self.fmt)
        h = x_row
        for bi, bw in enumerate(self.blocks):
            q = kernels.gemm_naive(h, bw.mha.w_q, acc_fmt=acc_fmt, out_fmt=self.fmt)
            k = kernels.gemm_naive(h, bw.mha.w_k, acc_fmt=acc_fmt, out_fmt=self.fmt)
            v = kernels.gemm_naive(h, bw.mha.w_v, acc_fmt=acc_fmt, out_fmt=self.fmt)
            cache.append(bi, k, v)
            p_dim = self.model.head_dim
            partials = []
            for head in range(self.model.heads):
                cols = TileSpec(0, head * p_dim, 1, p_dim)
                kc = cache.k[bi].tile(TileSpec(0, head * p_dim, cache.k[bi].rows, p_dim))
                vc = cache.v[bi].tile(TileSpec(0, head * p_dim, cache.v[bi].rows, p_dim))
                o_h = kernels.flash_attention2(
                    kernels.AttentionInputs(q.tile(cols), kc, vc, causal=False),
                    br=1, bc=kc.rows, compute_fmt=self.fmt,
                )
                w_slab = bw.mha.w_o.tile(TileSpec(head * p_dim, 0, p_dim, bw.mha.w_o.cols))
                partials.append(kernels.gemm_naive(o_h, w_slab, acc_fmt=acc_fmt, out_fmt=acc_fmt))
            if self.schedule is not None:
                attn = kernels.tree_reduce(partials, self.schedule)
            else:
                attn = partials[0]
                for p in partials[1:]:
                    attn = Matrix.from_quantized(
                        quantize_array(attn.data + p.data, acc_fmt), acc_fmt)
            attn = Matrix.from_quantized(quantize_array(attn.data, self.fmt), self.fmt)
            h = kernels.layernorm(self._residual(h, attn), bw.ln1_gamma, bw.ln1_beta)
            ff = mlp_block(h, bw.w1, None, bw.w2, None, compute_fmt=self.fmt)
            h = kernels.layernorm(self._residual(h, ff), bw.ln2_gamma, bw.ln2_beta)
        return h

    def forward_ar(self, x: Matrix) -> tuple[Matrix, KVCache]:
        """Teacher-forced AR pass over the rows of ``x``; stacks the per-step
        outputs so row t is directly comparable with the NAR pass."""
        cache = KVCache.empty(self.model.blocks)
        rows = []
        for t in range(x.rows):
            out = self.ar_step(x.tile(TileSpec(t, 0, 1, x.cols)), cache)
            rows.append(out.data[0])
        return Matrix.from_quantized(np.vstack(rows), self.fmt), cache

    def generate(self, prompt: Matrix | None, n_new: int, max_len: int = 4096) -> Matrix:
        """Greedy decoding: feed back a one-hot of the argmax coordinate.

        With no prompt, decoding starts from a zero row (BOS stand-in).
        """
        e = self.model.embed_dim
        cache = KVCache.empty(self.model.blocks)
        outputs = []
        if prompt is not None:
            for t in range(prompt.rows):
                last = self.ar_step(prompt.tile(TileSpec(t, 0, 1, e)), cache)
        else:
            last = self.ar_step(Matrix.zeros(1, e, self.fmt), cache)
            outputs.append(last)
            n_new -= 1
        for _ in range(n_new):
            if cache.length() >= max_len:
                raise OverflowError("KV cache exceeded the maximum sequence length")
            nxt = np.zeros((1, e))
            nxt[0, int(np.argmax(last.data[0]))] = 1.0
            last = self.ar_step(materialize(1, e, self.fmt, nxt.ravel()), cache)
            outputs.append(last)
        return Matrix.from_quantized(np.vstack([o.data[0] for o in outputs]), self.fmt)
