"""Kernel correctness against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmsim import kernels as K
from fmsim.kernels import AttentionInputs, MHAConfig, MHAWeights
from fmsim.numerics import FP16, FP32, FP64, FP8E4M3, quantize_array
from fmsim.scheduler import TilingPlan, make_reduction_schedule
from fmsim.tensor import Matrix, TileSpec, materialize, seeded_random


def scalar_gemm_oracle(a, b, alpha=1.0):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = alpha * acc
    return out


class TestGemm:
    def test_identity(self):
        a = seeded_random(4, 4, FP64, 0)
        eye = materialize(4, 4, FP64, np.eye(4).ravel())
        assert K.gemm_naive(a, eye).max_abs_diff(a) == 0.0

    def test_alpha_zero(self):
        a = seeded_random(3, 5, FP64, 1)
        b = seeded_random(5, 2, FP64, 2)
        assert np.all(K.gemm_naive(a, b, alpha=0.0).data == 0.0)

    def test_matches_scalar_oracle(self):
        a = seeded_random(3, 3, FP64, 3)
        b = seeded_random(3, 3, FP64, 4)
        ref = scalar_gemm_oracle(a.data, b.data, alpha=1.7)
        got = K.gemm_naive(a, b, alpha=1.7)
        assert np.max(np.abs(got.data - ref)) <= 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            K.gemm_naive(seeded_random(2, 3, FP64, 0), seeded_random(2, 2, FP64, 1))


class TestGemmTiled:
    @given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32),
           st.integers(1, 4), st.sampled_from(["M", "K"]))
    @settings(max_examples=60, deadline=None)
    def test_equivalent_to_naive(self, mt, nt, kt, parts, dim):
        a = seeded_random(32, 32, FP64, 10)
        b = seeded_random(32, 32, FP64, 11)
        plan = TilingPlan(dim, parts, {"M": 1, "N": 1, "K": 1}, (mt, nt, kt))
        got = K.gemm_tiled(a, b, plan=plan)
        assert got.max_abs_diff(K.gemm_naive(a, b)) <= 1e-12

    def test_single_tile_bit_identical(self):
        a = seeded_random(16, 16, FP64, 12)
        b = seeded_random(16, 16, FP64, 13)
        plan = TilingPlan("M", 1, {"M": 1, "N": 1, "K": 1}, (16, 16, 16))
        assert np.array_equal(K.gemm_tiled(a, b, plan=plan).data, K.gemm_naive(a, b).data)

    def test_k_partials_with_tree_reduce(self):
        a = seeded_random(8, 16, FP64, 14)
        b = seeded_random(16, 8, FP64, 15)
        partials = K.gemm_k_partials(a, b, 4)
        total = K.tree_reduce(partials, make_reduction_schedule(4))
        assert total.max_abs_diff(K.gemm_naive(a, b)) <= 1e-12

    def test_low_precision_uses_widening_chain(self):
        # fp8 inputs accumulating in fp16 must equal the scalar widening chain
        a = seeded_random(2, 6, FP8E4M3, 16)
        b = seeded_random(6, 2, FP8E4M3, 17)
        got = K.gemm_naive(a, b, out_fmt=FP16)
        for i in range(2):
            for j in range(2):
                acc = 0.0
                for kk in range(6):
                    acc = float(np.float16(acc + a.data[i, kk] * b.data[kk, j]))
                assert got.data[i, j] == acc


class TestAttention:
    def test_single_key_returns_v(self):
        q = seeded_random(5, 3, FP64, 20)
        k = seeded_random(1, 3, FP64, 21)
        v = seeded_random(1, 3, FP64, 22)
        out = K.attention_naive(AttentionInputs(q, k, v))
        for i in range(5):
            assert np.allclose(out.data[i], v.data[0], atol=1e-15)

    def test_zero_query_means_column_mean(self):
        q = Matrix.zeros(4, 3, FP64)
        k = seeded_random(6, 3, FP64, 23)
        v = seeded_random(6, 3, FP64, 24)
        out = K.attention_naive(AttentionInputs(q, k, v))
        mean = v.data.mean(axis=0)
        assert np.allclose(out.data, np.tile(mean, (4, 1)), atol=1e-12)

    def test_causal_first_row_sees_only_first_key(self):
        q = seeded_random(4, 3, FP64, 25)
        k = seeded_random(4, 3, FP64, 26)
        v = seeded_random(4, 3, FP64, 27)
        out = K.attention_naive(AttentionInputs(q, k, v, causal=True))
        assert np.allclose(out.data[0], v.data[0], atol=1e-15)

    def test_causal_requires_s1_le_s2(self):
        with pytest.raises(ValueError, match="S1 <= S2"):
            AttentionInputs(seeded_random(4, 2, FP64, 0), seeded_random(2, 2, FP64, 1),
                            seeded_random(2, 2, FP64, 2), causal=True)

    def test_noncausal_permutation_invariance(self):
        rng = np.random.default_rng(5)
        q = seeded_random(6, 4, FP64, 28)
        k = seeded_random(9, 4, FP64, 29)
        v = seeded_random(9, 4, FP64, 30)
        perm = rng.permutation(9)
        ref = K.attention_naive(AttentionInputs(q, k, v))
        shuffled = K.attention_naive(AttentionInputs(
            q, Matrix(k.data[perm], FP64), Matrix(v.data[perm], FP64)))
        assert shuffled.max_abs_diff(ref) <= 1e-12


class TestFlashAttention:
    def test_single_block_equals_naive(self):
        q = seeded_random(8, 4, FP64, 31)
        k = seeded_random(8, 4, FP64, 32)
        v = seeded_random(8, 4, FP64, 33)
        inp = AttentionInputs(q, k, v)
        got = K.flash_attention2(inp, br=8, bc=8)
        assert got.max_abs_diff(K.attention_naive(inp)) <= 1e-14

    @pytest.mark.parametrize("causal", [False, True])
    def test_blocked_fp64(self, causal):
        q = seeded_random(8, 4, FP64, 34)
        k = seeded_random(8, 4, FP64, 35)
        v = seeded_random(8, 4, FP64, 36)
        inp = AttentionInputs(q, k, v, causal=causal)
        got = K.flash_attention2(inp, br=2, bc=2)
        assert got.max_abs_diff(K.attention_naive(inp)) <= 1e-12

    def test_one_hot_v_recovers_probability_rows(self):
        q = seeded_random(6, 4, FP32, 37)
        k = seeded_random(6, 4, FP32, 38)
        v = materialize(6, 6, FP32, np.eye(6).ravel())
        got = K.flash_attention2(AttentionInputs(q, k, v), br=3, bc=3, compute_fmt=FP32)
        sums = got.data.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-6)

    def test_randomized_equivalence_both_precisions(self):
        rng = np.random.default_rng(6)
        for fmt, tol, rel in ((FP64, 1e-12, False), (FP32, 1e-5, True)):
            for t in range(25):
                s1 = int(rng.integers(1, 65))
                s2 = s1 if rng.integers(0, 2) else int(rng.integers(s1, 65))
                p = int(rng.integers(1, 33))
                inp = AttentionInputs(
                    seeded_random(s1, p, fmt, 3 * t),
                    seeded_random(s2, p, fmt, 3 * t + 1),
                    seeded_random(s2, p, fmt, 3 * t + 2),
                    causal=bool(rng.integers(0, 2)),
                )
                got = K.flash_attention2(inp, int(rng.integers(1, s1 + 1)),
                                         int(rng.integers(1, s2 + 1)), fmt)
                ref = K.attention_naive(inp, fmt)
                err = got.max_abs_diff(ref)
                if rel:
                    err /= max(float(np.max(np.abs(ref.data))), 1e-30)
                assert err <= tol

    def test_invalid_block_sizes(self):
        inp = AttentionInputs(seeded_random(4, 2, FP64, 0), seeded_random(4, 2, FP64, 1),
                              seeded_random(4, 2, FP64, 2))
        with pytest.raises(ValueError, match="block sizes"):
            K.flash_attention2(inp, br=0, bc=2)
        with pytest.raises(ValueError, match="block sizes"):
            K.flash_attention2(inp, br=2, bc=5)


class TestLayernorm:
    def test_constant_row_zeroes(self):
        x = materialize(1, 6, FP64, [3.5] * 6)
        out = K.layernorm(x, np.ones(6), np.zeros(6))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_row_statistics(self):
        x = seeded_random(4, 64, FP64, 40)
        out = K.layernorm(x, np.ones(64), np.zeros(64), eps=1e-5)
        mean = out.data.mean(axis=1)
        var = out.data.var(axis=1)
        raw_var = x.data.var(axis=1)
        assert np.all(np.abs(mean) <= 1e-12)
        # population variance lands at raw_var / (raw_var + eps)
        assert np.allclose(var, raw_var / (raw_var + 1e-5), atol=1e-9)

    def test_normalized_input_is_fixed_point(self):
        rng = np.random.default_rng(8)
        row = rng.normal(size=32)
        row = (row - row.mean()) / row.std()
        x = materialize(1, 32, FP64, row)
        out = K.layernorm(x, np.ones(32), np.zeros(32), eps=1e-12)
        assert out.max_abs_diff(x) <= 1e-9

    def test_shift_invariance(self):
        x = seeded_random(3, 16, FP64, 41)
        shifted = Matrix(x.data + 5.0, FP64)
        a = K.layernorm(x, np.ones(16), np.zeros(16))
        b = K.layernorm(shifted, np.ones(16), np.zeros(16))
        assert a.max_abs_diff(b) <= 1e-9

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            K.layernorm(seeded_random(1, 4, FP64, 0), np.ones(4), np.zeros(4), eps=0.0)


class TestIGelu:
    def test_zero(self):
        assert K.i_gelu(0.0) == 0.0

    def test_exact_identity_above_clip(self):
        cutoff = -K.IGELU_B * math.sqrt(2.0)
        assert K.i_gelu(3.0) == 3.0
        assert K.i_gelu(cutoff) == cutoff
        assert K.i_gelu(100.0) == 100.0

    def test_exact_zero_below_clip(self):
        assert K.i_gelu(-3.0) == 0.0
        assert K.i_gelu(-100.0) == 0.0

    def test_erf_oracle_bound(self):
        xs = np.linspace(-8.0, 8.0, 100_000)
        err = np.max(np.abs(K.i_gelu_array(xs) - K.gelu_reference(xs)))
        assert err < 0.05


class TestTreeReduce:
    def test_all_ones(self):
        parts = [materialize(4, 4, FP64, np.ones(16)) for _ in range(16)]
        out = K.tree_reduce(parts, make_reduction_schedule(16, 4))
        assert np.all(out.data == 16.0)

    def test_two_partials(self):
        a = seeded_random(3, 3, FP64, 50)
        b = seeded_random(3, 3, FP64, 51)
        out = K.tree_reduce([a, b], make_reduction_schedule(2))
        assert np.array_equal(out.data, a.data + b.data)

    def test_matches_sequential_fold(self):
        parts = [seeded_random(5, 5, FP64, 60 + i) for i in range(8)]
        out = K.tree_reduce(parts, make_reduction_schedule(8, 4))
        seq = parts[0].data.copy()
        for p in parts[1:]:
            seq += p.data
        assert np.max(np.abs(out.data - seq)) <= 1e-13

    def test_deterministic_replay(self):
        parts = [seeded_random(4, 4, FP64, 70 + i) for i in range(8)]
        sched = make_reduction_schedule(8, 4)
        assert np.array_equal(K.tree_reduce(parts, sched).data,
                              K.tree_reduce(parts, sched).data)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            K.tree_reduce([seeded_random(2, 2, FP64, 0), seeded_random(3, 2, FP64, 1)],
                          make_reduction_schedule(2))

    def test_schedule_size_mismatch(self):
        with pytest.raises(ValueError, match="participants"):
            K.tree_reduce([seeded_random(2, 2, FP64, 0)] * 4, make_reduction_schedule(2))


def _toy_mha_weights(e, hp, seed):
    lim = 0.5 / math.sqrt(e)
    return MHAWeights(
        w_q=seeded_random(e, hp, FP64, seed, (-lim, lim)),
        w_k=seeded_random(e, hp, FP64, seed + 1, (-lim, lim)),
        w_v=seeded_random(e, hp, FP64, seed + 2, (-lim, lim)),
        w_o=seeded_random(hp, e, FP64, seed + 3, (-lim, lim)),
    )


class TestMhaBlock:
    def test_single_head_equals_composition(self):
        e = 8
        w = _toy_mha_weights(e, e, 80)
        x = seeded_random(6, e, FP64, 84)
        fused = K.mha_block(x, w, MHAConfig(heads=1))
        q = K.gemm_naive(x, w.w_q)
        k = K.gemm_naive(x, w.w_k)
        v = K.gemm_naive(x, w.w_v)
        ref = K.gemm_naive(K.attention_naive(AttentionInputs(q, k, v)), w.w_o)
        assert fused.max_abs_diff(ref) <= 1e-12

    def test_zero_projection_gives_zero(self):
        w = _toy_mha_weights(8, 8, 90)
        w.w_o = Matrix.zeros(8, 8, FP64)
        x = seeded_random(4, 8, FP64, 91)
        assert np.all(K.mha_block(x, w, MHAConfig(heads=2)).data == 0.0)

    def test_multi_head_matches_unfused_pipeline(self):
        e, h, p, s = 16, 4, 4, 8
        w = _toy_mha_weights(e, h * p, 95)
        x = seeded_random(s, e, FP64, 99)
        fused = K.mha_block(x, w, MHAConfig(
            heads=h, reduction_schedule=make_reduction_schedule(h)))
        q, k, v = (K.gemm_naive(x, m) for m in (w.w_q, w.w_k, w.w_v))
        cols = [TileSpec(0, i * p, s, p) for i in range(h)]
        heads = [K.attention_naive(AttentionInputs(q.tile(c), k.tile(c), v.tile(c)))
                 for c in cols]
        concat = Matrix(np.hstack([hd.data for hd in heads]), FP64)
        ref = K.gemm_naive(concat, w.w_o)
        assert fused.max_abs_diff(ref) <= 1e-12


class TestMlpBlock:
    def test_zero_w1_broadcasts_b2(self):
        e, ff = 6, 10
        x = seeded_random(4, e, FP64, 100)
        w1 = Matrix.zeros(e, ff, FP64)
        w2 = seeded_random(ff, e, FP64, 101)
        b2 = np.linspace(-1, 1, e)
        out = K.mlp_block(x, w1, None, w2, b2)
        assert np.allclose(out.data, np.tile(b2, (4, 1)), atol=1e-15)

    def test_composition_oracle(self):
        e = 8
        x = seeded_random(5, e, FP64, 102)
        w1 = seeded_random(e, e, FP64, 103, (-0.4, 0.4))
        w2 = seeded_random(e, e, FP64, 104, (-0.4, 0.4))
        out = K.mlp_block(x, w1, None, w2, None)
        hidden = K.i_gelu_array(K.gemm_naive(x, w1).data)
        ref = K.gemm_naive(Matrix(hidden, FP64), w2)
        assert out.max_abs_diff(ref) <= 1e-12

    def test_fp8_against_fp64_oracle(self):
        e, ff, s = 16, 32, 8
        x8 = seeded_random(s, e, FP8E4M3, 105)
        w1 = seeded_random(e, ff, FP8E4M3, 106, (-0.3, 0.3))
        w2 = seeded_random(ff, e, FP8E4M3, 107, (-0.3, 0.3))
        low = K.mlp_block(x8, w1, None, w2, None)
        x64 = Matrix(x8.data, FP64)
        ref = K.mlp_block(x64, Matrix(w1.data, FP64), None, Matrix(w2.data, FP64), None)
        rel = np.linalg.norm(low.data - ref.data) / max(np.linalg.norm(ref.data), 1e-30)
        assert rel < 0.1
