"""Model presets, FLOP accounting, HBM traffic ledger."""

import pytest

from fmsim.machine import ConfigError
from fmsim.models import (
    ModelConfig,
    PRESETS,
    count_flops,
    flop_components,
    get_model,
    hbm_traffic,
    model_config_from_dict,
)


class TestPresets:
    @pytest.mark.parametrize("name,blocks,e,p,h,ff,s", [
        ("vit-b", 12, 768, 64, 12, 3072, 197),
        ("vit-l", 24, 1024, 64, 16, 4096, 197),
        ("vit-h", 32, 1280, 80, 16, 5120, 197),
        ("gpt3-xl", 40, 2048, 128, 16, 8192, 1024),
        ("gpt-j", 28, 4096, 256, 16, 16384, 1024),
    ])
    def test_zoo_dimensions(self, name, blocks, e, p, h, ff, s):
        m = PRESETS[name]
        assert (m.blocks, m.embed_dim, m.head_dim, m.heads, m.mlp_dim) == \
            (blocks, e, p, h, ff)
        assert m.seq_default == s

    def test_decoder_seq_ranges(self):
        assert PRESETS["gpt3-xl"].seq_range == (128, 2048)
        assert PRESETS["gpt-j"].seq_range == (128, 2048)

    def test_param_counts(self):
        assert PRESETS["gpt-j"].params == 6_000_000_000
        assert PRESETS["vit-b"].params == 86_000_000

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="model"):
            get_model("gpt-5")

    def test_config_from_dict(self):
        m = model_config_from_dict({
            "name": "tiny", "kind": "decoder", "blocks": 2, "embed_dim": 16,
            "head_dim": 8, "heads": 2, "mlp_dim": 32, "seq_default": 8,
            "seq_range": [1, 64],
        })
        assert m.is_desk_scale
        assert not PRESETS["gpt-j"].is_desk_scale


class TestCountFlops:
    def test_vitb_qkv_projection(self):
        comp = flop_components(PRESETS["vit-b"], "vit", 197)
        assert comp["qkv_proj"] == 3 * 2 * 197 * 768 * 768 == 697_171_968

    def test_ar_first_token_scores(self):
        comp = flop_components(PRESETS["gpt-j"], "ar", 1, cache_len=0)
        m = PRESETS["gpt-j"]
        assert comp["scores"] == 2 * m.heads * 1 * 1 * m.head_dim

    def test_attention_quadratic_in_seq(self):
        m = PRESETS["gpt3-xl"]
        s1 = flop_components(m, "nar", 256)["scores"]
        s2 = flop_components(m, "nar", 512)["scores"]
        assert s2 == 4 * s1

    def test_linear_terms_linear_in_seq(self):
        m = PRESETS["gpt-j"]
        a = flop_components(m, "nar", 128)
        b = flop_components(m, "nar", 256)
        for key in ("qkv_proj", "out_proj", "mlp"):
            assert b[key] == 2 * a[key]

    def test_ar_total_accumulates_over_steps(self):
        m = PRESETS["gpt3-xl"]
        one = count_flops(m, "ar", 1, n_new_tokens=1, prompt_len=10)
        three = count_flops(m, "ar", 1, n_new_tokens=3, prompt_len=10)
        assert three > 3 * one - 1  # cache growth makes later steps pricier
        assert three >= 3 * one

    def test_rejects_bad_seq(self):
        with pytest.raises(ValueError):
            count_flops("gpt-j", "nar", 0)


class TestHbmTraffic:
    def test_gptj_fused_reduction_window(self):
        unfused = hbm_traffic("gpt-j", "nar", 2048, fused=False)
        fused = hbm_traffic("gpt-j", "nar", 2048, fused=True)
        ratio = unfused.per_block_read / fused.per_block_read
        assert 1.45 <= ratio <= 1.75
        assert abs(unfused.per_block_read / 1e6 - 624) / 624 <= 0.15
        assert abs(fused.per_block_read / 1e6 - 384) / 384 <= 0.15

    def test_zero_block_model_is_io_only(self):
        degenerate = ModelConfig("null", "decoder", 0, 8, 4, 2, 16, 4, (1, 16))
        t = hbm_traffic(degenerate, "nar", 4, fused=True, fmt="fp64")
        assert t.bytes_read == 4 * 8 * 8
        assert t.bytes_written == 4 * 8 * 8

    def test_toy_model_hand_ledger(self):
        # 1 block, S=4, E=8, H=2, P=4, FF=16, fp64 (8-byte elements):
        #   weights: (3*8*8 + 8*8 + 8*16 + 16*8)*8 = 512*8 = 4096 B
        #   x in:    4*8*8 = 256 B
        # unfused extras: qkv 3*4*8*8=768, scores 2*4*4*8=256, head-out 256,
        #   gelu-in 4*16*8=512 -> 1792 B
        toy = ModelConfig("toy", "decoder", 1, 8, 4, 2, 16, 4, (1, 16))
        fused = hbm_traffic(toy, "nar", 4, fused=True, fmt="fp64")
        unfused = hbm_traffic(toy, "nar", 4, fused=False, fmt="fp64")
        assert fused.per_block_read == 4096 + 256
        assert unfused.per_block_read == 4096 + 256 + 1792
        assert fused.per_block_written == 256
        assert unfused.per_block_written == 256 + 1792

    def test_ar_reads_cache(self):
        t = hbm_traffic("gpt-j", "ar", 1024, fused=True, fmt="fp16")
        m = PRESETS["gpt-j"]
        assert t.detail["kv_cache_read_per_block"] == 2 * 1024 * m.proj_width * 2

    def test_assumption_documented(self):
        assert "fp16" in hbm_traffic("gpt-j", "nar", 2048).assumption
