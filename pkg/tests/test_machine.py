"""Machine description and cost primitives."""

import json

import pytest

from fmsim.machine import (
    Calibration,
    ConfigError,
    MachineConfig,
    Route,
    RouteKind,
    compute_cycles,
    default_machine_config,
    dma_time,
    machine_config_from_dict,
    reduction_levels,
    replace_config,
)

C2C = Route(RouteKind.C2C_INTRA_GROUP)


class TestDmaTime:
    def test_zero_bytes_is_static_overhead(self, cfg16):
        assert dma_time(0, C2C, cfg16) == 115.0

    def test_intra_group_transfer(self, cfg16):
        # 57344 B at the measured 56 B/cycle engine rate
        assert dma_time(57344, C2C, cfg16) == pytest.approx(115 + 57344 / 56)

    def test_linear_in_bytes(self, cfg16):
        base = dma_time(0, C2C, cfg16)
        one = dma_time(4096, C2C, cfg16) - base
        two = dma_time(8192, C2C, cfg16) - base
        assert two == pytest.approx(2 * one)

    def test_hbm_adds_roundtrip(self, cfg16):
        hbm = Route(RouteKind.HBM)
        assert dma_time(0, hbm, cfg16) == 115.0 + 88.0

    def test_engine_rate_binds_below_link_bandwidth(self, cfg16):
        # 56 B/cycle at 1 GHz = 56 GB/s < the 64 GB/s crossbar link
        t_link = dma_time(56000, C2C, cfg16) - 115.0
        assert t_link == pytest.approx(1000.0)  # not 875 ns, the link is not the bound

    def test_hbm_sharing_splits_bandwidth(self, cfg16):
        lone = dma_time(410_000, Route(RouteKind.HBM, concurrent=1), cfg16)
        crowded = dma_time(410_000, Route(RouteKind.HBM, concurrent=16), cfg16)
        # 16 requesters see 410/16 = 25.6 GB/s each, below the 56 GB/s engine rate
        assert crowded - 203 == pytest.approx((lone - 203) * 56 / 25.625)

    def test_monotone_in_bytes(self, cfg16):
        times = [dma_time(b, C2C, cfg16) for b in (0, 1, 100, 10_000)]
        assert times == sorted(times)

    def test_negative_bytes_rejected(self, cfg16):
        with pytest.raises(ValueError):
            dma_time(-1, C2C, cfg16)


class TestComputeCycles:
    def test_ideal_cycles_at_unit_efficiency(self, cfg16):
        assert compute_cycles(32768, "fp64", 1, cfg16, efficiency=1.0) == 2048.0

    def test_zero_flops(self, cfg16):
        assert compute_cycles(0, "fp16", 4, cfg16) == 0.0

    def test_baseline_ratio_matches_configured_slowdown(self, cfg16):
        ratio = (compute_cycles(1e9, "fp64", 1, replace_config(cfg16, isa_mode="baseline"))
                 / compute_cycles(1e9, "fp64", 1, cfg16))
        assert ratio == pytest.approx(cfg16.calibration.baseline_slowdown)
        assert 4.1 <= ratio <= 5.0

    def test_halves_as_precision_halves_at_fixed_efficiency(self, cfg16):
        cycles = [compute_cycles(1e6, fmt, 2, cfg16, efficiency=0.9)
                  for fmt in ("fp64", "fp32", "fp16", "fp8e4m3")]
        for wide, narrow in zip(cycles, cycles[1:]):
            assert narrow == pytest.approx(wide / 2)

    def test_unknown_format(self, cfg16):
        with pytest.raises(ValueError):
            compute_cycles(1.0, "int8", 1, cfg16)


class TestReductionLevels:
    def test_sixteen_clusters(self, cfg16):
        assert reduction_levels(cfg16) == 4

    def test_two_clusters(self):
        assert reduction_levels(MachineConfig(clusters_per_group=1, groups=2)) == 1

    def test_degenerate_single_cluster(self):
        assert reduction_levels(MachineConfig(clusters_per_group=1, groups=1)) == 0

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError, match="power-of-two"):
            reduction_levels(MachineConfig(clusters_per_group=3, groups=1))


class TestConfig:
    def test_defaults_match_silicon_shape(self, cfg16):
        assert cfg16.total_clusters == 16
        assert cfg16.compute_cores_per_cluster == 8
        assert cfg16.spm_bytes == 131072
        assert cfg16.peak_flop_per_cycle("fp64") == 16
        assert cfg16.peak_flop_per_cycle("fp8e5m2") == 128

    def test_peak_doubling_invariant_enforced(self):
        peaks = {"fp64": 16, "fp32": 32, "fp16": 60, "bf16": 60,
                 "fp8e4m3": 128, "fp8e5m2": 128}
        with pytest.raises(ConfigError, match="peak"):
            MachineConfig(peak_flop_per_cycle_per_cluster=peaks)

    def test_json_keys_match_field_names(self, tmp_path):
        doc = {
            "clusters_per_group": 2,
            "groups": 2,
            "spm_bytes": 65536,
            "dma_static_ns": 100,
            "peak_flop_per_cycle_per_cluster": {"fp64": 8, "fp32": 16, "fp16": 32,
                                                "bf16": 32, "fp8": 64},
            "calibration": {"baseline_slowdown": 4.2},
        }
        cfg = machine_config_from_dict(doc)
        assert cfg.total_clusters == 4
        assert cfg.dma_static_ns == 100
        assert cfg.peak_flop_per_cycle("fp8e4m3") == 64
        assert cfg.calibration.baseline_slowdown == 4.2

    def test_unknown_field_named_in_error(self):
        with pytest.raises(ConfigError, match="spm_byte"):
            machine_config_from_dict({"spm_byte": 1})

    def test_bad_isa_mode_named(self):
        with pytest.raises(ConfigError, match="isa_mode"):
            MachineConfig(isa_mode="turbo")

    def test_with_clusters_rules(self, cfg16):
        assert (cfg16.with_clusters(1).clusters_per_group, cfg16.with_clusters(1).groups) == (1, 1)
        assert (cfg16.with_clusters(4).clusters_per_group, cfg16.with_clusters(4).groups) == (4, 1)
        assert (cfg16.with_clusters(8).clusters_per_group, cfg16.with_clusters(8).groups) == (4, 2)
        assert cfg16.with_clusters(32).total_clusters == 32

    def test_calibration_echoed(self, cfg16):
        d = cfg16.calibration.as_dict()
        assert "gemm_efficiency" in d and "softmax_cycles_per_element" in d
