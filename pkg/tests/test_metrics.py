"""Ratios, memory projections, perplexity deltas, and fidelity reports."""

from fractions import Fraction

import numpy as np
import pytest

from kvpool import (
    GeometryError,
    ModelGeometry,
    build_pool,
    compression_ratio,
    compression_ratio_exact,
    distortion_report,
    format_memory_table,
    memory_rows_csv,
    memory_table,
    ppl_delta,
    run_bench,
    synth_gaussian_dump,
)


class TestCompressionRatio:
    def test_asymmetric_three_bit_values(self):
        assert compression_ratio_exact(8, 3, 16) == Fraction(32, 11)
        assert compression_ratio(8, 3, 16) == pytest.approx(2.909090909)
        assert f"{compression_ratio(8, 3, 16):.2f}" == "2.91"

    def test_identity_and_other_points(self):
        assert compression_ratio(16, 16, 16) == 1.0
        assert compression_ratio(8, 8, 16) == 2.0
        assert compression_ratio(8, 4, 16) == pytest.approx(32 / 12)
        assert compression_ratio(8, 3, 32) == pytest.approx(64 / 11)

    @pytest.mark.parametrize("bad", [0, -3, 2.5])
    def test_rejects_non_positive_bits(self, bad):
        with pytest.raises(ValueError):
            compression_ratio(8, bad, 16)


class TestMemoryTable:
    GEOMETRY = ModelGeometry(num_layers=32, kv_heads=8, head_dim=128, seq_len=1837)
    RATIO = 32 / 11

    def test_serving_scale_reductions(self):
        rows = memory_table(self.GEOMETRY, [1, 3, 5, 10, 15], self.RATIO)
        got = {r.agents: round(r.reduction_percent, 1) for r in rows}
        assert got == {1: 65.6, 3: 88.5, 5: 93.1, 10: 96.6, 15: 97.7}

    def test_row_arithmetic(self):
        rows = memory_table(self.GEOMETRY, [3], self.RATIO)
        r = rows[0]
        assert r.baseline_bytes == 3 * 240_779_264
        assert r.pool_bytes == pytest.approx(240_779_264 / self.RATIO)
        assert r.reduction_percent == pytest.approx(
            100 * (1 - r.pool_bytes / r.baseline_bytes)
        )

    def test_pool_bytes_do_not_scale_with_agents(self):
        rows = memory_table(self.GEOMETRY, [3, 5, 10, 15], self.RATIO)
        assert len({r.pool_bytes for r in rows}) == 1

    def test_tokens_broadcast_and_zip(self):
        rows = memory_table(self.GEOMETRY, [2, 4], self.RATIO, tokens=[1024])
        assert [r.tokens for r in rows] == [1024, 1024]
        rows = memory_table(self.GEOMETRY, [2, 4], self.RATIO, tokens=[512, 2048])
        assert [r.tokens for r in rows] == [512, 2048]
        assert rows[1].baseline_bytes == 8 * rows[0].baseline_bytes  # 4x tokens times 2x agents

    @pytest.mark.parametrize("agents,tokens", [([], None), ([0], None), ([2], [1, 2, 3]), ([2], [0])])
    def test_rejects_bad_rows(self, agents, tokens):
        with pytest.raises(ValueError):
            memory_table(self.GEOMETRY, agents, self.RATIO, tokens=tokens)

    def test_text_and_csv_rendering(self):
        rows = memory_table(self.GEOMETRY, [3], self.RATIO)
        text = format_memory_table(rows)
        assert "reduction %" in text.splitlines()[0]
        assert "88.5" in text
        csv = memory_rows_csv(rows)
        assert csv.splitlines()[0] == "agents,tokens,baseline_bytes,pool_bytes,reduction_percent"
        assert csv.splitlines()[1].startswith("3,1837,722337792,")


class TestPplDelta:
    @pytest.mark.parametrize(
        "base,comp,want",
        [
            (8.998, 9.141, 1.59),
            (10.369, 10.342, -0.26),
            (9.665, 9.720, 0.57),
            (14.085, 14.159, 0.53),
            (8.592, 8.671, 0.92),
        ],
    )
    def test_reference_pairs(self, base, comp, want):
        assert round(ppl_delta(base, comp).delta_percent, 2) == want

    def test_zero_delta(self):
        assert ppl_delta(7.5, 7.5).delta_percent == 0.0

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            ppl_delta(0.0, 5.0)
        with pytest.raises(ValueError):
            ppl_delta(5.0, -1.0)


class TestDistortionReport:
    def test_gaussian_dump_report(self):
        g = ModelGeometry(num_layers=4, kv_heads=4, head_dim=128, seq_len=64)
        dump = synth_gaussian_dump(g, seed=6)
        pool = build_pool(dump)
        report = distortion_report(dump, pool)
        assert report.k_bits == 8 and report.v_bits == 3
        assert report.logical_ratio == pytest.approx(32 / 11)
        assert report.v_bound == pytest.approx(0.0425109, abs=1e-6)
        assert report.v_bound_violations == ()
        assert len(report.layer_stats) == 4
        for s in report.layer_stats:
            assert 0.025 < s.v_nmse <= report.v_bound
            assert s.k_max_err <= (s.k_scale / 2) * (1 + 1e-6)

    def test_physical_ratio_sits_under_logical(self):
        g = ModelGeometry(num_layers=2, kv_heads=8, head_dim=128, seq_len=1024)
        dump = synth_gaussian_dump(g, seed=7)
        report = distortion_report(dump, build_pool(dump))
        assert report.packed_ratio < report.logical_ratio
        # packed codes pay 4 bytes per key tensor and per value vector in
        # scales; at 1024 tokens that gap is 2.22% of the logical ratio
        gap = (report.logical_ratio - report.packed_ratio) / report.logical_ratio
        assert gap == pytest.approx(0.02222, abs=0.003)
        assert gap < 0.025

    def test_zero_dump_has_zero_error(self):
        g = ModelGeometry(num_layers=1, kv_heads=1, head_dim=16, seq_len=4)
        from kvpool import KvDump, KvTensor

        zeros = KvTensor(g, np.zeros(g.tensor_shape, dtype=np.float32))
        dump = KvDump(g, ((zeros, zeros),))
        report = distortion_report(dump, build_pool(dump))
        s = report.layer_stats[0]
        assert s.k_mse == 0.0 and s.v_mse == 0.0 and s.v_nmse == 0.0

    def test_geometry_mismatch_is_rejected(self):
        g1 = ModelGeometry(num_layers=1, kv_heads=1, head_dim=16, seq_len=4)
        g2 = ModelGeometry(num_layers=1, kv_heads=1, head_dim=16, seq_len=8)
        with pytest.raises(GeometryError):
            distortion_report(
                synth_gaussian_dump(g1, seed=0), build_pool(synth_gaussian_dump(g2, seed=0))
            )


class TestBench:
    def test_smoke(self):
        g = ModelGeometry(num_layers=2, kv_heads=2, head_dim=32, seq_len=16)
        result = run_bench(g, agents=2, repetitions=1, seed=0)
        assert result.build_seconds > 0
        assert result.decode_seconds_per_layer > 0
        expected = 2 * 1 * 2 * 2 * g.elements_per_tensor * 4
        assert result.decoded_bytes == expected
        assert result.aggregate_bytes_per_second > 0

    def test_rejects_bad_counts(self):
        g = ModelGeometry(num_layers=1, kv_heads=1, head_dim=8, seq_len=4)
        with pytest.raises(ValueError):
            run_bench(g, agents=0)
        with pytest.raises(ValueError):
            run_bench(g, repetitions=0)
