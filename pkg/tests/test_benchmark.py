import numpy as np
import pytest

from posefusion.benchmark import (
    METHODS,
    BenchConfig,
    RobustnessConfig,
    RobustnessRow,
    make_streams,
    mask_features,
    robustness_seed,
    robustness_verdict,
    run_seed,
    span_error,
    sub_seeds,
    summarize,
)
from posefusion.geometry import Pose
from posefusion.metrics import atle
from posefusion.pose_graph import FusionConfig


class TestStreams:
    def test_deterministic(self):
        a, b = make_streams(3), make_streams(3)
        assert all(np.array_equal(p.t, q.t) for p, q in zip(a.apr, b.apr))
        assert all(np.array_equal(p.dt, q.dt) for p, q in zip(a.rpr, b.rpr))

    def test_sub_seeds_independent(self):
        s = sub_seeds(0)
        assert len(set(s)) == len(s) == 5
        assert sub_seeds(0) == s != sub_seeds(1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BenchConfig(frames=3, fusion=FusionConfig(window=5))


class TestRunSeed:
    def test_fusion_beats_raw_apr(self):
        r = run_seed(0)
        assert set(r.reports) == set(METHODS)
        assert r.ratio == r.reports["pgo_fused"].e_med_p / r.reports["raw_apr"].e_med_p
        assert r.ratio < 1.0
        assert r.reports["integrated_rpr"].e_atle_p is not None

    def test_integrated_rpr_drift_grows_with_length(self):
        for seed in range(3):
            short = make_streams(seed, BenchConfig(frames=200))
            long = make_streams(seed, BenchConfig(frames=800))
            assert atle(long.rpr, long.gt.poses) > atle(short.rpr, short.gt.poses)

    def test_summarize(self):
        results = [run_seed(s, BenchConfig(frames=40)) for s in range(3)]
        out = summarize(results, threshold=0.8)
        assert out["seeds"] == [0, 1, 2]
        assert out["methods"]["raw_apr"]["e_atle_p"] is None
        assert out["methods"]["integrated_rpr"]["e_atle_p"] is not None
        assert out["ratio"]["median"] == pytest.approx(np.median([r.ratio for r in results]))
        assert out["ratio"]["seeds_within"] == sum(r.ratio <= 0.8 for r in results)


class TestRobustnessPieces:
    def test_span_error(self):
        gt = make_streams(0, BenchConfig(frames=20)).gt
        shifted = [Pose(p.t + [0.3, 0.4, 0], p.q) for p in gt.poses]
        assert span_error(shifted, gt, (5, 10)) == pytest.approx(0.5)

    def test_mask_features(self):
        s = make_streams(0, BenchConfig(frames=30))
        apr = list(s.apr)
        apr[10:15] = [None] * 5
        a_v, a_i, chain = mask_features(apr, s.rpr)
        assert a_v.shape == (30, 3) and a_i.shape == (30, 5) and chain.shape == (30, 3)
        np.testing.assert_array_equal(a_i[10:15, 4], np.log1p(np.arange(1.0, 6.0)))
        assert a_i[15, 4] == 0.0
        with pytest.raises(ValueError):
            mask_features([None] + apr[1:], s.rpr)

    def test_verdict_counts(self):
        def row(seed, level, raw, fused, mask):
            return RobustnessRow(seed, "freeze", level, 0.0, 0.0, raw, fused, mask)

        rows = [row(0, 0.0, 0.0, 0.0, 9), row(0, 0.5, 1.0, 0.5, 7), row(0, 1.0, 2.0, 1.0, 7),
                row(1, 0.0, 0.0, 0.0, 3), row(1, 0.5, 1.0, 1.5, 4), row(1, 1.0, 2.0, 1.0, 2)]
        assert robustness_verdict(rows) == {"freeze": {"seeds": 2, "degradation_ok": 1, "mask_monotone": 1}}


@pytest.fixture(scope="module")
def rows():
    return robustness_seed(0, rcfg=RobustnessConfig(toy_sequences=6, toy_steps=50))


class TestRobustnessSeed:
    def test_grid(self, rows):
        assert len(rows) == 9
        assert {(r.kind, r.level) for r in rows} == {(k, l) for k in ("freeze", "noise_burst", "dropout")
                                                     for l in (0.0, 0.5, 1.0)}

    def test_level_zero_has_no_degradation(self, rows):
        for r in rows:
            if r.level == 0.0:
                assert r.raw_degradation == 0.0 and r.fused_degradation == 0.0

    def test_freeze_and_dropout_share_fused_result(self, rows):
        # repeated APR values are dropped, so a frozen stream fuses like a dropped one
        by = {(r.kind, r.level): r for r in rows}
        for level in (0.5, 1.0):
            assert by["freeze", level].fused_error == by["dropout", level].fused_error

    def test_noise_burst_hurts_raw_more(self, rows):
        r = next(r for r in rows if r.kind == "noise_burst" and r.level == 1.0)
        assert r.fused_degradation < r.raw_degradation
