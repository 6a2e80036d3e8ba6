"""Counting and map-quality metrics against direct-formula oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import psnr_direct, ssim_direct
from mscanet.errors import ConfigError, MetricError
from mscanet.metrics import EvalReport, mae, psnr, rmse, ssim


class TestCountMetrics:
    def test_perfect_predictions(self):
        pairs = [(10.0, 10.0), (3.0, 3.0)]
        assert mae(pairs) == 0.0
        assert rmse(pairs) == 0.0

    def test_hand_example(self):
        pairs = [(10.0, 13.0), (10.0, 6.0)]  # errors 3 and -4
        assert mae(pairs) == pytest.approx(3.5)
        assert rmse(pairs) == pytest.approx(math.sqrt(12.5))
        assert rmse(pairs) == pytest.approx(3.5355, abs=1e-4)

    def test_empty_raises(self):
        with pytest.raises(ConfigError):
            mae([])
        with pytest.raises(ConfigError):
            rmse([])

    @given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_mae_le_rmse_and_permutation_invariant(self, pairs):
        assert mae(pairs) <= rmse(pairs) + 1e-12
        shuffled = list(reversed(pairs))
        assert mae(shuffled) == pytest.approx(mae(pairs), rel=1e-12)
        assert rmse(shuffled) == pytest.approx(rmse(pairs), rel=1e-12)


class TestPsnr:
    def test_identity_capped(self, rng):
        gt = rng.random((16, 16)) + 0.1
        assert psnr(gt.copy(), gt) == 100.0

    def test_uniform_offset_closed_form(self, rng):
        gt = rng.random((16, 16))
        gt[3, 4] = 1.0  # pin the peak so scaling is exactly 1
        pred = gt + 0.1
        assert psnr(pred, gt) == pytest.approx(20.0, abs=1e-9)

    def test_matches_direct_oracle(self, rng):
        for _ in range(10):
            gt = rng.random((12, 12)) * 3
            pred = gt + 0.2 * rng.standard_normal((12, 12))
            assert psnr(pred, gt) == pytest.approx(psnr_direct(pred, gt), abs=1e-9)

    def test_all_zero_gt_raises(self, rng):
        with pytest.raises(MetricError):
            psnr(rng.random((8, 8)), np.zeros((8, 8)))

    def test_shape_mismatch_raises(self, rng):
        with pytest.raises(ConfigError):
            psnr(rng.random((8, 8)), rng.random((8, 9)))


class TestSsim:
    def test_identity_is_one(self, rng):
        gt = rng.random((16, 16)) + 0.05
        assert ssim(gt.copy(), gt) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self, rng):
        a = 0.8 * rng.random((16, 16))
        b = 0.8 * rng.random((16, 16))
        # symmetrize the scaling: give both maps the same peak
        a[0, 0] = b[0, 0] = 1.0
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)

    def test_matches_direct_oracle(self, rng):
        for _ in range(5):
            gt = rng.random((16, 16)) + 0.05
            pred = np.clip(gt + 0.15 * rng.standard_normal((16, 16)), 0, None)
            assert ssim(pred, gt) == pytest.approx(ssim_direct(pred, gt), abs=1e-6)

    def test_window_too_small_raises(self, rng):
        with pytest.raises(MetricError):
            ssim(rng.random((8, 8)), rng.random((8, 8)) + 0.1)

    def test_bounded(self, rng):
        for _ in range(10):
            gt = rng.random((14, 14)) + 0.01
            pred = rng.random((14, 14))
            assert -1.0 <= ssim(pred, gt) <= 1.0


class TestEvalReport:
    def test_text_and_csv_roundtrip(self, tmp_path):
        report = EvalReport(mae=1.5, rmse=2.0, psnr=25.0, ssim=0.8,
                            per_image=[("a", 10.0, 11.5), ("b", 5.0, 4.0)])
        rp = tmp_path / "report.txt"
        cp = tmp_path / "per_image.csv"
        report.write(rp, cp)
        text = rp.read_text()
        assert "mae=1.5" in text
        assert "ssim=0.8" in text
        lines = cp.read_text().strip().splitlines()
        assert lines[0] == "id,gt_count,pred_count"
        assert lines[1].startswith("a,10.0,")

    def test_mae_above_rmse_rejected(self):
        with pytest.raises(ConfigError):
            EvalReport(mae=3.0, rmse=2.0, psnr=0.0, ssim=0.0)

    def test_ssim_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            EvalReport(mae=1.0, rmse=2.0, psnr=0.0, ssim=1.5)
