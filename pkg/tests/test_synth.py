import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ganattack.kernels import DimensionError
from ganattack.metrics import psnr
from ganattack.synth import (
    SyntheticDetector,
    calibrate_detector,
    gen_base_images,
    make_fingerprint,
    pattern_correlation,
    plant_fingerprint,
)


class TestFingerprint:
    @pytest.mark.parametrize("freq", [(0, 4), (4, 0), (3, 5), (8, 8)])
    def test_unit_norm_zero_mean(self, freq):
        p = make_fingerprint(32, 32, freq).pattern
        assert abs(np.linalg.norm(p) - 1.0) < 1e-9
        assert abs(p.mean()) < 1e-9

    def test_zero_amplitude_is_identity(self):
        imgs = gen_base_images(5, seed=1)
        assert np.array_equal(plant_fingerprint(imgs, make_fingerprint(amplitude=0.0)), imgs)

    def test_negative_amplitude_rejected(self):
        with pytest.raises(ValueError):
            make_fingerprint(amplitude=-0.1)

    def test_planted_psnr_high(self):
        imgs = gen_base_images(20, seed=2)
        planted = plant_fingerprint(imgs, make_fingerprint())
        assert min(psnr(a, b) for a, b in zip(planted, imgs)) >= 30.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            plant_fingerprint(np.zeros((3, 16, 16)), make_fingerprint(32, 32))


class TestBaseImages:
    def test_deterministic_and_in_range(self):
        a, b = gen_base_images(6, seed=5), gen_base_images(6, seed=5)
        assert np.array_equal(a, b)
        assert a.shape == (6, 3, 32, 32) and a.min() >= 0 and a.max() <= 1
        assert not np.array_equal(a, gen_base_images(6, seed=6))

    def test_content_orthogonal_to_fingerprint(self):
        imgs = gen_base_images(50, seed=3, noise=0.0)
        corr = pattern_correlation(imgs, make_fingerprint().pattern)
        assert np.max(np.abs(corr)) < 1e-9

    def test_bad_dims(self):
        with pytest.raises(DimensionError):
            gen_base_images(1, 30, 32)


class TestDetector:
    def test_threshold_point_is_half(self):
        fp = make_fingerprint()
        img = gen_base_images(1, seed=0)[0]
        det = SyntheticDetector(fp.pattern, 50.0, float(pattern_correlation(img, fp.pattern)))
        assert det.score(img) == 0.5

    @given(st.floats(0.1, 200), st.floats(-0.05, 0.05), st.lists(st.floats(0, 0.2), min_size=2, max_size=6))
    @settings(max_examples=40, deadline=None)
    def test_score_monotone_in_amplitude(self, alpha, beta, amps):
        fp = make_fingerprint()
        base = np.full((3, 32, 32), 0.5)
        det = SyntheticDetector(fp.pattern, alpha, beta)
        amps = sorted(amps)
        scores = [det.score(base + a * fp.pattern) for a in amps]
        assert all(x <= y for x, y in zip(scores, scores[1:]))

    def test_batch_matches_single(self):
        fp = make_fingerprint()
        imgs = plant_fingerprint(gen_base_images(10, seed=4), fp)
        det = SyntheticDetector(fp.pattern, 80.0, 0.02)
        np.testing.assert_allclose(det.score_many(imgs), [det(i) for i in imgs], rtol=0, atol=1e-15)

    def test_calibration_targets(self):
        fp = make_fingerprint()
        real = gen_base_images(200, seed=10)
        fake = plant_fingerprint(gen_base_images(200, seed=11), fp)
        det, stats = calibrate_detector(fp, real, fake, min_fake_score=0.8)
        assert stats["tp_rate"] >= 0.95 and stats["fp_rate"] <= 0.05
        assert stats["mean_score_real"] < 0.3 and stats["confident_fakes"] >= 0.95
        assert np.mean(det.score_many(fake) > 0.5) == stats["tp_rate"]
