import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ganattack.kernels import DimensionError
from ganattack.metrics import detection_rate, evaluate, psnr, render_report, ssim
from oracles import ssim_windows


class FixedDetector:
    """Scores by mean brightness."""

    def score(self, img):
        return float(np.mean(img))


class TestPsnr:
    def test_uniform_difference(self):
        for hi, lo in [(0.5, 0.4), (0.1, 0.0), (0.2, 0.1), (1.0, 0.9), (0.35, 0.25)]:
            assert psnr(np.full((3, 8, 8), hi), np.full((3, 8, 8), lo)) == 20.0
        assert psnr(np.full((3, 224, 224), 0.1), np.zeros((3, 224, 224))) == 20.0

    def test_identical_is_infinite(self):
        x = np.random.default_rng(0).random((3, 8, 8))
        assert math.isinf(psnr(x, x))

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


class TestSsim:
    def test_identity(self):
        x = np.random.default_rng(0).random((3, 16, 16))
        assert ssim(x, x) == 1.0

    def test_constant_black_white(self):
        assert ssim(np.zeros((3, 16, 16)), np.ones((3, 16, 16))) == pytest.approx(1e-4, rel=0.05)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_window_loops(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((3, 14, 13))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_windows(a, b), abs=1e-12)

    @given(arrays(np.float64, (3, 12, 12), elements=st.floats(0, 1)),
           arrays(np.float64, (3, 12, 12), elements=st.floats(0, 1)))
    @settings(max_examples=40, deadline=None)
    def test_bounded_and_symmetric(self, a, b):
        s = ssim(a, b)
        assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9
        assert s == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((3, 8, 8)), np.ones((3, 8, 8)))


class TestDetectionRate:
    def test_strict_threshold(self):
        imgs = np.stack([np.full((3, 4, 4), v) for v in (0.4, 0.5, 0.6, 0.9)])
        assert detection_rate(imgs, FixedDetector(), 0.5) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            detection_rate(np.zeros((0, 3, 4, 4)), FixedDetector())


def make_report():
    rng = np.random.default_rng(0)
    groups = {"b": rng.random((3, 3, 16, 16)), "a": rng.random((2, 3, 16, 16))}
    attacks = [("dim", lambda x: x * 0.5), ("broken", lambda x: 1 / 0)]
    return evaluate(groups, attacks, [("mean", FixedDetector())])


class TestReport:
    def test_structure(self):
        r = make_report()
        assert r.attacks == ["none", "dim", "broken"]
        assert r.groups == ["a", "b"]
        assert math.isinf(r.cell("none", "a").psnr)
        assert r.cell("broken", "a").error.startswith("ZeroDivisionError")
        assert r.cell("dim", "b").n == 3

    def test_csv(self):
        text = render_report(make_report(), "csv")
        lines = text.strip().split("\n")
        assert lines[0] == "attack,group,detector,p_d,psnr_db,ssim,n"
        assert len(lines) == 1 + 3 * 2
        assert lines[1].startswith("none,a,mean,")

    def test_markdown(self):
        text = render_report(make_report(), "markdown")
        assert "| Attack methods | a | b | Average |" in text
        assert "Without attack" in text
        assert "### Failed cells" in text

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_report(make_report(), "html")

    def test_average(self):
        r = make_report()
        want = np.mean([r.cell("dim", g).psnr for g in r.groups])
        assert r.average("dim", "psnr") == pytest.approx(want)
