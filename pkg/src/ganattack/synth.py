"""Procedural stand-ins for real images, GAN fingerprints and a detector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import DimensionError


def gen_base_images(n: int, height: int = 32, width: int = 32, seed: int = 0,
                    max_freq: int = 2, n_waves: int = 4, noise: float = 0.002,
                    wave_amp: tuple[float, float] = (0.02, 0.08),
                    colour_range: tuple[float, float] = (0.5, 0.5)) -> np.ndarray:
    """Smooth random fields: mid-grey plus low-frequency sinusoids plus mild noise.

    ``colour_range`` widens the per-image, per-channel offset; the default keeps
    every image centred on 0.5.  Wave frequencies are whole cycles per image no higher than ``max_freq`` so
    the content is orthogonal to fingerprints planted at higher frequencies.
    Returns an ``n x 3 x H x W`` float64 array in [0, 1].
    """
    if height % 8 or width % 8:
        raise DimensionError("image dims must be divisible by 8", axis="spatial")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    freqs = [(fy, fx) for fy in range(-max_freq, max_freq + 1) for fx in range(0, max_freq + 1)
             if (fx > 0 or fy > 0)]
    out = np.empty((n, 3, height, width))
    for k in range(n):
        img = np.broadcast_to(rng.uniform(*colour_range, 3)[:, None, None], (3, height, width)).copy()
        for _ in range(n_waves):
            fy, fx = freqs[rng.integers(len(freqs))]
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(*wave_amp)
            gains = rng.uniform(0.5, 1.0, 3)
            wave = np.cos(2 * np.pi * (fy * yy / height + fx * xx / width) + phase)
            img += amp * gains[:, None, None] * wave
        img += noise * rng.standard_normal(img.shape)
        out[k] = img
    return np.clip(out, 0.0, 1.0)


@dataclass
class FingerprintPattern:
    pattern: np.ndarray
    amplitude: float = 0.04

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")


def make_fingerprint(height: int = 32, width: int = 32, freq: tuple[int, int] = (0, 4),
                     amplitude: float = 0.04) -> FingerprintPattern:
    """Fixed periodic grid with an opposed-sign middle channel, zero-mean, unit norm."""
    yy, xx = np.mgrid[0:height, 0:width]
    fy, fx = freq
    base = np.cos(2 * np.pi * (fy * yy / height + fx * xx / width))
    p = np.stack([base, -base, base])
    p -= p.mean()
    p /= np.linalg.norm(p)
    return FingerprintPattern(p, amplitude)


def plant_fingerprint(img: np.ndarray, fp: FingerprintPattern) -> np.ndarray:
    if img.shape[-3:] != fp.pattern.shape:
        raise DimensionError(f"image {img.shape} vs pattern {fp.pattern.shape}", axis="image")
    return np.clip(img + fp.amplitude * fp.pattern, 0.0, 1.0)


def pattern_correlation(img: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    """<img - mean(img), pattern> per image (scalar for a single image)."""
    if img.shape[-3:] != pattern.shape:
        raise DimensionError(f"image {img.shape} vs pattern {pattern.shape}", axis="image")
    x = np.asarray(img, dtype=np.float64)
    axes = (-3, -2, -1)
    centered = x - x.mean(axis=axes, keepdims=True)
    return np.sum(centered * pattern, axis=axes)


@dataclass
class SyntheticDetector:
    """Matched-filter oracle: ``sigmoid(alpha * (corr - beta))``."""

    pattern: np.ndarray
    alpha: float
    beta: float

    name = "synthetic"

    def score(self, img: np.ndarray) -> float:
        return float(self.score_many(np.asarray(img)[None])[0])

    def score_many(self, imgs: np.ndarray) -> np.ndarray:
        corr = pattern_correlation(np.asarray(imgs), self.pattern)
        return 1.0 / (1.0 + np.exp(-self.alpha * (corr - self.beta)))

    def __call__(self, img: np.ndarray) -> float:
        return self.score(img)


def synth_detector_score(det: SyntheticDetector, img: np.ndarray) -> float:
    return det.score(img)


def calibrate_detector(fp: FingerprintPattern, real: np.ndarray, fake: np.ndarray,
                       tau: float = 0.5, target_tp: float = 0.95, target_fp: float = 0.05,
                       min_fake_score: float | None = None, alphas=None) -> tuple[SyntheticDetector, dict]:
    """Pick ``beta`` midway between the class median correlations, then sweep
    ``alpha`` upward until the calibration targets are met at ``tau``.

    With ``min_fake_score`` at least ``target_tp`` of the fakes must also
    score above it (so a confidence filter downstream keeps them).
    """
    c_real = pattern_correlation(real, fp.pattern)
    c_fake = pattern_correlation(fake, fp.pattern)
    beta = 0.5 * (float(np.median(c_real)) + float(np.median(c_fake)))
    gap = max(abs(float(np.median(c_fake)) - beta), 1e-12)
    if alphas is None:
        alphas = [s / gap for s in (1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0)]
    chosen, stats = None, {}
    for a in alphas:
        det = SyntheticDetector(fp.pattern, float(a), beta)
        s_fake, s_real = det.score_many(fake), det.score_many(real)
        stats = {"alpha": float(a), "beta": beta,
                 "tp_rate": float(np.mean(s_fake > tau)), "fp_rate": float(np.mean(s_real > tau)),
                 "mean_score_real": float(s_real.mean()), "mean_score_fake": float(s_fake.mean()),
                 "confident_fakes": None if min_fake_score is None else float(np.mean(s_fake > min_fake_score))}
        chosen = det
        ok = stats["tp_rate"] >= target_tp and stats["fp_rate"] <= target_fp and stats["mean_score_real"] < 0.3
        if min_fake_score is not None:
            ok = ok and stats["confident_fakes"] >= target_tp
        if ok:
            break
    return chosen, stats
