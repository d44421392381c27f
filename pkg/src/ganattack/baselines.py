"""Conventional comparison attacks: Gaussian blur, median filter, bicubic resize.

All three work per channel on ``3 x H x W`` images (or ``N x 3 x H x W``
batches) and replicate edge pixels at the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SUPPORTED_KERNELS = (3, 5)


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    kernel: int
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "median"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.kind == "gaussian" and (self.sigma is None or self.sigma <= 0):
            raise ValueError("gaussian filter needs sigma > 0")


def _check_kernel(k: int) -> None:
    if k not in SUPPORTED_KERNELS:
        raise ValueError(f"unsupported kernel size {k}; expected one of {SUPPORTED_KERNELS}")


def gaussian_sigma(k: int) -> float:
    """Size-derived sigma: 0.8 for 3x3, 1.1 for 5x5."""
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def gaussian_kernel1d(k: int, sigma: float | None = None) -> np.ndarray:
    sigma = gaussian_sigma(k) if sigma is None else sigma
    r = np.arange(k) - (k - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _spatial_axes(img: np.ndarray) -> tuple[int, int]:
    if img.ndim not in (3, 4):
        raise ValueError(f"expected C x H x W or N x C x H x W, got {img.shape}")
    return img.ndim - 2, img.ndim - 1


def gaussian_filter(img: np.ndarray, k: int) -> np.ndarray:
    _check_kernel(k)
    g = gaussian_kernel1d(k)
    ay, ax = _spatial_axes(img)
    out = ndimage.correlate1d(np.asarray(img, dtype=np.float64), g, axis=ay, mode="nearest")
    return ndimage.correlate1d(out, g, axis=ax, mode="nearest")


def median_filter(img: np.ndarray, k: int) -> np.ndarray:
    _check_kernel(k)
    size = [1] * img.ndim
    ay, ax = _spatial_axes(img)
    size[ay] = size[ax] = k
    return ndimage.median_filter(np.asarray(img, dtype=np.float64), size=size, mode="nearest")


def cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (Catmull-Rom for a = -0.5)."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """Dense ``n_out x n_in`` resampling operator with half-pixel centres and
    edge replication."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    for off in range(-1, 3):
        j = base + off
        w = cubic_weight(src - j, a)
        np.add.at(m, (np.arange(n_out), np.clip(j, 0, n_in - 1)), w)
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    x = np.asarray(img, dtype=np.float64)
    ay, ax = _spatial_axes(x)
    my = resize_matrix(x.shape[ay], out_h)
    mx = resize_matrix(x.shape[ax], out_w)
    out = np.einsum("ij,...jk,lk->...il", my, x, mx)
    return np.clip(out, 0.0, 1.0)


def resize_square(size: int):
    def attack(img: np.ndarray) -> np.ndarray:
        return bicubic_resize(img, size, size)
    attack.__name__ = f"resize{size}"
    return attack


BASELINES = {
    "gf3": lambda img: gaussian_filter(img, 3),
    "gf5": lambda img: gaussian_filter(img, 5),
    "mf3": lambda img: median_filter(img, 3),
    "mf5": lambda img: median_filter(img, 5),
    "resize256": resize_square(256),
    "resize512": resize_square(512),
}

LABELS = {
    "none": "Without attack",
    "gf3": "GF (3x3)",
    "gf5": "GF (5x5)",
    "mf3": "MF (3x3)",
    "mf5": "MF (5x5)",
    "resize256": "Resizing (256x256)",
    "resize512": "Resizing (512x512)",
    "remover": "GANPrintR-style remover",
    "model": "Proposed",
}

SIZE_PRESERVING = {"none", "gf3", "gf5", "mf3", "mf5", "remover", "model"}
