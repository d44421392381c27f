"""Image files: binary PPM (P6, maxval 255) always, PNG when Pillow is present."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .kernels import FormatError

IMAGE_SUFFIXES = (".ppm", ".png")
_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def quantize(img: np.ndarray) -> np.ndarray:
    """``3 x H x W`` floats -> ``H x W x 3`` uint8 after clamping to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got {img.shape}")
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    px = quantize(img)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    m = _HEADER.match(data)
    if not m:
        raise FormatError("malformed PPM header (expected binary P6)")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    if w < 1 or h < 1:
        raise FormatError("PPM dimensions must be positive")
    payload = data[m.end():]
    need = w * h * 3
    if len(payload) < need:
        raise FormatError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    px = np.frombuffer(payload, dtype=np.uint8, count=need).reshape(h, w, 3)
    return dequantize(px)


def _pil():
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - depends on environment
        raise FormatError("PNG support needs Pillow (pip install ganattack[png])") from None
    return Image


def read_image(path, size: int | None = None) -> np.ndarray:
    """Load an RGB image as ``3 x H x W`` floats in [0, 1].

    With ``size`` the image is bicubically resized to ``size x size``.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        Image = _pil()
        with Image.open(path) as im:
            img = dequantize(np.asarray(im.convert("RGB")))
    else:
        img = decode_ppm(path.read_bytes())
    if size is not None and img.shape[1:] != (size, size):
        from .baselines import bicubic_resize

        img = bicubic_resize(img, size, size)
    return img


def write_image(img: np.ndarray, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        Image = _pil()
        Image.fromarray(quantize(img), "RGB").save(path)
        return
    data = encode_ppm(img)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def read_dir(directory, size: int | None = None) -> tuple[list[str], np.ndarray]:
    paths = list_images(directory)
    if not paths:
        raise FileNotFoundError(f"no .ppm/.png images in {directory}")
    imgs = [read_image(p, size) for p in paths]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise FormatError(f"images in {directory} differ in size: {sorted(shapes)}")
    return [p.name for p in paths], np.stack(imgs)
