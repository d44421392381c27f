"""Dense layer primitives with hand-written backward passes.

Tensors are plain :class:`numpy.ndarray` objects.  Every spatial op accepts
either a single ``C x H x W`` array or a batch ``N x C x H x W`` and returns
the same rank it was given.  All kernels are 3x3, stride 1; pooling is 2x2,
stride 2.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

KERNEL = 3


class DimensionError(ValueError):
    """Shape mismatch; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class FormatError(ValueError):
    """Malformed or truncated binary file."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    padding: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, dilation: int = 1) -> "ConvSpec":
        """Spec whose output spatial size equals its input size."""
        return cls(in_channels, out_channels, padding=dilation, dilation=dilation)

    def out_size(self, n: int) -> int:
        return n + 2 * self.padding - self.dilation * (KERNEL - 1)

    def in_size(self, n: int) -> int:
        return n - 2 * self.padding + self.dilation * (KERNEL - 1)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}", axis="rank")


def _check_channels(x: np.ndarray, expected: int, what: str) -> None:
    if x.shape[1] != expected:
        raise DimensionError(
            f"{what}: channel axis has {x.shape[1]}, expected {expected}", axis="channel"
        )


def _check_weight(w: np.ndarray, spec: ConvSpec) -> None:
    if w.shape != (spec.out_channels, spec.in_channels, KERNEL, KERNEL):
        raise DimensionError(
            f"weight shape {w.shape} does not match "
            f"{(spec.out_channels, spec.in_channels, KERNEL, KERNEL)}",
            axis="weight",
        )


def _im2col(xc: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Patch matrix (C*9, N*H'*W') of a channel-major C x N x H x W array."""
    c, n, h, w = xc.shape
    p, d = spec.padding, spec.dilation
    ho, wo = spec.out_size(h), spec.out_size(w)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small for {spec}", axis="spatial")
    if p:
        xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=xc.dtype)
        xp[:, :, p:p + h, p:p + w] = xc
    else:
        xp = xc
    cols = np.empty((c, KERNEL, KERNEL, n, ho, wo), dtype=xc.dtype)
    for u in range(KERNEL):
        for v in range(KERNEL):
            cols[:, u, v] = xp[:, :, u * d:u * d + ho, v * d:v * d + wo]
    return cols.reshape(c * KERNEL * KERNEL, n * ho * wo), ho, wo


def _col2im(cols: np.ndarray, c: int, n: int, h: int, w: int, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches into a C x N x H x W array."""
    p, d = spec.padding, spec.dilation
    ho, wo = spec.out_size(h), spec.out_size(w)
    cols = cols.reshape(c, KERNEL, KERNEL, n, ho, wo)
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for u in range(KERNEL):
        for v in range(KERNEL):
            xp[:, :, u * d:u * d + ho, v * d:v * d + wo] += cols[:, u, v]
    return xp[:, :, p:p + h, p:p + w] if p else xp


def _matmul(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # float32 operands are promoted so the reduction runs in float64
    if a.dtype == np.float32 or b.dtype == np.float32:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(out_dtype)
    return a @ b


# Channel-major cores.  Arrays are C x N x H x W; the network keeps its
# activations in this layout so no per-layer transposes are needed.

def conv2d_cm(xc: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec):
    """Returns the output and the patch matrix (reusable for the weight gradient)."""
    _check_weight(w, spec)
    if xc.shape[0] != spec.in_channels:
        raise DimensionError(f"conv2d input: channel axis has {xc.shape[0]}, expected {spec.in_channels}",
                             axis="channel")
    n = xc.shape[1]
    cols, ho, wo = _im2col(xc, spec)
    y = _matmul(w.reshape(spec.out_channels, -1), cols, xc.dtype).reshape(spec.out_channels, n, ho, wo)
    if b is not None:
        if b.shape != (spec.out_channels,):
            raise DimensionError(f"bias shape {b.shape}", axis="bias")
        y += b[:, None, None, None]
    return y, cols


def conv2d_input_grad_cm(gc: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    _check_weight(w, spec)
    if gc.shape[0] != spec.out_channels:
        raise DimensionError(f"conv2d output gradient: channel axis has {gc.shape[0]}, "
                             f"expected {spec.out_channels}", axis="channel")
    _, n, ho, wo = gc.shape
    h, wd = spec.in_size(ho), spec.in_size(wo)
    if h < 1 or wd < 1:
        raise DimensionError(f"gradient {ho}x{wo} incompatible with {spec}", axis="spatial")
    gcols = _matmul(w.reshape(spec.out_channels, -1).T, gc.reshape(spec.out_channels, -1), gc.dtype)
    return _col2im(gcols, spec.in_channels, n, h, wd, spec)


def conv2d_weight_grad_cm(gc: np.ndarray, cols: np.ndarray, spec: ConvSpec):
    g2 = gc.reshape(spec.out_channels, -1)
    if g2.shape[1] != cols.shape[1]:
        raise DimensionError(f"gradient has {g2.shape[1]} positions, patches have {cols.shape[1]}",
                             axis="spatial")
    gw = _matmul(g2, cols.T, gc.dtype).reshape(spec.out_channels, spec.in_channels, KERNEL, KERNEL)
    gbias = g2.sum(axis=1, dtype=np.float64).astype(gc.dtype)
    return gw, gbias


def _to_cm(x: np.ndarray) -> tuple[np.ndarray, bool]:
    xb, squeeze = _batched(x)
    return xb.transpose(1, 0, 2, 3), squeeze


def _from_cm(yc: np.ndarray, squeeze: bool) -> np.ndarray:
    y = np.ascontiguousarray(yc.transpose(1, 0, 2, 3))
    return y[0] if squeeze else y


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Zero-padded, dilated 3x3 cross-correlation plus bias."""
    xc, squeeze = _to_cm(x)
    return _from_cm(conv2d_cm(xc, w, b, spec)[0], squeeze)


def conv2d_input_grad(gy: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gradient of a conv2d output cotangent with respect to the conv2d input.

    The same arithmetic is the forward map of a transposed convolution.
    """
    gc, squeeze = _to_cm(gy)
    return _from_cm(conv2d_input_grad_cm(gc, w, spec), squeeze)


def conv2d_weight_grad(gy: np.ndarray, x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a conv2d output cotangent with respect to weight and bias.

    Batched inputs are summed over the batch axis.
    """
    gc, _ = _to_cm(gy)
    xc, _ = _to_cm(x)
    if xc.shape[0] != spec.in_channels:
        raise DimensionError(f"conv2d input: channel axis has {xc.shape[0]}, expected {spec.in_channels}",
                             axis="channel")
    if gc.shape[0] != spec.out_channels:
        raise DimensionError(f"conv2d output gradient: channel axis has {gc.shape[0]}, "
                             f"expected {spec.out_channels}", axis="channel")
    if gc.shape[1] != xc.shape[1]:
        raise DimensionError("batch sizes differ", axis="batch")
    cols, ho, wo = _im2col(xc, spec)
    if (ho, wo) != gc.shape[2:]:
        raise DimensionError(f"gradient spatial {gc.shape[2:]} != {(ho, wo)}", axis="spatial")
    return conv2d_weight_grad_cm(np.ascontiguousarray(gc), cols, spec)


def conv_transpose2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Transposed convolution: the adjoint of ``conv2d(., w, spec)`` plus bias.

    ``w`` has conv2d layout ``spec.out_channels x spec.in_channels x 3 x 3``,
    so this maps ``spec.out_channels`` channels to ``spec.in_channels``.
    """
    y = conv2d_input_grad(x, w, spec)
    if b is not None:
        if b.shape != (spec.in_channels,):
            raise DimensionError(f"bias shape {b.shape}", axis="bias")
        y = y + (b[:, None, None] if y.ndim == 3 else b[None, :, None, None])
    return y


def maxpool2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling.

    Returns the pooled values and, per output cell, the flat index (into the
    H x W input plane) of the winning cell.  Ties go to the lowest index.
    """
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {h}x{w}", axis="spatial")
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    k = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + k // 2
    cols = 2 * np.arange(w // 2)[None, :] + k % 2
    idx = (rows * w + cols).astype(np.int64)
    if squeeze:
        return y[0], idx[0]
    return y, idx


def _check_indices(idx: np.ndarray, out_w: int) -> None:
    h, w = idx.shape[-2:]
    r, c = np.divmod(idx, out_w)
    ok = (r // 2 == np.arange(h)[:, None]) & (c // 2 == np.arange(w)[None, :]) & (idx >= 0)
    if not ok.all():
        raise DimensionError("pool index outside its 2x2 window", axis="index")


def maxunpool2d(x: np.ndarray, idx: np.ndarray, out_h: int, out_w: int, check: bool = True) -> np.ndarray:
    """Scatter pooled values back to the positions recorded by :func:`maxpool2d`.

    ``check=False`` skips the window test for indices known to come straight
    from :func:`maxpool2d`.
    """
    if idx.shape != x.shape:
        raise DimensionError(f"indices {idx.shape} vs values {x.shape}", axis="index")
    xb, squeeze = _batched(x)
    ib = idx[None] if squeeze else idx
    n, c, h, w = xb.shape
    if (out_h, out_w) != (2 * h, 2 * w):
        raise DimensionError(f"unpool target {out_h}x{out_w} != {2 * h}x{2 * w}", axis="spatial")
    if check:
        _check_indices(ib, out_w)
    y = np.zeros((n, c, out_h * out_w), dtype=xb.dtype)
    np.put_along_axis(y, ib.reshape(n, c, -1), xb.reshape(n, c, -1), axis=-1)
    y = y.reshape(n, c, out_h, out_w)
    return y[0] if squeeze else y


def maxunpool2d_grad(gy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Gradient of :func:`maxunpool2d` w.r.t. its values: a gather at ``idx``.

    Also the backward of :func:`maxpool2d` is ``maxunpool2d(gy, idx, ...)``.
    """
    gb, squeeze = _batched(gy)
    ib = idx[None] if squeeze else idx
    n, c = gb.shape[:2]
    g = np.take_along_axis(gb.reshape(n, c, -1), ib.reshape(n, c, -1), axis=-1).reshape(ib.shape)
    return g[0] if squeeze else g


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(gy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Passes ``gy`` where ``x > 0``; the subgradient at 0 is 0."""
    return np.where(x > 0, gy, 0).astype(gy.dtype, copy=False)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4,
                     coords: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    With ``coords`` (flat indices) only those entries are computed; the rest
    of the result is zero.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    todo = range(flat.size) if coords is None else coords
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


# --- binary tensor format -------------------------------------------------

TENSOR_MAGIC = b"TNS1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_to_bytes(a: np.ndarray) -> bytes:
    dt = np.dtype(a.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {a.dtype}")
    if a.ndim == 0 or a.ndim > 255:
        raise DimensionError("tensor rank must be in 1..255", axis="rank")
    head = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_CODES[dt], a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the next offset."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    if len(buf) < offset + 6:
        raise FormatError("truncated tensor header")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if ndim == 0:
        raise FormatError("zero-rank tensor")
    pos = offset + 6
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    if any(d < 1 for d in dims):
        raise FormatError("tensor dims must be positive")
    pos += 4 * ndim
    dt = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated tensor payload")
    a = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
    return a.astype(dt.newbyteorder("="), copy=False), pos + nbytes


def save_tensor(a: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(a))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    a, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor")
    return a
