"""Encoder-decoder attack network, contrastive loss and checkpoint format.

Encoder: three (3x3 conv, ReLU, 2x2 max-pool) stages followed by a dilated
conv + ReLU producing the latent map.  Decoder: dilated transposed conv +
ReLU back to the pre-latent width, three (conv, ReLU, max-unpool) stages that
reuse the encoder's pool indices, and a final 3x3 transposed conv to RGB.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    ConvSpec,
    DimensionError,
    FormatError,
    conv2d_cm,
    conv2d_input_grad_cm,
    conv2d_weight_grad_cm,
    maxpool2d,
    maxunpool2d,
    maxunpool2d_grad,
    relu,
    relu_grad,
    tensor_from_bytes,
    tensor_to_bytes,
)

DEFAULT_WIDTHS = (32, 64, 128)
LOSS_EPS = 1e-8


@dataclass(frozen=True)
class Layer:
    name: str
    transposed: bool
    spec: ConvSpec

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.spec.out_channels, self.spec.in_channels, 3, 3)

    @property
    def bias_len(self) -> int:
        return self.spec.in_channels if self.transposed else self.spec.out_channels

    @property
    def fan_in(self) -> int:
        cin = self.spec.out_channels if self.transposed else self.spec.in_channels
        return cin * 9


def architecture(latent_channels: int = 32, widths: tuple[int, int, int] = DEFAULT_WIDTHS) -> list[Layer]:
    """Layer table in forward order.

    Transposed layers store their ConvSpec from the point of view of the
    conv2d they are the adjoint of, so ``spec.out_channels`` is their input.
    """
    w1, w2, w3 = widths
    c = latent_channels
    return [
        Layer("conv1", False, ConvSpec.same(3, w1)),
        Layer("conv2", False, ConvSpec.same(w1, w2)),
        Layer("conv3", False, ConvSpec.same(w2, w3)),
        Layer("conv4_dilated", False, ConvSpec.same(w3, c, dilation=2)),
        Layer("tconv1_dilated", True, ConvSpec.same(w3, c, dilation=2)),
        Layer("dconv1", False, ConvSpec.same(w3, w3)),
        Layer("dconv2", False, ConvSpec.same(w3, w2)),
        Layer("dconv3", False, ConvSpec.same(w2, w1)),
        Layer("tconv_out", True, ConvSpec.same(3, w1)),
    ]


@dataclass
class AttackModelParams:
    latent_channels: int
    widths: tuple[int, int, int]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def layers(self) -> list[Layer]:
        return architecture(self.latent_channels, self.widths)

    def weight(self, name: str) -> np.ndarray:
        return self.tensors[f"{name}.weight"]

    def bias(self, name: str) -> np.ndarray:
        return self.tensors[f"{name}.bias"]

    def copy(self) -> "AttackModelParams":
        return AttackModelParams(self.latent_channels, self.widths,
                                 {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "AttackModelParams":
        return AttackModelParams(self.latent_channels, self.widths,
                                 {k: v.astype(dtype) for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "AttackModelParams":
        """Recover the layer widths from the stored weight shapes."""
        try:
            w1 = tensors["conv1.weight"].shape[0]
            w2 = tensors["conv2.weight"].shape[0]
            w3 = tensors["conv3.weight"].shape[0]
            c = tensors["conv4_dilated.weight"].shape[0]
        except KeyError as exc:
            raise FormatError(f"missing tensor {exc}") from None
        params = cls(c, (w1, w2, w3), dict(tensors))
        for layer in params.layers:
            w = tensors.get(f"{layer.name}.weight")
            b = tensors.get(f"{layer.name}.bias")
            if w is None or b is None:
                raise FormatError(f"missing tensors for layer {layer.name}")
            if w.shape != layer.weight_shape or b.shape != (layer.bias_len,):
                raise FormatError(f"bad shapes for layer {layer.name}")
        return params


def build_attack_model(latent_channels: int = 32, seed: int = 0,
                       widths: tuple[int, int, int] = DEFAULT_WIDTHS,
                       dtype=np.float64) -> AttackModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    if latent_channels < 1:
        raise ValueError("latent_channels must be >= 1")
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in architecture(latent_channels, tuple(widths)):
        bound = np.sqrt(6.0 / layer.fan_in)
        tensors[f"{layer.name}.weight"] = rng.uniform(-bound, bound, layer.weight_shape).astype(dtype)
        tensors[f"{layer.name}.bias"] = np.zeros(layer.bias_len, dtype=dtype)
    return AttackModelParams(latent_channels, tuple(widths), tensors)


@dataclass
class LatentState:
    y: np.ndarray
    idx1: np.ndarray
    idx2: np.ndarray
    idx3: np.ndarray
    sizes: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


def _to_cm(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3))


def _state_public(s: LatentState, single: bool) -> LatentState:
    conv = (lambda a: _to_cm(a)[0]) if single else _to_cm
    return LatentState(conv(s.y), conv(s.idx1), conv(s.idx2), conv(s.idx3), s.sizes)


def _state_internal(s: LatentState) -> LatentState:
    conv = (lambda a: _to_cm(a[None])) if s.y.ndim == 3 else _to_cm
    return LatentState(conv(s.y), conv(s.idx1), conv(s.idx2), conv(s.idx3), s.sizes)


def _layer_forward(params: AttackModelParams, layer: Layer, x: np.ndarray, cache: dict | None):
    """One layer on a channel-major C x N x H x W array."""
    w, b = params.weight(layer.name), params.bias(layer.name)
    if layer.transposed:
        y = conv2d_input_grad_cm(x, w, layer.spec)
        if b.shape != (layer.bias_len,):
            raise DimensionError(f"bias shape {b.shape}", axis="bias")
        y += b[:, None, None, None]
    else:
        y, cols = conv2d_cm(x, w, b, layer.spec)
        if cache is not None:
            cache[layer.name + ".cols"] = cols
    if cache is not None:
        cache[layer.name + ".in"] = x
        cache[layer.name + ".z"] = y
    return y


def _check_image(image: np.ndarray) -> None:
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise DimensionError(f"expected 3 x H x W image(s), got {image.shape}", axis="channel")
    h, w = image.shape[-2:]
    if h % 8 or w % 8:
        raise DimensionError(f"spatial dims {h}x{w} must be divisible by 8", axis="spatial")


def _encode_cm(params: AttackModelParams, x: np.ndarray, cache: dict | None) -> LatentState:
    L = {layer.name: layer for layer in params.layers}
    idxs, sizes = [], []
    for name in ("conv1", "conv2", "conv3"):
        z = _layer_forward(params, L[name], x, cache)
        sizes.append(tuple(z.shape[-2:]))
        x, idx = maxpool2d(relu(z))
        idxs.append(idx)
    z = _layer_forward(params, L["conv4_dilated"], x, cache)
    return LatentState(relu(z), idxs[0], idxs[1], idxs[2], tuple(sizes))


def _decode_cm(params: AttackModelParams, s: LatentState, cache: dict | None) -> np.ndarray:
    L = {layer.name: layer for layer in params.layers}
    x = relu(_layer_forward(params, L["tconv1_dilated"], s.y, cache))
    for name, idx, (h, w) in (("dconv1", s.idx3, s.sizes[2]),
                              ("dconv2", s.idx2, s.sizes[1]),
                              ("dconv3", s.idx1, s.sizes[0])):
        z = _layer_forward(params, L[name], x, cache)
        if z.shape != idx.shape:
            raise DimensionError(f"{name} output {z.shape} does not match pool indices {idx.shape}",
                                 axis="index")
        x = maxunpool2d(relu(z), idx, h, w, check=cache is None)
    return _layer_forward(params, L["tconv_out"], x, cache)


def _run_cm(params: AttackModelParams, image: np.ndarray, cache: dict | None):
    """Returns ``(state, attacked, theta, single)``.

    The decoder output is re-expressed as ``image + theta`` with
    ``theta = raw - image`` so the attacked image is the image plus its
    perturbation bit for bit.  The round trip moves ``raw`` by at most one ulp.
    """
    _check_image(image)
    single = image.ndim == 3
    x = _to_cm(image[None] if single else image)
    state = _encode_cm(params, x, cache)
    raw = _decode_cm(params, state, cache)
    if cache is not None:
        cache["state"] = state
    raw = _to_cm(raw)
    if single:
        raw = raw[0]
    theta = raw - image
    return state, image + theta, theta, single


def encode(params: AttackModelParams, image: np.ndarray) -> LatentState:
    """Latent map and pool indices; shapes follow the input's rank."""
    _check_image(image)
    single = image.ndim == 3
    state = _encode_cm(params, _to_cm(image[None] if single else image), None)
    return _state_public(state, single)


def decode(params: AttackModelParams, state: LatentState) -> np.ndarray:
    single = state.y.ndim == 3
    out = _to_cm(_decode_cm(params, _state_internal(state), None))
    return out[0] if single else out


def attack_forward(params: AttackModelParams, image: np.ndarray) -> np.ndarray:
    """Attacked image(s), unclamped."""
    return _run_cm(params, image, None)[1]


def forward_with_cache(params: AttackModelParams, image: np.ndarray):
    cache: dict = {}
    _, out, _, single = _run_cm(params, image, cache)
    cache["single"] = single
    return out, cache


def backward(params: AttackModelParams, cache: dict, grad_out: np.ndarray,
             need_input_grad: bool = False):
    """Reverse pass of :func:`forward_with_cache`.

    Returns ``(grads, grad_input)``; ``grads`` maps tensor names to gradients
    summed over the batch, ``grad_input`` is ``None`` unless requested.
    """
    L = {layer.name: layer for layer in params.layers}
    s: LatentState = cache["state"]
    grads: dict[str, np.ndarray] = {}

    def layer_back(name: str, g: np.ndarray, want_input: bool = True):
        layer = L[name]
        w = params.weight(name)
        x = cache[name + ".in"]
        if layer.transposed:
            # y = T_w(x): dL/dx = conv_w(g), dL/dw = weight grad of conv_w(g) against x
            gx, gcols = conv2d_cm(g, w, None, layer.spec)
            gw, _ = conv2d_weight_grad_cm(x, gcols, layer.spec)
            gb = g.sum(axis=(1, 2, 3))
        else:
            gw, gb = conv2d_weight_grad_cm(g, cache[name + ".cols"], layer.spec)
            gx = conv2d_input_grad_cm(g, w, layer.spec) if want_input else None
        grads[f"{name}.weight"] = gw
        grads[f"{name}.bias"] = gb
        return gx

    g = _to_cm(grad_out[None] if cache["single"] else grad_out)
    g = layer_back("tconv_out", g)
    for name, idx in (("dconv3", s.idx1), ("dconv2", s.idx2), ("dconv1", s.idx3)):
        g = maxunpool2d_grad(g, idx)
        g = relu_grad(g, cache[name + ".z"])
        g = layer_back(name, g)
    g = relu_grad(g, cache["tconv1_dilated.z"])
    g = layer_back("tconv1_dilated", g)

    g = relu_grad(g, cache["conv4_dilated.z"])
    g = layer_back("conv4_dilated", g)
    for name, idx in (("conv3", s.idx3), ("conv2", s.idx2), ("conv1", s.idx1)):
        h, w = s.sizes[("conv1", "conv2", "conv3").index(name)]
        g = maxunpool2d(g, idx, h, w, check=False)
        g = relu_grad(g, cache[name + ".z"])
        g = layer_back(name, g, want_input=(name != "conv1" or need_input_grad))

    ordered = {k: grads[k] for k in params.tensors}
    if g is not None:
        g = _to_cm(g)
        if cache["single"]:
            g = g[0]
    return ordered, g


@dataclass
class Perturbation:
    theta: np.ndarray


def perturbation(params: AttackModelParams, image: np.ndarray) -> Perturbation:
    """Residual added to ``image`` by the attack: ``image + theta`` is the attacked image."""
    return Perturbation(_run_cm(params, image, None)[2])


# --- contrastive loss -------------------------------------------------------

def _as_batch(attacked, target, original):
    a, r, i = (np.asarray(v, dtype=np.float64) if np.asarray(v).dtype != np.float32 else np.asarray(v)
               for v in (attacked, target, original))
    if a.shape != r.shape or a.shape != i.shape:
        raise DimensionError(f"shape mismatch {a.shape} / {r.shape} / {i.shape}", axis="image")
    if a.ndim < 1 or a.shape[0] == 0:
        raise ValueError("empty batch")
    if np.isnan(a).any() or np.isnan(r).any() or np.isnan(i).any():
        raise ValueError("NaN in contrastive loss input")
    return a, r, i


def _per_sample(a, r, i):
    n = a.shape[0]
    num = np.abs(a - r).reshape(n, -1).sum(axis=1, dtype=np.float64)
    den = np.abs(a - i).reshape(n, -1).sum(axis=1, dtype=np.float64) + LOSS_EPS
    return num, den


def contrastive_loss(attacked, target, original) -> float:
    """Mean over the batch of ``|A - R|_1 / (|A - I|_1 + eps)``.

    Each argument is an ``N x ...`` array holding the attacked outputs, the
    simulated-real targets and the original GAN images.
    """
    a, r, i = _as_batch(attacked, target, original)
    num, den = _per_sample(a, r, i)
    return float(np.mean(num / den))


def contrastive_loss_grad(attacked, target, original) -> np.ndarray:
    """Gradient of :func:`contrastive_loss` w.r.t. the attacked outputs (sign(0) = 0)."""
    a, r, i = _as_batch(attacked, target, original)
    n = a.shape[0]
    num, den = _per_sample(a, r, i)
    shape = (n,) + (1,) * (a.ndim - 1)
    num, den = num.reshape(shape), den.reshape(shape)
    g = (np.sign(a - r) * den - num * np.sign(a - i)) / (den * den)
    return (g / n).astype(a.dtype, copy=False)


def contrastive_loss_batch(batch) -> float:
    """Loss over a list of ``(I^A, I^R, I)`` triples."""
    a, r, i = zip(*batch)
    return contrastive_loss(np.stack(a), np.stack(r), np.stack(i))


# --- checkpoint file --------------------------------------------------------

CHECKPOINT_MAGIC = b"CPAB"
CHECKPOINT_VERSION = 1


def checkpoint_to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, a in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(tensor_to_bytes(np.atleast_1d(a)))
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, out = 12, {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated checkpoint entry")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + nlen:
            raise FormatError("truncated tensor name")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8") from None
        pos += nlen
        out[name], pos = tensor_from_bytes(buf, pos)
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return out


def write_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    data = checkpoint_to_bytes(tensors)
    with open(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def save_params(params: AttackModelParams, path) -> None:
    write_checkpoint(params.tensors, path)


def load_params(path) -> AttackModelParams:
    tensors = read_checkpoint(path)
    return AttackModelParams.from_tensors({k: v for k, v in tensors.items() if not k.startswith("adamw.")})
