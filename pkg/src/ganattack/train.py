"""AdamW with cosine-annealed learning rate and the two training loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .kernels import DimensionError, FormatError
from .net import (
    AttackModelParams,
    backward,
    build_attack_model,
    contrastive_loss,
    contrastive_loss_grad,
    forward_with_cache,
    read_checkpoint,
    write_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became NaN; ``params``/``state`` hold the last good step."""

    def __init__(self, message, params=None, state=None, history=None):
        super().__init__(message)
        self.params = params
        self.state = state
        self.history = history


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-3
    lr_min: float = 1e-6
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.01
    # fixed step budget; overrides epochs when set (the last epoch is cut short)
    steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: AttackModelParams) -> "AdamWState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()}, 0)

    def copy(self) -> "AdamWState":
        return AdamWState({k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.t)


def cosine_lr(step: int, total_steps: int, lr0: float = 1e-3, lr_min: float = 1e-6) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr0
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params: AttackModelParams, grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, cfg: TrainConfig) -> tuple[AttackModelParams, AdamWState]:
    """One decoupled-weight-decay Adam update; returns new params and state."""
    for k, g in grads.items():
        if g.shape != params.tensors[k].shape:
            raise DimensionError(f"gradient {k} has shape {g.shape}", axis=k)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}")
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, w in params.tensors.items():
        g = grads[k]
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam) + cfg.weight_decay * w
        new_p[k] = w - lr * step
        new_m[k], new_v[k] = m, v
    return (AttackModelParams(params.latent_channels, params.widths, new_p),
            AdamWState(new_m, new_v, t))


def total_steps(n_samples: int, cfg: TrainConfig) -> int:
    if cfg.steps is not None:
        return cfg.steps
    return cfg.epochs * math.ceil(n_samples / cfg.batch_size)


def _check_images(images: np.ndarray) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected N x 3 x H x W, got {images.shape}", axis="image")
    if images.shape[2] % 8 or images.shape[3] % 8:
        raise DimensionError("image dims must be divisible by 8", axis="spatial")


def _batches(n: int, cfg: TrainConfig, epoch_rng: np.random.Generator):
    order = epoch_rng.permutation(n)
    for s in range(0, n, cfg.batch_size):
        yield order[s:s + cfg.batch_size]


def _run(objective, n: int, cfg: TrainConfig, params: AttackModelParams,
         state: AdamWState | None, max_steps: int | None, checkpoint_path=None):
    """Shared loop: seeded shuffles, per-step cosine lr over the full run.

    ``objective(params, batch_idx)`` returns ``(loss, grads)``.  Steps already
    recorded in ``state.t`` are skipped, which is how a resumed run lines up
    with an uninterrupted one.  ``max_steps`` stops early (counting from the
    start of the run) without changing the schedule.
    """
    state = state or AdamWState.zeros_like(params)
    total = total_steps(n, cfg)
    stop = total if max_steps is None else min(total, max_steps)
    history: list[float] = []
    rng = np.random.default_rng(cfg.seed)
    step = 0
    epochs = math.ceil(total / math.ceil(n / cfg.batch_size)) if cfg.steps is not None else cfg.epochs
    for _ in range(epochs):
        for idx in _batches(n, cfg, rng):
            if step >= stop:
                return params, state, history
            if step < state.t:
                step += 1
                continue
            loss, grads = objective(params, idx)
            if not np.isfinite(loss):
                if checkpoint_path is not None:
                    save_checkpoint(params, state, checkpoint_path)
                raise TrainingDiverged(f"loss is {loss} at step {step + 1}", params, state, history)
            lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min)
            try:
                params, state = adamw_step(params, grads, state, lr, cfg)
            except FloatingPointError as exc:
                if checkpoint_path is not None:
                    save_checkpoint(params, state, checkpoint_path)
                raise TrainingDiverged(str(exc), params, state, history) from None
            history.append(loss)
            step += 1
            if step % 50 == 0:
                log.info("step %d/%d loss %.5f lr %.2e", step, total, loss, lr)
    return params, state, history


def train_attack(gan: np.ndarray, simulated_real: np.ndarray, cfg: TrainConfig,
                 params: AttackModelParams | None = None, state: AdamWState | None = None,
                 max_steps: int | None = None, latent_channels: int = 32,
                 widths=None, checkpoint_path=None):
    """Fit the encoder-decoder under the contrastive loss.

    ``gan`` and ``simulated_real`` are ``N x 3 x H x W`` arrays of paired
    images.  Returns ``(params, state, loss_history)``.
    """
    gan = np.asarray(gan)
    simulated_real = np.asarray(simulated_real)
    if len(gan) == 0:
        raise ValueError("no training pairs")
    if gan.shape != simulated_real.shape:
        raise DimensionError("pair arrays differ in shape", axis="image")
    _check_images(gan)
    if params is None:
        kw = {} if widths is None else {"widths": tuple(widths)}
        params = build_attack_model(latent_channels, cfg.seed, dtype=gan.dtype, **kw)

    def objective(p, idx):
        x, r = gan[idx], simulated_real[idx]
        out, cache = forward_with_cache(p, x)
        loss = contrastive_loss(out, r, x)
        grads, _ = backward(p, cache, contrastive_loss_grad(out, r, x))
        return loss, grads

    return _run(objective, len(gan), cfg, params, state, max_steps, checkpoint_path)


def train_remover(real: np.ndarray, cfg: TrainConfig, params: AttackModelParams | None = None,
                  state: AdamWState | None = None, max_steps: int | None = None,
                  latent_channels: int = 32, widths=None, checkpoint_path=None):
    """Fit the same encoder-decoder as a one-class autoencoder on real images.

    Minimizes the mean absolute reconstruction error.  Returns
    ``(params, state, loss_history)``.
    """
    real = np.asarray(real)
    if len(real) == 0:
        raise ValueError("no real images")
    _check_images(real)
    if params is None:
        kw = {} if widths is None else {"widths": tuple(widths)}
        params = build_attack_model(latent_channels, cfg.seed, dtype=real.dtype, **kw)

    def objective(p, idx):
        x = real[idx]
        out, cache = forward_with_cache(p, x)
        diff = out - x
        loss = float(np.abs(diff).mean())
        grads, _ = backward(p, cache, (np.sign(diff) / diff.size).astype(diff.dtype))
        return loss, grads

    return _run(objective, len(real), cfg, params, state, max_steps, checkpoint_path)


def save_checkpoint(params: AttackModelParams, state: AdamWState | None, path) -> None:
    tensors = dict(params.tensors)
    if state is not None:
        for k in params.tensors:
            tensors[f"adamw.m.{k}"] = state.m[k]
            tensors[f"adamw.v.{k}"] = state.v[k]
        tensors["adamw.t"] = np.array([state.t], dtype=np.float64)
    write_checkpoint(tensors, path)


def load_checkpoint(path) -> tuple[AttackModelParams, AdamWState | None]:
    tensors = read_checkpoint(path)
    params = AttackModelParams.from_tensors({k: v for k, v in tensors.items() if not k.startswith("adamw.")})
    if "adamw.t" not in tensors:
        return params, None
    try:
        m = {k: tensors[f"adamw.m.{k}"] for k in params.tensors}
        v = {k: tensors[f"adamw.v.{k}"] for k in params.tensors}
    except KeyError as exc:
        raise FormatError(f"checkpoint missing optimizer tensor {exc}") from None
    return params, AdamWState(m, v, int(tensors["adamw.t"][0]))
