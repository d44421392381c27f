"""Construction of (GAN, simulated-real) training pairs.

Stage 1 keeps GAN images the detector is confident about, stage 2 strips
their fingerprint with a remover, stage 3 keeps only outputs the detector now
calls real.  Comparisons are strict at both thresholds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .kernels import DimensionError
from .net import AttackModelParams, attack_forward
from .oracle import OracleError, score_images
from .train import TrainConfig, train_remover

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    T1: float = 0.8
    T2: float = 0.7

    def __post_init__(self):
        for name in ("T1", "T2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class SamplePair:
    gan: np.ndarray
    simulated_real: np.ndarray
    score_gan: float
    score_sim: float
    index: int = -1


@dataclass
class Manifest:
    stage1_in: int = 0
    stage1_out: int = 0
    stage2_out: int = 0
    stage3_out: int = 0
    rejected: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"stage1_in": self.stage1_in, "stage1_out": self.stage1_out,
                "stage2_out": self.stage2_out, "stage3_out": self.stage3_out,
                "rejected": list(self.rejected)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _scores(det, images, what: str) -> np.ndarray:
    try:
        return score_images(det, images)
    except OracleError:
        # rescore one by one so the failure can name its image
        for i, img in enumerate(images):
            try:
                score_images(det, [img])
            except OracleError as exc:
                raise PipelineError(f"{what}: detector failed on image {i}: {exc}") from exc
        raise


def stage1_select(candidates, det, T1: float = 0.8):
    """Indices, images and scores of candidates with P_GAN > T1, in input order."""
    if len(candidates) == 0:
        return [], [], []
    scores = _scores(det, candidates, "stage 1")
    keep = [i for i, s in enumerate(scores) if s > T1]
    return keep, [np.array(candidates[i], copy=True) for i in keep], [float(scores[i]) for i in keep]


def gaussian_remover(k: int = 5) -> Callable[[np.ndarray], np.ndarray]:
    """Fixed low-pass fallback remover for quick runs."""
    from .baselines import gaussian_filter

    return lambda img: gaussian_filter(img, k)


def stage2_remove(images, remover, batch_size: int = 64) -> list[np.ndarray]:
    """Pass each image through the remover; outputs are clamped to [0, 1]."""
    if len(images) == 0:
        return []
    x = np.stack([np.asarray(im) for im in images])
    if isinstance(remover, AttackModelParams):
        if x.shape[-2] % 8 or x.shape[-1] % 8:
            raise DimensionError(f"images {x.shape[-2:]} incompatible with remover", axis="spatial")
        outs = [attack_forward(remover, x[s:s + batch_size].astype(remover.weight("conv1").dtype))
                for s in range(0, len(x), batch_size)]
        y = np.concatenate(outs).astype(np.float64)
    else:
        y = np.asarray(remover(x), dtype=np.float64)
    if y.shape != x.shape:
        raise DimensionError(f"remover output {y.shape} vs input {x.shape}", axis="image")
    return list(np.clip(y, 0.0, 1.0))


def stage3_check(pairs, det, T2: float = 0.7, gan_scores=None, indices=None):
    """Keep pairs whose simulated-real image scores below ``1 - T2``.

    Returns ``(kept_pairs, rejected)`` where ``rejected`` lists
    ``{"index", "score"}`` for each discarded candidate.
    """
    if len(pairs) == 0:
        log.warning("stage 3 received no candidates")
        return [], []
    cands = [p[1] for p in pairs]
    scores = _scores(det, cands, "stage 3")
    gan_scores = gan_scores if gan_scores is not None else _scores(det, [p[0] for p in pairs], "stage 3")
    indices = indices if indices is not None else list(range(len(pairs)))
    # 1 - 0.7 is 0.30000000000000004 in binary; take the decimal difference so
    # a score of exactly 0.3 is rejected as the strict comparison demands
    limit = float(Fraction(1) - Fraction(repr(float(T2))))
    kept, rejected = [], []
    for (gan, sim), s, sg, idx in zip(pairs, scores, gan_scores, indices):
        if s < limit:
            kept.append(SamplePair(np.array(gan, copy=True), np.array(sim, copy=True), float(sg), float(s),
                                   int(idx)))
        else:
            rejected.append({"index": int(idx), "score": float(s)})
    if not kept:
        log.warning("stage 3 rejected every candidate (threshold %.3f)", limit)
    return kept, rejected


def build_training_set(gan_images, real_images, det, cfg: PipelineConfig = PipelineConfig(),
                       train_cfg: TrainConfig | None = None, remover=None,
                       remover_steps: int | None = None):
    """Run stages 1-3.

    Unless a ``remover`` (trained params or a callable) is supplied, a
    one-class remover is first trained on ``real_images``.  Returns
    ``(pairs, manifest, remover)``.
    """
    if len(gan_images) == 0:
        raise PipelineError("no GAN images supplied")
    if remover is None:
        if real_images is None or len(real_images) == 0:
            raise PipelineError("no real images to train the remover on")
        remover, _, _ = train_remover(np.asarray(real_images), train_cfg or TrainConfig(),
                                      max_steps=remover_steps)
    manifest = Manifest(stage1_in=len(gan_images))
    idx, selected, s1 = stage1_select(gan_images, det, cfg.T1)
    manifest.stage1_out = len(selected)
    removed = stage2_remove(selected, remover)
    manifest.stage2_out = len(removed)
    pairs, rejected = stage3_check(list(zip(selected, removed)), det, cfg.T2, gan_scores=s1, indices=idx)
    manifest.stage3_out = len(pairs)
    manifest.rejected = rejected
    log.info("pipeline: %d -> %d -> %d -> %d", manifest.stage1_in, manifest.stage1_out,
             manifest.stage2_out, manifest.stage3_out)
    if not pairs:
        raise PipelineError(
            f"no training pairs survived (stage 1 kept {manifest.stage1_out}, stage 3 kept 0); "
            f"consider lowering T1 (now {cfg.T1}) or T2 (now {cfg.T2})")
    return pairs, manifest, remover
