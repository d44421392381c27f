"""Black-box anti-forensic attack on GAN-image detectors.

An encoder-decoder learns a small contrastive perturbation that moves GAN
images toward fingerprint-free "simulated real" versions of themselves,
together with the pair-construction pipeline, conventional baseline attacks,
quality metrics and a synthetic end-to-end benchmark.
"""

from .kernels import ConvSpec, DimensionError, FormatError
from .net import (
    AttackModelParams,
    Perturbation,
    attack_forward,
    build_attack_model,
    contrastive_loss,
    decode,
    encode,
    perturbation,
)
from .train import AdamWState, TrainConfig, cosine_lr, train_attack, train_remover

__version__ = "0.1.0"

__all__ = [
    "AdamWState",
    "AttackModelParams",
    "ConvSpec",
    "DimensionError",
    "FormatError",
    "Perturbation",
    "TrainConfig",
    "attack_forward",
    "build_attack_model",
    "contrastive_loss",
    "cosine_lr",
    "decode",
    "encode",
    "perturbation",
    "train_attack",
    "train_remover",
]
