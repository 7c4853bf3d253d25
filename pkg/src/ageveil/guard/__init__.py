"""Adversarial-noise-guided obfuscator: noise crafting, feature masking,
the tri-term objective, and joint training."""

from .losses import LossTerms, loss_pp
from .masking import (GuardModel, MaskGenerator, apply_mask, batch_z_score,
                      generate_mask, load_guard)
from .noise import PGD_EPS, PGD_STEP, NoiseCache, craft_noise, z_score
from .training import GuardConfig, train_guard

__all__ = [
    "LossTerms", "loss_pp",
    "GuardModel", "MaskGenerator", "apply_mask", "batch_z_score",
    "generate_mask", "load_guard",
    "PGD_EPS", "PGD_STEP", "NoiseCache", "craft_noise", "z_score",
    "GuardConfig", "train_guard",
]
