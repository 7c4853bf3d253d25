"""Black-box transfer target: an age model the obfuscation pipeline never sees.

Trained on its own cohort split with a disjoint seed and a hybrid architecture
that no teacher shares. Only the evaluation harness may import this module.
"""

from __future__ import annotations

from .age import AgeEncoder, train_age_encoder

HELDOUT_SEED = 9901
HELDOUT_FEATURE_DIM = 80


def train_heldout_model(train_images, train_ages, val_images, val_ages,
                        epochs=25) -> AgeEncoder:
    enc = train_age_encoder(train_images, train_ages, val_images, val_ages,
                            arch="hybrid", task="regression",
                            feature_dim=HELDOUT_FEATURE_DIM,
                            seed=HELDOUT_SEED, width=80, epochs=epochs)
    return enc
