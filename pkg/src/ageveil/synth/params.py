"""Cohort generation parameters and the in-memory sample record."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SynthParams:
    """Controls for the procedural retina-like image generator.

    The age signal is carried redundantly by three channels: vessel
    tortuosity, background texture spatial frequency, and a global tint
    shift, each linear in age. Disease is carried by bright off-vessel
    lesions and is sampled independently of age.
    """

    seed: int = 7
    n_samples: int = 100
    image_size: int = 64
    age_range: tuple[float, float] = (40.0, 80.0)
    disease_prevalence: float = 0.3
    vessel_base_width: float = 1.4
    tortuosity_base: float = 0.3
    tortuosity_per_year: float = 0.0175
    texture_freq_base: float = 4.0
    texture_freq_per_year: float = 0.15
    texture_amplitude: float = 0.03
    tint_shift_per_year: float = 0.0025
    lesion_count_range: tuple[int, int] = (1, 4)
    lesion_radius_range: tuple[float, float] = (2.0, 4.0)
    pixel_noise_std: float = 0.008

    def __post_init__(self):
        lo, hi = self.age_range
        if not hi > lo:
            raise ValueError(f"age_range must have positive width, got {self.age_range}")
        if not 0.0 <= self.disease_prevalence <= 1.0:
            raise ValueError(f"disease_prevalence must be in [0, 1], got {self.disease_prevalence}")
        if self.n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.lesion_count_range[0] > self.lesion_count_range[1] or self.lesion_count_range[0] < 1:
            raise ValueError(f"invalid lesion_count_range {self.lesion_count_range}")


@dataclass
class Sample:
    """One synthetic subject: image, ground-truth factors, vessel mask."""

    image: np.ndarray          # H x W x 3 float32 in [0, 1]
    age_years: float
    disease_label: int         # 0 or 1
    vessel_mask: np.ndarray    # H x W bool
    subject_id: str

    def validate(self) -> None:
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"{self.subject_id}: pixel values outside [0, 1]")
        frac = float(self.vessel_mask.mean())
        if not 0.02 <= frac <= 0.20:
            raise ValueError(f"{self.subject_id}: vessel foreground fraction {frac:.4f} outside [0.02, 0.20]")
        if self.disease_label not in (0, 1):
            raise ValueError(f"{self.subject_id}: disease_label must be 0/1")
