"""Teacher-pool ablation: obfuscators distilled from pools of different
sizes, scored on the same split against the same frozen models."""

from __future__ import annotations

import numpy as np

from ..metrics import mae, r2, ssim
from .compare import inclusion_mask

# pool label -> teacher names, smallest to largest
DEFAULT_POOLS = {
    "single": ("conv-cls",),
    "dual": ("conv-cls", "attn-reg"),
    "four": ("conv-cls", "conv-reg", "attn-cls", "attn-reg"),
}


def run_pool_ablation(entries, images, ages, teachers: dict, heldout,
                      cohort_checksum: str, config_checksum: str = "",
                      mae_filter: bool = True,
                      mae_threshold: float = 3.0) -> list:
    """Score each (pool label, pool teacher names, guard, seed) entry.

    Every row shares the evaluation subset, the four reference teachers,
    the black-box model, and the cohort checksum, so differences between
    rows isolate the pool composition.
    """
    if not entries:
        raise ValueError("ablation needs at least one pool entry")
    images = np.asarray(images, dtype=np.float32)
    ages = np.asarray(ages, dtype=np.float64)
    if mae_filter:
        include = inclusion_mask(images, ages, teachers, mae_threshold)
    else:
        include = np.ones(len(images), dtype=bool)
    idx = np.flatnonzero(include)
    if idx.size == 0:
        raise ValueError("inclusion filter removed every sample")
    raw_i, ages_i = images[idx], ages[idx]

    rows = []
    for label, pool_names, guard, seed in entries:
        obf = np.asarray(guard.obfuscate(images, s=1.0),
                         dtype=np.float32)[idx]
        per_mae = {tname: mae(t.predict_ages(obf), ages_i)
                   for tname, t in teachers.items()}
        held = heldout.predict_ages(obf)
        rows.append({
            "pool": label,
            "teachers": "+".join(pool_names),
            "n_teachers": len(pool_names),
            "seed": int(seed),
            "amae": float(np.mean(list(per_mae.values()))),
            "heldout_mae": mae(held, ages_i),
            "heldout_r2": r2(held, ages_i),
            "ssim_mean": float(np.mean([ssim(obf[k], raw_i[k])
                                        for k in range(len(obf))])),
            "sample_count": int(idx.size),
            "cohort_checksum": cohort_checksum,
            "config_checksum": config_checksum,
        })
    return rows
