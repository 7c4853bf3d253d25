"""Strength sweep: privacy and utility metrics at each masking strength,
plus the two-axis trade-off plot."""

from __future__ import annotations

import numpy as np

from ..metrics import accuracy, iou, kl_div, mae, r2, ssim
from ..zoo.segmenter import predict_masks
from .budget import TradeoffBudget, TradeoffPoint, check_constraints
from .compare import _softmax, inclusion_mask


def run_tradeoff_sweep(guard, strengths, images, ages, labels, masks,
                       teachers: dict, heldout, disease, segmenter,
                       budget: TradeoffBudget, mae_filter: bool = True,
                       mae_threshold: float = 3.0) -> list:
    """Evaluate guard.obfuscate at every strength.

    AMAE averages the training-pool teachers; the held-out model appears in
    the per-model dicts under "blackbox" but never enters AMAE.
    """
    if len(strengths) == 0:
        raise ValueError("strength list must not be empty")
    if any(s < 0 for s in strengths):
        raise ValueError("strengths must be nonnegative")
    images = np.asarray(images, dtype=np.float32)
    ages = np.asarray(ages, dtype=np.float64)
    labels = np.asarray(labels)
    if mae_filter:
        include = inclusion_mask(images, ages, teachers, mae_threshold)
    else:
        include = np.ones(len(images), dtype=bool)
    idx = np.flatnonzero(include)
    if idx.size == 0:
        raise ValueError("inclusion filter removed every sample")
    raw_pred_masks = predict_masks(segmenter, images[idx])
    probs_raw = _softmax(disease.logits(images[idx]))

    points = []
    for s in strengths:
        obf = np.asarray(guard.obfuscate(images, s=float(s)),
                         dtype=np.float32)[idx]
        raw_i, ages_i = images[idx], ages[idx]
        per_mae, per_r2 = {}, {}
        for tname, teacher in teachers.items():
            preds = teacher.predict_ages(obf)
            per_mae[tname] = mae(preds, ages_i)
            per_r2[tname] = r2(preds, ages_i)
        amae = float(np.mean(list(per_mae.values())))
        held = heldout.predict_ages(obf)
        per_mae["blackbox"] = mae(held, ages_i)
        per_r2["blackbox"] = r2(held, ages_i)

        obf_masks = predict_masks(segmenter, obf)
        probs_obf = _softmax(disease.logits(obf))
        point = TradeoffPoint(
            strength=float(s),
            amae=amae,
            per_model_mae=per_mae,
            per_model_r2=per_r2,
            ssim_mean=float(np.mean([ssim(obf[k], raw_i[k])
                                     for k in range(len(obf))])),
            disease_acc=accuracy(disease.predict_labels(obf), labels[idx]),
            iou_mean=float(np.mean([iou(obf_masks[k], raw_pred_masks[k])
                                    for k in range(len(obf))])),
            pixel_mse=float(((obf - raw_i) ** 2).mean()),
            disease_kl=float(np.mean([kl_div(p, q)
                                      for p, q in zip(probs_raw, probs_obf)])),
        )
        result = check_constraints(point, budget)
        point.constraint_pass = result.passed
        point.violations = tuple(result.violations)
        point.validate(budget)
        points.append(point)
    return points


def plot_sweep(points, path) -> None:
    """AMAE (left axis) against SSIM (right axis) over strength."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    strengths = [p.strength for p in points]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(strengths, [p.amae for p in points], "o-", color="#1f77b4",
             label="AMAE")
    ax1.set_xlabel("masking strength s")
    ax1.set_ylabel("AMAE (years)", color="#1f77b4")
    ax1.tick_params(axis="y", labelcolor="#1f77b4")
    ax2 = ax1.twinx()
    ax2.plot(strengths, [p.ssim_mean for p in points], "s--", color="#d62728",
             label="SSIM")
    ax2.set_ylabel("SSIM", color="#d62728")
    ax2.tick_params(axis="y", labelcolor="#d62728")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "ageveil"})
    plt.close(fig)
