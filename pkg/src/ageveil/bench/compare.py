"""Method comparison: every obfuscation method evaluated on the same split
with the same frozen models, including the black-box transfer target."""

from __future__ import annotations

import numpy as np

from ..metrics import MetricsReport, accuracy, iou, kl_div, mae, r2, ssim
from ..zoo.segmenter import predict_masks


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _transform_fn(method):
    return method.transform if hasattr(method, "transform") else method


def inclusion_mask(images, ages, teachers: dict, threshold: float) -> np.ndarray:
    """Keep samples whose mean absolute teacher error on the raw image is
    within the threshold."""
    errors = np.stack([np.abs(t.predict_ages(images) - ages)
                       for t in teachers.values()])
    return errors.mean(axis=0) <= threshold


def evaluate_obfuscation(name: str, obf: np.ndarray, images, ages, labels,
                         teachers: dict, heldout, disease, raw_pred_masks,
                         segmenter, include: np.ndarray,
                         config_checksum: str = "") -> MetricsReport:
    """Score one already-transformed image set against every frozen model."""
    obf = np.asarray(obf, dtype=np.float32)
    if obf.shape != images.shape:
        raise ValueError(f"{name}: transformed shape {obf.shape} does not "
                         f"match input {images.shape}")
    idx = np.flatnonzero(include)
    if idx.size == 0:
        raise ValueError("inclusion filter removed every sample")
    obf_i, raw_i, ages_i = obf[idx], images[idx], ages[idx]

    per_mae, per_r2 = {}, {}
    for tname, teacher in teachers.items():
        preds = teacher.predict_ages(obf_i)
        per_mae[tname] = mae(preds, ages_i)
        per_r2[tname] = r2(preds, ages_i)
    held_preds = heldout.predict_ages(obf_i)

    obf_masks = predict_masks(segmenter, obf_i)
    iou_mean = float(np.mean([iou(obf_masks[k], raw_pred_masks[j])
                              for k, j in enumerate(idx)]))

    probs_raw = _softmax(disease.logits(raw_i))
    probs_obf = _softmax(disease.logits(obf_i))
    disease_kl = float(np.mean([kl_div(p, q)
                                for p, q in zip(probs_raw, probs_obf)]))

    report = MetricsReport(
        method=name,
        per_model_mae=per_mae,
        per_model_r2=per_r2,
        amae=float(np.mean(list(per_mae.values()))),
        heldout_mae=mae(held_preds, ages_i),
        heldout_r2=r2(held_preds, ages_i),
        ssim_mean=float(np.mean([ssim(obf_i[k], raw_i[k])
                                 for k in range(len(idx))])),
        disease_acc=accuracy(disease.predict_labels(obf_i), labels[idx]),
        iou_mean=iou_mean,
        pixel_mse=float(((obf_i - raw_i) ** 2).mean()),
        disease_kl=disease_kl,
        sample_count=int(idx.size),
        config_checksum=config_checksum,
    )
    report.validate()
    return report


def run_method_comparison(methods: dict, images, ages, labels, masks,
                          teachers: dict, heldout, disease, segmenter,
                          budget=None, config_checksum: str = "",
                          mae_filter: bool = True,
                          mae_threshold: float = 3.0) -> list:
    """One MetricsReport per method, with a RAW reference row first.

    The raw-error inclusion filter (when on) fixes a single evaluation
    subset shared by every row. `masks` (ground truth) is accepted for
    interface symmetry; segmentation stability is scored against the
    segmenter's own raw predictions, which by construction gives RAW an
    IoU of exactly 1.
    """
    if not methods:
        raise ValueError("method list must not be empty")
    images = np.asarray(images, dtype=np.float32)
    ages = np.asarray(ages, dtype=np.float64)
    labels = np.asarray(labels)

    if mae_filter:
        include = inclusion_mask(images, ages, teachers, mae_threshold)
    else:
        include = np.ones(len(images), dtype=bool)
    raw_pred_masks = predict_masks(segmenter, images)

    reports = [evaluate_obfuscation("raw", images, images, ages, labels,
                                    teachers, heldout, disease,
                                    raw_pred_masks, segmenter, include,
                                    config_checksum)]
    for name, method in methods.items():
        obf = np.asarray(_transform_fn(method)(images), dtype=np.float32)
        reports.append(evaluate_obfuscation(name, obf, images, ages, labels,
                                            teachers, heldout, disease,
                                            raw_pred_masks, segmenter,
                                            include, config_checksum))
    return reports
