"""Scalar evaluation metrics: MAE, R2, AMAE, SSIM, IoU, accuracy, KL, cosine."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np


def mae(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("preds and truths must be equal-length and nonempty")
    return float(np.mean(np.abs(p - t)))


def r2(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("preds and truths must be equal-length and nonempty")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot <= 0:
        raise ValueError("truths have zero variance; R2 undefined")
    ss_res = float(np.sum((t - p) ** 2))
    return 1.0 - ss_res / ss_tot


def accuracy(preds, truths) -> float:
    p = np.asarray(preds)
    t = np.asarray(truths)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("preds and truths must be equal-length and nonempty")
    return float(np.mean(p == t))


def amae(models, images, truths) -> float:
    """Mean over models of each model's MAE on the same image set."""
    if len(models) == 0:
        raise ValueError("amae requires at least one model")
    return float(np.mean([mae(m.predict_ages(images), truths) for m in models]))


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0  # two empty masks agree perfectly
    return float(np.logical_and(a, b).sum() / union)


def kl_div(p, q, floor: float = 1e-12) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal shape")
    for name, d in (("p", p), ("q", q)):
        if abs(d.sum() - 1.0) > 1e-6 or (d < 0).any():
            raise ValueError(f"{name} is not a probability distribution")
    q = np.maximum(q, floor)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine undefined for zero vector")
    return float(np.dot(u, v) / (nu * nv))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Single-scale SSIM over valid Gaussian windows, averaged across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ValueError("image smaller than SSIM window")
    win = _gaussian_window(window_size, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def _windows(x):
        v = np.lib.stride_tricks.sliding_window_view(x, (window_size, window_size))
        return np.tensordot(v, win, axes=([2, 3], [0, 1]))

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _windows(x), _windows(y)
        mxx, myy, mxy = _windows(x * x), _windows(y * y), _windows(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    """One method's full evaluation row."""

    method: str
    per_model_mae: dict
    per_model_r2: dict
    amae: float
    heldout_mae: float
    heldout_r2: float
    ssim_mean: float
    disease_acc: float
    iou_mean: float
    pixel_mse: float
    disease_kl: float
    sample_count: int
    config_checksum: str

    def validate(self) -> None:
        expected = float(np.mean(list(self.per_model_mae.values())))
        if abs(expected - self.amae) > 1e-9:
            raise ValueError("AMAE is not the mean of per-model MAEs")
        scalars = [self.amae, self.heldout_mae, self.heldout_r2, self.ssim_mean,
                   self.disease_acc, self.iou_mean, self.pixel_mse, self.disease_kl]
        if not all(np.isfinite(s) for s in scalars):
            raise ValueError("non-finite metric value in report")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))
