"""Small U-Net vessel segmenter used as a downstream-utility probe."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..common import images_to_tensor
from .blocks import ConvBlock, fit


class VesselUNet(nn.Module):
    def __init__(self, width=16):
        super().__init__()
        self.width = width
        w = width
        self.enc1 = ConvBlock(3, w)
        self.enc2 = ConvBlock(w, 2 * w, stride=2)
        self.enc3 = ConvBlock(2 * w, 4 * w, stride=2)
        self.dec2 = ConvBlock(4 * w + 2 * w, 2 * w)
        self.dec1 = ConvBlock(2 * w + w, w)
        self.out = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        h1 = self.enc1(x)
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        u2 = F.interpolate(h3, scale_factor=2, mode="nearest")
        d2 = self.dec2(torch.cat([u2, h2], dim=1))
        u1 = F.interpolate(d2, scale_factor=2, mode="nearest")
        d1 = self.dec1(torch.cat([u1, h1], dim=1))
        return self.out(d1).squeeze(1)  # logits, NxHxW


def predict_masks(net: VesselUNet, images, batch_size=100) -> np.ndarray:
    x = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(net(x[start:start + batch_size]) > 0)
    return torch.cat(outs).numpy()


def batch_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean per-image IoU; an image pair with two empty masks counts as 1."""
    vals = []
    for p, t in zip(pred, truth):
        union = np.logical_or(p, t).sum()
        vals.append(1.0 if union == 0 else np.logical_and(p, t).sum() / union)
    return float(np.mean(vals))


def train_vessel_segmenter(train_images, train_masks, val_images, val_masks,
                           seed, epochs=12, batch_size=50, lr=5e-3, patience=6) -> VesselUNet:
    torch.manual_seed(seed)
    net = VesselUNet()
    x_train = images_to_tensor(train_images)
    x_val = images_to_tensor(val_images)
    y_train = torch.tensor(np.asarray(train_masks), dtype=torch.float32)
    val_truth = np.asarray(val_masks, dtype=bool)
    # vessels cover a small pixel fraction; unweighted BCE collapses to
    # all-background, so upweight the foreground and add a soft-Dice term
    # that scores overlap directly
    fg = float(y_train.mean().clamp_min(1e-6))
    pos_weight = torch.tensor((1.0 - fg) / fg)

    def loss_fn(idx):
        logits = net(x_train[idx])
        y = y_train[idx]
        bce = F.binary_cross_entropy_with_logits(logits, y, pos_weight=pos_weight)
        p = torch.sigmoid(logits)
        dice = 1.0 - (2.0 * (p * y).sum() + 1.0) / (p.sum() + y.sum() + 1.0)
        return bce + dice

    def val_iou():
        return batch_iou(predict_masks(net, x_val), val_truth)

    fit(net, loss_fn, val_iou, len(x_train), epochs, seed, batch_size=batch_size,
        lr=lr, patience=patience, lower_is_better=False, context="segmenter")
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_segmenter(net: VesselUNet, path, cohort_checksum: str = "") -> None:
    from .checkpoint import save_archive
    save_archive(path, {"kind": "vessel-segmenter", "width": net.width,
                        "cohort_checksum": cohort_checksum},
                 {"state": net.state_dict()})


def load_segmenter(path) -> VesselUNet:
    from .checkpoint import load_archive
    meta, states = load_archive(path)
    if meta.get("kind") != "vessel-segmenter":
        raise ValueError(f"not a segmenter archive: {path}")
    net = VesselUNet(meta["width"])
    net.load_state_dict(states["state"])
    for p in net.parameters():
        p.requires_grad_(False)
    return net
