"""Auxiliary 4-way rotation classifier: the gradient source for noise crafting."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..common import images_to_tensor
from .blocks import ConvBlock, fit


class RotationNet(nn.Module):
    def __init__(self, width=12):
        super().__init__()
        self.trunk = nn.Sequential(
            ConvBlock(3, width, stride=2),
            ConvBlock(width, 2 * width, stride=2),
            ConvBlock(2 * width, 4 * width, stride=2),
        )
        # rotation shows up in WHERE structures sit, so keep the spatial
        # layout instead of average-pooling it away
        self.head = nn.Linear(4 * width * 8 * 8, 4)

    def forward(self, x):
        return self.head(self.trunk(x).flatten(1))


def rotate_batch(x: torch.Tensor, quarters: torch.Tensor) -> torch.Tensor:
    """Rotate each image by its own multiple of 90 degrees."""
    out = torch.empty_like(x)
    for k in range(4):
        sel = quarters == k
        if sel.any():
            out[sel] = torch.rot90(x[sel], k, dims=(2, 3))
    return out


def train_rotation_classifier(train_images, val_images, seed, epochs=15,
                              batch_size=64, lr=5e-3, patience=10) -> RotationNet:
    """Self-supervised: predict which of four rotations was applied."""
    torch.manual_seed(seed)
    net = RotationNet()
    x_train = images_to_tensor(train_images)
    x_val = images_to_tensor(val_images)
    rng = np.random.default_rng(seed)
    val_quarters = torch.tensor(rng.integers(0, 4, size=len(x_val)))
    x_val_rot = rotate_batch(x_val, val_quarters)
    step = [0]

    def loss_fn(idx):
        step[0] += 1
        gen = torch.Generator().manual_seed(seed * 100003 + step[0])
        quarters = torch.randint(0, 4, (len(idx),), generator=gen)
        x = rotate_batch(x_train[idx], quarters)
        return F.cross_entropy(net(x), quarters)

    def val_acc():
        preds = net(x_val_rot).argmax(dim=1)
        return float((preds == val_quarters).float().mean())

    fit(net, loss_fn, val_acc, len(x_train), epochs, seed,
        batch_size=batch_size, lr=lr, patience=patience,
        lower_is_better=False, context="rotation")
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_rotation(net: RotationNet, path, cohort_checksum: str = "") -> None:
    from .checkpoint import save_archive
    save_archive(path, {"kind": "rotation", "cohort_checksum": cohort_checksum},
                 {"state": net.state_dict()})


def load_rotation(path) -> RotationNet:
    from .checkpoint import load_archive
    meta, states = load_archive(path)
    if meta.get("kind") != "rotation":
        raise ValueError(f"not a rotation archive: {path}")
    net = RotationNet()
    net.load_state_dict(states["state"])
    for p in net.parameters():
        p.requires_grad_(False)
    return net
