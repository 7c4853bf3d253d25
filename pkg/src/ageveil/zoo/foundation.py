"""General-feature backbone pretrained by masked-patch reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..common import TrainingError, images_to_tensor, module_checksum, substream
from .blocks import ConvBlock, check_finite, minibatches
from .checkpoint import load_archive, save_archive

PATCH = 8


class FoundationNet(nn.Module):
    """Feature = per-channel spatial mean and std of the trunk map; the std
    half keeps texture-energy information a plain average pool would erase."""

    def __init__(self, feature_dim=96, width=24):
        super().__init__()
        if feature_dim % 2 != 0:
            raise ValueError("feature_dim must be even (mean+std halves)")
        self.feature_dim = feature_dim
        channels = feature_dim // 2
        self.trunk = nn.Sequential(
            ConvBlock(3, width, stride=2),
            ConvBlock(width, 2 * width, stride=2),
            ConvBlock(2 * width, channels, stride=2),
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            ConvBlock(channels, 2 * width),
            nn.Upsample(scale_factor=2, mode="nearest"),
            ConvBlock(2 * width, width),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def features(self, x):
        h = self.trunk(x)
        mean = h.mean(dim=(2, 3))
        var = ((h - mean[:, :, None, None]) ** 2).mean(dim=(2, 3))
        return torch.cat([mean, torch.sqrt(var + 1e-8)], dim=1)

    def forward(self, x):
        return self.decoder(self.trunk(x))


def mask_patches(x: torch.Tensor, fraction: float, generator: torch.Generator):
    """Zero a random fraction of PATCHxPATCH patches; returns (masked, pixel mask)."""
    n, _, h, w = x.shape
    gh, gw = h // PATCH, w // PATCH
    n_patches = gh * gw
    n_masked = int(round(fraction * n_patches))
    keep = torch.ones(n, n_patches)
    for i in range(n):
        drop = torch.randperm(n_patches, generator=generator)[:n_masked]
        keep[i, drop] = 0.0
    grid = keep.reshape(n, 1, gh, gw)
    pixel_keep = grid.repeat_interleave(PATCH, dim=2).repeat_interleave(PATCH, dim=3)
    return x * pixel_keep, 1.0 - pixel_keep


@dataclass
class FoundationBackbone:
    feature_dim: int
    net: FoundationNet
    seed: int
    curve: list
    frozen: bool = True

    def features_t(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable w.r.t. the input; parameters stay frozen."""
        return self.net.features(x)

    def features(self, images) -> np.ndarray:
        x = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
        with torch.no_grad():
            return self.net.features(x).numpy()

    def checksum(self) -> str:
        return module_checksum(self.net)

    def save(self, path, cohort_checksum: str = "") -> None:
        meta = {"kind": "foundation", "feature_dim": self.feature_dim,
                "seed": self.seed, "curve": self.curve,
                "cohort_checksum": cohort_checksum}
        save_archive(path, meta, {"net": self.net.state_dict()})

    @classmethod
    def load(cls, path) -> "FoundationBackbone":
        meta, states = load_archive(path)
        net = FoundationNet(feature_dim=meta["feature_dim"])
        net.load_state_dict(states["net"])
        net.eval()
        return cls(meta["feature_dim"], net, meta["seed"], meta["curve"])


def pretrain_foundation_backbone(train_images, val_images, seed, feature_dim=96,
                                 epochs=10, batch_size=64, lr=1e-3,
                                 mask_fraction=0.5) -> FoundationBackbone:
    """Self-supervised pretraining: reconstruct pixels hidden by patch masking."""
    torch.manual_seed(seed)
    net = FoundationNet(feature_dim=feature_dim)
    x_train = images_to_tensor(train_images)
    x_val = images_to_tensor(val_images)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    val_gen = torch.Generator().manual_seed(seed + 1)
    x_val_masked, val_hole = mask_patches(x_val, mask_fraction, val_gen)
    curve = []
    step = 0
    for epoch in range(epochs):
        net.train()
        rng = substream(seed, "batches", epoch)
        for idx in minibatches(rng, len(x_train), batch_size):
            step += 1
            gen = torch.Generator().manual_seed(seed * 100003 + step)
            masked, hole = mask_patches(x_train[idx], mask_fraction, gen)
            opt.zero_grad()
            recon = net(masked)
            loss = ((recon - x_train[idx]) ** 2 * hole).sum() / hole.sum() / 3
            check_finite(loss, "foundation")
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            recon = net(x_val_masked)
            val_mse = float(((recon - x_val) ** 2 * val_hole).sum()
                            / val_hole.sum() / 3)
        curve.append(val_mse)
    if not np.isfinite(curve).all():
        raise TrainingError("foundation pretraining diverged")
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return FoundationBackbone(feature_dim, net, seed, curve)
