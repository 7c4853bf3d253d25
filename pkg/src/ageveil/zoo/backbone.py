"""Encoder-decoder backbone whose bottleneck latent carries the whole image."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ..common import images_to_tensor
from .blocks import ConvBlock, ResBlock, fit

LATENT_CHANNELS = 64


class GuardEncoder(nn.Module):
    """Residual trunk over a lossless space-to-depth embedding.

    The first 48 latent channels carry the 4x4-blocked image exactly; the
    remaining channels are learned context. Every pixel path still passes the
    bottleneck, so masking the latent can remove any image content.
    """

    def __init__(self, width=24):
        super().__init__()
        self.embed = nn.PixelUnshuffle(4)
        self.ctx = nn.Sequential(
            ConvBlock(48, width),
            ResBlock(width),
            nn.Conv2d(width, LATENT_CHANNELS - 48, 3, padding=1),
        )

    def forward(self, x):
        u = self.embed(x)
        return torch.cat([u, self.ctx(u)], dim=1)


class GuardDecoder(nn.Module):
    """Inverse embedding plus a residual correction head.

    The correction's last conv starts at zero, so a fresh encoder-decoder
    pair reproduces the input exactly; training moves it off identity only
    where the objective pays for it.
    """

    def __init__(self, width=24):
        super().__init__()
        self.correct = nn.Sequential(
            ConvBlock(LATENT_CHANNELS, width),
            ResBlock(width),
            nn.Conv2d(width, 48, 3, padding=1),
        )
        with torch.no_grad():
            self.correct[-1].weight.zero_()
            self.correct[-1].bias.zero_()
        self.expand = nn.PixelShuffle(4)

    def forward(self, f):
        return self.expand(f[:, :48] + self.correct(f))


class GuardBackbone(nn.Module):
    """E/D pair; latent shape is CHxhxw for 64x64 inputs: 64x16x16."""

    def __init__(self, width=24):
        super().__init__()
        self.encoder = GuardEncoder(width)
        self.decoder = GuardDecoder(width)

    @property
    def latent_shape(self):
        return (LATENT_CHANNELS, 16, 16)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def pretrain_reconstruction(backbone: GuardBackbone, train_images, val_images,
                            seed, epochs=30, batch_size=32, lr=1e-3) -> float:
    """Fit D(E(x)) = x; returns final val MSE (contract: at most 1e-3)."""
    x_train = images_to_tensor(train_images)
    x_val = images_to_tensor(val_images)

    def loss_fn(idx):
        x = x_train[idx]
        return ((backbone(x) - x) ** 2).mean()

    def val_mse():
        outs = []
        for start in range(0, len(x_val), 100):
            x = x_val[start:start + 100]
            outs.append(((backbone(x) - x) ** 2).mean().item())
        return float(np.mean(outs))

    best, _ = fit(backbone, loss_fn, val_mse, len(x_train), epochs, seed,
                  batch_size=batch_size, lr=lr, patience=8, context="recon")
    return float(best)


def new_backbone(seed: int, width=24) -> GuardBackbone:
    torch.manual_seed(seed)
    return GuardBackbone(width)


def save_backbone(backbone: GuardBackbone, path, cohort_checksum: str = "") -> None:
    from .checkpoint import save_archive
    save_archive(path, {"kind": "guard-backbone",
                        "width": backbone.encoder.ctx[0].conv.out_channels,
                        "cohort_checksum": cohort_checksum},
                 {"encoder": backbone.encoder.state_dict(),
                  "decoder": backbone.decoder.state_dict()})


def load_backbone(path) -> GuardBackbone:
    from .checkpoint import load_archive
    meta, states = load_archive(path)
    if meta.get("kind") != "guard-backbone":
        raise ValueError(f"not a guard-backbone archive: {path}")
    backbone = GuardBackbone(meta["width"])
    backbone.encoder.load_state_dict(states["encoder"])
    backbone.decoder.load_state_dict(states["decoder"])
    return backbone
