"""Feature-level masking: a noise-conditioned generator over the latent grid,
the strength-scaled mask product, and the assembled obfuscation model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..common import images_to_tensor, module_checksum, tensor_to_images
from ..zoo.backbone import LATENT_CHANNELS
from ..zoo.checkpoint import load_archive, save_archive
from .noise import NoiseCache, z_score


class MaskGenerator(nn.Module):
    """Strided projection of normalized noise to the latent grid, then three
    3x3 convs; 1 + tanh keeps every entry in (0, 2). The final conv starts
    at zero so a fresh generator emits the identity mask."""

    def __init__(self, width=24):
        super().__init__()
        self.proj = nn.Conv2d(3, width, 4, stride=4)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, LATENT_CHANNELS, 3, padding=1)
        with torch.no_grad():
            self.conv3.weight.zero_()
            self.conv3.bias.zero_()

    def forward(self, zhat: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.proj(zhat))
        h = F.relu(self.conv1(h))
        h = F.relu(self.conv2(h))
        return 1.0 + torch.tanh(self.conv3(h))


def apply_mask(f_lat: torch.Tensor, mask: torch.Tensor, s: float) -> torch.Tensor:
    """f_lat * (1 + s*(mask - 1)): s=0 is the identity, s=1 the plain product."""
    if f_lat.shape != mask.shape:
        raise ValueError(f"latent {tuple(f_lat.shape)} vs mask {tuple(mask.shape)}")
    if s < 0:
        raise ValueError(f"strength must be nonnegative, got {s}")
    return f_lat * (1.0 + s * (mask - 1.0))


def batch_z_score(z: np.ndarray) -> torch.Tensor:
    """Per-image z-score, stacked back into an N x 3 x H x W tensor."""
    arr = np.asarray(z, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return images_to_tensor(np.stack([z_score(zi) for zi in arr]))


def generate_mask(guard: "GuardModel", images) -> torch.Tensor:
    """Noise -> normalization -> mask, for one image or a batch."""
    z = guard.noise_cache.get(images, guard.aux_net)
    with torch.no_grad():
        return guard.maskgen(batch_z_score(z))


@dataclass
class GuardModel:
    """Obfuscator assembly; only encoder, decoder, and maskgen ever train."""

    encoder: nn.Module
    decoder: nn.Module
    maskgen: MaskGenerator
    student: object
    disease: object
    aux_net: nn.Module
    config: object
    noise_cache: NoiseCache = field(default=None)

    def __post_init__(self):
        if self.noise_cache is None:
            self.noise_cache = NoiseCache(eps=self.config.pgd_eps,
                                          steps=self.config.pgd_steps,
                                          step_size=self.config.pgd_step_size,
                                          seed=self.config.seed)

    def obfuscate(self, images, s: float = 1.0) -> np.ndarray:
        """D(E(x) * scaled mask), clipped to [0,1].

        At s=0 the mask path is skipped entirely: the output depends only on
        the encoder and decoder.
        """
        arr = np.asarray(images, dtype=np.float32)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        x = images_to_tensor(arr)
        with torch.no_grad():
            f = self.encoder(x)
            if s != 0:
                mask = generate_mask(self, arr)
                f = apply_mask(f, mask, s)
            out = torch.clamp(self.decoder(f), 0.0, 1.0)
        imgs = tensor_to_images(out)
        return imgs[0] if single else imgs

    def checksum(self) -> str:
        return (module_checksum(self.encoder) + module_checksum(self.decoder)
                + module_checksum(self.maskgen))

    def save(self, path) -> None:
        meta = {"kind": "guard", "config": self.config.to_dict(),
                "student_checksum": self.student.checksum(),
                "disease_checksum": self.disease.checksum(),
                "aux_checksum": module_checksum(self.aux_net)}
        save_archive(path, meta, {"encoder": self.encoder.state_dict(),
                                  "decoder": self.decoder.state_dict(),
                                  "maskgen": self.maskgen.state_dict(),
                                  "aux": self.aux_net.state_dict()})


def load_guard(path, student, disease) -> GuardModel:
    """Rebuild a guard from its archive plus the frozen models it depends on."""
    from ..zoo.backbone import GuardDecoder, GuardEncoder
    from ..zoo.rotation import RotationNet
    from .training import GuardConfig

    meta, states = load_archive(path)
    if meta.get("kind") != "guard":
        raise ValueError(f"not a guard archive: {path}")
    if meta["student_checksum"] != student.checksum():
        raise ValueError("student checksum does not match the guard archive")
    if meta["disease_checksum"] != disease.checksum():
        raise ValueError("disease checksum does not match the guard archive")
    config = GuardConfig.from_dict(meta["config"])
    encoder = GuardEncoder(config.width)
    decoder = GuardDecoder(config.width)
    maskgen = MaskGenerator(config.mask_width)
    aux = RotationNet()
    encoder.load_state_dict(states["encoder"])
    decoder.load_state_dict(states["decoder"])
    maskgen.load_state_dict(states["maskgen"])
    aux.load_state_dict(states["aux"])
    for net in (encoder, decoder, maskgen, aux):
        for p in net.parameters():
            p.requires_grad_(False)
    return GuardModel(encoder, decoder, maskgen, student, disease, aux, config)
