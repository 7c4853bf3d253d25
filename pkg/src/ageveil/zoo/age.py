"""Age-prediction encoders: conv and attention trunks, regression and binned heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..common import images_to_tensor, module_checksum
from .blocks import ConvBlock, PatchEmbed, SelfAttentionBlock, fit
from .checkpoint import load_archive, save_archive

AGE_LO, AGE_HI = 40.0, 80.0
N_BINS = 8
BIN_WIDTH = (AGE_HI - AGE_LO) / N_BINS
BIN_CENTERS = AGE_LO + BIN_WIDTH * (np.arange(N_BINS) + 0.5)
# regression nets work in normalized units so gradient scales stay O(1)
AGE_CENTER, AGE_SCALE = 60.0, 10.0

# named teacher settings: arch, task, feature_dim, width, seed
TEACHER_CONFIGS = {
    "conv-cls": ("conv", "classification", 48, 16, 101),
    "conv-reg": ("conv", "regression", 64, 18, 102),
    "attn-cls": ("attention", "classification", 56, 64, 103),
    "attn-reg": ("attention", "regression", 72, 72, 104),
}


def age_to_bin(ages) -> np.ndarray:
    idx = np.floor((np.asarray(ages, dtype=np.float64) - AGE_LO) / BIN_WIDTH)
    return np.clip(idx, 0, N_BINS - 1).astype(np.int64)


class ConvAgeNet(nn.Module):
    def __init__(self, feature_dim, out_dim, width=16):
        super().__init__()
        self.trunk = nn.Sequential(
            ConvBlock(3, width, stride=2),
            ConvBlock(width, 2 * width, stride=2),
            ConvBlock(2 * width, 3 * width, stride=2),
            ConvBlock(3 * width, 4 * width, stride=2),
        )
        self.to_feature = nn.Linear(4 * width, feature_dim)
        self.head = nn.Linear(feature_dim, out_dim)

    def features(self, x):
        h = self.trunk(x).mean(dim=(2, 3))
        return torch.tanh(self.to_feature(h))

    def forward(self, x):
        return self.head(self.features(x))


class AttentionAgeNet(nn.Module):
    def __init__(self, feature_dim, out_dim, dim=64, depth=2, image_size=64):
        super().__init__()
        self.embed = PatchEmbed(image_size, patch=8, c_in=3, dim=dim)
        self.blocks = nn.Sequential(*[SelfAttentionBlock(dim) for _ in range(depth)])
        self.to_feature = nn.Linear(dim, feature_dim)
        self.head = nn.Linear(feature_dim, out_dim)

    def features(self, x):
        tokens = self.blocks(self.embed(x))
        return torch.tanh(self.to_feature(tokens.mean(dim=1)))

    def forward(self, x):
        return self.head(self.features(x))


class HybridAgeNet(nn.Module):
    """Conv stem feeding patch self-attention; a third architecture family."""

    def __init__(self, feature_dim, out_dim, stem_width=24, dim=80, image_size=64):
        super().__init__()
        self.stem = nn.Sequential(
            ConvBlock(3, stem_width, stride=2),
            ConvBlock(stem_width, 2 * stem_width, stride=2),
        )
        self.embed = PatchEmbed(image_size // 4, patch=2, c_in=2 * stem_width, dim=dim)
        self.blocks = nn.Sequential(*[SelfAttentionBlock(dim) for _ in range(2)])
        self.to_feature = nn.Linear(dim, feature_dim)
        self.head = nn.Linear(feature_dim, out_dim)

    def features(self, x):
        tokens = self.blocks(self.embed(self.stem(x)))
        return torch.tanh(self.to_feature(tokens.mean(dim=1)))

    def forward(self, x):
        return self.head(self.features(x))


def _build_net(arch, task, feature_dim, width, image_size=64):
    out_dim = N_BINS if task == "classification" else 1
    if arch == "conv":
        net = ConvAgeNet(feature_dim, out_dim, width=width)
    elif arch == "attention":
        net = AttentionAgeNet(feature_dim, out_dim, dim=width, image_size=image_size)
    elif arch == "hybrid":
        net = HybridAgeNet(feature_dim, out_dim, dim=width, image_size=image_size)
    else:
        raise ValueError(f"unknown arch {arch!r}")
    return net


@dataclass
class AgeEncoder:
    """Frozen age model exposing a feature vector and a decoded scalar age."""

    arch: str
    task: str
    feature_dim: int
    net: nn.Module
    seed: int
    val_mae: float = float("nan")
    bin_edges: np.ndarray | None = field(default=None, repr=False)
    frozen: bool = True

    def __post_init__(self):
        if self.task == "classification" and self.bin_edges is None:
            self.bin_edges = AGE_LO + BIN_WIDTH * np.arange(N_BINS + 1)

    def _tensor(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            return images
        return images_to_tensor(images)

    def features(self, images) -> np.ndarray:
        with torch.no_grad():
            return self.net.features(self._tensor(images)).numpy()

    def age_probs(self, images) -> np.ndarray:
        if self.task != "classification":
            raise ValueError("probabilities only defined for classification task")
        with torch.no_grad():
            return torch.softmax(self.net(self._tensor(images)), dim=1).numpy()

    def predict_ages(self, images) -> np.ndarray:
        x = self._tensor(images)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected Nx3xHxW images, got {tuple(x.shape)}")
        with torch.no_grad():
            out = self.net(x)
            if self.task == "classification":
                probs = torch.softmax(out, dim=1).numpy()
                return probs @ BIN_CENTERS
            return (AGE_CENTER + AGE_SCALE * out.squeeze(1).numpy()).astype(np.float64)

    def checksum(self) -> str:
        return module_checksum(self.net)

    def save(self, path, cohort_checksum: str = "") -> None:
        meta = {"kind": "age", "arch": self.arch, "task": self.task,
                "feature_dim": self.feature_dim, "seed": self.seed,
                "width": getattr(self, "_width", 0), "val_mae": self.val_mae,
                "cohort_checksum": cohort_checksum}
        save_archive(path, meta, {"net": self.net.state_dict()})

    @classmethod
    def load(cls, path) -> "AgeEncoder":
        meta, states = load_archive(path)
        net = _build_net(meta["arch"], meta["task"], meta["feature_dim"], meta["width"])
        net.load_state_dict(states["net"])
        net.eval()
        enc = cls(meta["arch"], meta["task"], meta["feature_dim"], net,
                  meta["seed"], val_mae=meta["val_mae"])
        enc._width = meta["width"]
        return enc


def train_age_encoder(train_images, train_ages, val_images, val_ages,
                      arch, task, feature_dim, seed, width=16, epochs=25,
                      batch_size=64, lr=1e-3, patience=5) -> AgeEncoder:
    """Train one age model to convergence on val MAE; returns it frozen."""
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("train and val splits must be nonempty")
    torch.manual_seed(seed)
    net = _build_net(arch, task, feature_dim, width)
    x_train = images_to_tensor(train_images)
    x_val = images_to_tensor(val_images)
    ages_t = torch.tensor(np.asarray(train_ages), dtype=torch.float32)
    val_ages = np.asarray(val_ages, dtype=np.float64)
    if task == "classification":
        bins_t = torch.tensor(age_to_bin(train_ages))

        def loss_fn(idx):
            return F.cross_entropy(net(x_train[idx]), bins_t[idx])
    else:
        target = (ages_t - AGE_CENTER) / AGE_SCALE

        def loss_fn(idx):
            return F.mse_loss(net(x_train[idx]).squeeze(1), target[idx])

    def val_mae():
        out = net(x_val)
        if task == "classification":
            preds = torch.softmax(out, dim=1).numpy() @ BIN_CENTERS
        else:
            preds = AGE_CENTER + AGE_SCALE * out.squeeze(1).numpy()
        return np.mean(np.abs(preds - val_ages))

    best, _ = fit(net, loss_fn, val_mae, len(train_images), epochs, seed,
                  batch_size=batch_size, lr=lr, patience=patience,
                  context=f"age[{arch}/{task}]")
    for p in net.parameters():
        p.requires_grad_(False)
    enc = AgeEncoder(arch, task, feature_dim, net, seed, val_mae=float(best))
    enc._width = width
    return enc


def train_named_teacher(name, train_images, train_ages, val_images, val_ages,
                        epochs=25) -> AgeEncoder:
    arch, task, feature_dim, width, seed = TEACHER_CONFIGS[name]
    return train_age_encoder(train_images, train_ages, val_images, val_ages,
                             arch, task, feature_dim, seed, width=width,
                             epochs=epochs)
