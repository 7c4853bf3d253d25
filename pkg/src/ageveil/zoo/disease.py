"""Binary disease encoder: frozen 2-logit classifier with a feature tap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..common import images_to_tensor, module_checksum
from .blocks import ConvBlock, fit
from .checkpoint import load_archive, save_archive


class DiseaseNet(nn.Module):
    def __init__(self, feature_dim=32, width=12):
        super().__init__()
        self.trunk = nn.Sequential(
            ConvBlock(3, width, stride=2),
            ConvBlock(width, 2 * width, stride=2),
            ConvBlock(2 * width, 4 * width, stride=2),
        )
        self.to_feature = nn.Linear(8 * width, feature_dim)
        self.head = nn.Linear(feature_dim, 2)

    def features(self, x):
        h = self.trunk(x)
        # lesions are small blobs; average pooling alone dilutes them away,
        # so pair it with a max-pool anywhere-detector
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return torch.tanh(self.to_feature(pooled))

    def forward(self, x):
        return self.head(self.features(x))


@dataclass
class DiseaseEncoder:
    feature_dim: int
    net: nn.Module
    seed: int
    val_acc: float = float("nan")
    frozen: bool = True

    def _tensor(self, images):
        if isinstance(images, torch.Tensor):
            return images
        return images_to_tensor(images)

    def features(self, images) -> np.ndarray:
        with torch.no_grad():
            return self.net.features(self._tensor(images)).numpy()

    def logits_t(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable in x; weights stay fixed."""
        return self.net(x)

    def logits(self, images) -> np.ndarray:
        with torch.no_grad():
            return self.net(self._tensor(images)).numpy()

    def predict_labels(self, images) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def checksum(self) -> str:
        return module_checksum(self.net)

    def save(self, path, cohort_checksum: str = "") -> None:
        meta = {"kind": "disease", "feature_dim": self.feature_dim,
                "seed": self.seed, "val_acc": self.val_acc,
                "cohort_checksum": cohort_checksum}
        save_archive(path, meta, {"net": self.net.state_dict()})

    @classmethod
    def load(cls, path) -> "DiseaseEncoder":
        meta, states = load_archive(path)
        net = DiseaseNet(feature_dim=meta["feature_dim"])
        net.load_state_dict(states["net"])
        net.eval()
        return cls(meta["feature_dim"], net, meta["seed"], val_acc=meta["val_acc"])


def train_disease_encoder(train_images, train_labels, val_images, val_labels,
                          seed, feature_dim=32, epochs=30, batch_size=64,
                          lr=2e-3, patience=30) -> DiseaseEncoder:
    """Train the frozen disease classifier; refuses degenerate label sets."""
    labels = np.asarray(train_labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("single-class training labels; cannot fit disease encoder")
    torch.manual_seed(seed)
    net = DiseaseNet(feature_dim=feature_dim)
    x_train = images_to_tensor(train_images)
    x_val = images_to_tensor(val_images)
    y_train = torch.tensor(labels, dtype=torch.long)
    y_val = np.asarray(val_labels)

    def loss_fn(idx):
        return F.cross_entropy(net(x_train[idx]), y_train[idx])

    def val_acc():
        preds = net(x_val).argmax(dim=1).numpy()
        return float(np.mean(preds == y_val))

    best, _ = fit(net, loss_fn, val_acc, len(labels), epochs, seed,
                  batch_size=batch_size, lr=lr, patience=patience,
                  lower_is_better=False, context="disease")
    for p in net.parameters():
        p.requires_grad_(False)
    return DiseaseEncoder(feature_dim, net, seed, val_acc=float(best))
