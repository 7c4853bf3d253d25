"""Surrogate-student distillation: zero-pad alignment of teacher features,
a three-conv fusion head, and a cosine objective with in-batch negatives."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import TrainingError, images_to_tensor, module_checksum, substream
from .zoo.blocks import check_finite, minibatches
from .zoo.checkpoint import load_archive, save_archive

STUDENT_DIM = 64


@dataclass
class TeacherPool:
    """Ordered frozen age encoders; order matters because fusion is conv-based."""

    names: list
    teachers: list

    def __post_init__(self):
        if len(self.teachers) == 0:
            raise ValueError("teacher pool must be nonempty")
        if len(self.names) != len(self.teachers):
            raise ValueError("names and teachers must align")
        for name, t in zip(self.names, self.teachers):
            if not t.frozen:
                raise ValueError(f"teacher {name} is not frozen")

    @property
    def max_dim(self) -> int:
        return max(t.feature_dim for t in self.teachers)

    def __len__(self):
        return len(self.teachers)

    def checksums(self) -> list:
        return [t.checksum() for t in self.teachers]

    def feature_centers(self, images) -> list:
        """Per-teacher mean feature over a reference split, for centering."""
        return [torch.from_numpy(t.features(images).mean(axis=0)) for t in self.teachers]

    def stacked_features(self, images, centers=None) -> torch.Tensor:
        """All teacher features for a batch, aligned: N x 1 x K x max_dim."""
        feats = [torch.from_numpy(t.features(images)) for t in self.teachers]
        if centers is not None:
            feats = [f - c for f, c in zip(feats, centers)]
        return stack_aligned(feats)


def align_features(features) -> np.ndarray:
    """Right-pad each teacher's feature vector with zeros to the pool max."""
    if len(features) == 0:
        raise ValueError("no features to align")
    rows = [np.asarray(f, dtype=np.float64).ravel() for f in features]
    if any(not np.isfinite(r).all() for r in rows):
        raise ValueError("non-finite feature vector")
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def stack_aligned(feats) -> torch.Tensor:
    """Batch alignment: list of K tensors (N x d_k) -> N x 1 x K x max_dim,
    each row L2-normalized before padding so teacher scales are comparable.
    Rows are rescaled to unit RMS entries, otherwise conv biases drown the
    signal once the head pools over the sheet."""
    width = max(f.shape[1] for f in feats)
    n = feats[0].shape[0]
    sheet = torch.zeros(n, 1, len(feats), width)
    for k, f in enumerate(feats):
        norm = f.norm(dim=1, keepdim=True).clamp_min(1e-12)
        sheet[:, 0, k, : f.shape[1]] = f / norm * np.sqrt(f.shape[1])
    return sheet


class FusionHead(nn.Module):
    """Three 3x3 convs over the stacked K x max_dim sheet, pooled to a vector."""

    def __init__(self, out_dim=STUDENT_DIM, width=16):
        super().__init__()
        self.conv1 = nn.Conv2d(1, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, out_dim, 3, padding=1)
        self.out_dim = out_dim

    def forward(self, sheet):
        if sheet.ndim != 4 or sheet.shape[1] != 1:
            raise ValueError(f"expected Nx1xKxD sheet, got {tuple(sheet.shape)}")
        h = torch.tanh(self.conv1(sheet))
        h = torch.tanh(self.conv2(h))
        return self.conv3(h).mean(dim=(2, 3))


def fuse(stacked, head: FusionHead) -> np.ndarray:
    """Single-sheet convenience wrapper around the head."""
    arr = np.asarray(stacked, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("stacked sheet must be 2-D (K x max_dim)")
    with torch.no_grad():
        out = head(torch.from_numpy(arr)[None, None])
    return out[0].numpy()


@dataclass
class Student:
    """Frozen general backbone plus the trainable linear probe."""

    backbone: object
    probe: nn.Linear
    feature_dim: int = STUDENT_DIM
    pool_names: list = field(default_factory=list)

    def features_t(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable in x; backbone and probe weights stay fixed."""
        return self.probe(self.backbone.features_t(x))

    def features(self, images) -> np.ndarray:
        x = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
        with torch.no_grad():
            return self.features_t(x).numpy()

    def checksum(self) -> str:
        return module_checksum(self.probe) + self.backbone.checksum()

    def save(self, path, cohort_checksum: str = "", fusion: FusionHead | None = None,
             pool: TeacherPool | None = None) -> None:
        meta = {"kind": "student", "feature_dim": self.feature_dim,
                "pool_names": list(self.pool_names),
                "pool_checksums": pool.checksums() if pool else [],
                "backbone_checksum": self.backbone.checksum(),
                "cohort_checksum": cohort_checksum}
        states = {"probe": self.probe.state_dict()}
        if fusion is not None:
            states["fusion"] = fusion.state_dict()
        save_archive(path, meta, states)


def load_student(path, backbone) -> Student:
    """Restore a saved probe on top of an already-loaded backbone.

    The archive stores the backbone checksum, not its weights, so the caller
    must supply the same backbone; a mismatch is refused.
    """
    meta, states = load_archive(path)
    if meta.get("kind") != "student":
        raise ValueError(f"not a student archive: {path}")
    if meta["backbone_checksum"] != backbone.checksum():
        raise ValueError("backbone checksum does not match the student archive")
    probe = nn.Linear(backbone.feature_dim, meta["feature_dim"])
    probe.load_state_dict(states["probe"])
    for p in probe.parameters():
        p.requires_grad_(False)
    return Student(backbone, probe, meta["feature_dim"], list(meta["pool_names"]))


def _cos(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu = u.norm()
    nv = v.norm()
    if float(nu) < 1e-12 or float(nv) < 1e-12:
        raise ValueError("degenerate feature: zero norm")
    return (u * v).sum() / (nu * nv)


def distill_loss(f_tilde, f_star, negatives=(), beta: float = 0.5):
    """Positive cosine term plus hinged cross-pair negatives.

    negatives holds (f_tilde_j, f_star_j) pairs from OTHER batch items; the
    penalty is beta times the mean of max(0, cos(f_tilde_i, f_star_j)).
    """
    f_tilde = torch.as_tensor(f_tilde, dtype=torch.float64) \
        if not isinstance(f_tilde, torch.Tensor) else f_tilde
    f_star = torch.as_tensor(f_star, dtype=torch.float64) \
        if not isinstance(f_star, torch.Tensor) else f_star
    loss = 1.0 - _cos(f_tilde, f_star)
    if negatives and beta != 0.0:
        terms = [torch.relu(_cos(f_tilde, fs_j)) for _, fs_j in negatives]
        loss = loss + beta * torch.stack(terms).mean()
    return loss


def distill_loss_batch(f_tilde: torch.Tensor, f_star: torch.Tensor,
                       beta: float = 0.5) -> torch.Tensor:
    """Batched loss: mean matched cosine term + beta * mean hinged mismatches."""
    tn = f_tilde.norm(dim=1, keepdim=True)
    sn = f_star.norm(dim=1, keepdim=True)
    if float(tn.detach().min()) < 1e-12 or float(sn.detach().min()) < 1e-12:
        raise ValueError("degenerate feature: zero norm")
    t = f_tilde / tn
    s = f_star / sn
    cos_matrix = t @ s.T
    pos = (1.0 - cos_matrix.diagonal()).mean()
    n = len(t)
    if n < 2 or beta == 0.0:
        return pos
    off = ~torch.eye(n, dtype=torch.bool)
    neg = torch.relu(cos_matrix[off]).mean()
    return pos + beta * neg


def features_std(feats: np.ndarray) -> float:
    """Collapse diagnostic: the largest per-dimension std over a sample set."""
    return float(np.std(feats, axis=0).max())


def train_student(pool: TeacherPool, backbone, train_images, val_images,
                  epochs=30, beta: float = 0.5, seed: int = 11,
                  batch_size=64, lr=1e-3, probe_init: str = "default"):
    """Jointly fit the probe and fusion head on the cosine objective.

    Teacher and backbone features are precomputed once: every model is frozen,
    so only the probe and fusion parameters move.
    """
    torch.manual_seed(seed)
    fusion = FusionHead(out_dim=STUDENT_DIM)
    probe = nn.Linear(backbone.feature_dim, STUDENT_DIM)
    if probe_init == "zero":
        with torch.no_grad():
            probe.weight.zero_()
            probe.bias.fill_(1.0)
            for conv in (fusion.conv1, fusion.conv2, fusion.conv3):
                conv.weight.zero_()
                conv.bias.fill_(1.0)
    elif probe_init != "default":
        raise ValueError(f"unknown probe_init {probe_init!r}")

    # Teacher tanh features share a big constant direction, which would make
    # every normalized sheet row nearly identical; centering on the train mean
    # leaves the per-sample (age-bearing) component as the fusion target.
    centers = pool.feature_centers(train_images)
    sheets_train = pool.stacked_features(train_images, centers)
    sheets_val = pool.stacked_features(val_images, centers)
    base_train = torch.from_numpy(backbone.features(train_images))
    base_val = torch.from_numpy(backbone.features(val_images))

    # Joint training from scratch settles on the constant-feature saddle: one
    # shared output direction zeroes the matched term while the mismatch
    # hinge saturates with vanishing gradient. Countermeasure: recenter both
    # heads on the train mean (GAP and bias shift outputs one-to-one, so the
    # mean folds exactly into the final biases), which keeps feature
    # directions sample-specific and the hinge gradients alive.
    def recenter():
        with torch.no_grad():
            fusion.conv3.bias -= fusion(sheets_train).mean(dim=0)
            probe.bias -= probe(base_train).mean(dim=0)

    params = list(probe.parameters()) + list(fusion.parameters())
    opt_probe = torch.optim.Adam(probe.parameters(), lr=lr)
    opt_joint = torch.optim.Adam(params, lr=lr)
    warmup = max(2, epochs // 5) if epochs > 0 else 0
    n = len(base_train)
    for epoch in range(epochs):
        recenter()
        opt = opt_probe if epoch < warmup else opt_joint
        rng = substream(seed, "batches", epoch)
        for idx in minibatches(rng, n, batch_size):
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = distill_loss_batch(fusion(sheets_train[idx]),
                                      probe(base_train[idx]), beta=beta)
            check_finite(loss, "distill")
            loss.backward()
            opt.step()

    # The cosine objective is scale free, so feature magnitude drifts during
    # training. Pin it: scale the probe so train features have unit-RMS
    # entries, which leaves every cosine unchanged and puts the collapse
    # threshold below on a defined scale.
    with torch.no_grad():
        rms = float(probe(base_train).norm(dim=1).mean()) / math.sqrt(STUDENT_DIM)
        if rms > 0:
            probe.weight.mul_(1.0 / rms)
            probe.bias.mul_(1.0 / rms)

    with torch.no_grad():
        f_star_val = probe(base_val)
        f_tilde_val = fusion(sheets_val)
        spread = features_std(f_star_val.numpy())
    if spread < 1e-3:
        raise TrainingError(f"representation collapse: val feature std {spread:.2e}")
    with torch.no_grad():
        val_loss = float(distill_loss_batch(f_tilde_val, f_star_val, beta=beta))
    matched = F.cosine_similarity(f_tilde_val, f_star_val, dim=1)
    for p in params:
        p.requires_grad_(False)
    student = Student(backbone, probe, STUDENT_DIM, list(pool.names))
    diag = {"val_loss": val_loss, "val_matched_cos": float(matched.mean()),
            "val_feature_std": spread}
    return student, fusion, diag


def fit_linear_age_readout(features: np.ndarray, ages: np.ndarray):
    """Least-squares age readout used as a privacy probe on student features."""
    X = np.column_stack([features.astype(np.float64),
                         np.ones(len(features))])
    coef, *_ = np.linalg.lstsq(X, np.asarray(ages, dtype=np.float64), rcond=None)
    return coef


def readout_ages(coef: np.ndarray, features: np.ndarray) -> np.ndarray:
    X = np.column_stack([features.astype(np.float64),
                         np.ones(len(features))])
    return X @ coef
