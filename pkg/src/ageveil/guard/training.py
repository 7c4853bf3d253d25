"""Joint training of encoder, mask generator, and decoder against the
frozen student and disease models."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..common import TrainingError, images_to_tensor, substream
from ..distill import fit_linear_age_readout, readout_ages
from ..metrics import ssim
from ..zoo.blocks import check_finite, minibatches
from .losses import loss_pp
from .masking import GuardModel, MaskGenerator, apply_mask, batch_z_score
from .noise import PGD_EPS, PGD_STEP


@dataclass
class GuardConfig:
    """Objective weights, PGD budget, and optimization knobs."""

    lam: float = 0.4
    phi: float = 0.4
    pgd_eps: float = PGD_EPS
    pgd_steps: int = 10
    pgd_step_size: float = PGD_STEP
    strength: float = 1.0
    epochs: int = 20
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    recon_weight: float = 100.0
    pixel_budget: float = 0.005
    disease_budget: float = 0.05
    ssim_floor: float = 0.95
    budget_weight: float = 50.0
    width: int = 24
    mask_width: int = 24
    augment_p: float = 0.2

    def __post_init__(self):
        if self.lam < 0 or self.phi < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lam + self.phi > 1:
            raise ValueError(f"lam + phi must be <= 1, got {self.lam + self.phi}")
        if self.pgd_eps <= 0 or self.pgd_steps < 0 or self.pgd_step_size <= 0:
            raise ValueError("invalid PGD budget")
        if self.strength < 0:
            raise ValueError("strength must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GuardConfig":
        return cls(**d)


def _batch_ssim(x: torch.Tensor, y: torch.Tensor, window_size: int = 11,
                sigma: float = 1.5, k1: float = 0.01,
                k2: float = 0.03) -> torch.Tensor:
    """Differentiable mean SSIM over valid Gaussian windows (NxCxHxW)."""
    coords = torch.arange(window_size, dtype=x.dtype) - (window_size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = g[:, None] * g[None, :]
    win = (win / win.sum()).expand(x.shape[1], 1, window_size, window_size)

    def blur(t):
        return F.conv2d(t, win, groups=x.shape[1])

    c1, c2 = k1 ** 2, k2 ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return (num / den).mean()


def _shift(img: torch.Tensor, dy: int, dx: int, pad: int = 8) -> torch.Tensor:
    h, w = img.shape[1], img.shape[2]
    padded = F.pad(img, (pad, pad, pad, pad))
    return padded[:, pad + dy:pad + dy + h, pad + dx:pad + dx + w]


def _augment(x: torch.Tensor, zh: torch.Tensor, rng, p: float):
    """Rotation / crop-shift applied jointly to each image and its noise."""
    if p <= 0:
        return x, zh
    xs, zs = x.clone(), zh.clone()
    for i in range(len(xs)):
        if rng.random() < p:
            k = int(rng.integers(1, 4))
            xs[i] = torch.rot90(xs[i], k, dims=(1, 2))
            zs[i] = torch.rot90(zs[i], k, dims=(1, 2))
        if rng.random() < p:
            dy, dx = (int(v) for v in rng.integers(-8, 9, size=2))
            xs[i] = _shift(xs[i], dy, dx)
            zs[i] = _shift(zs[i], dy, dx)
    return xs, zs


def _check_terms(terms, context: str) -> None:
    for name in ("privacy", "quality", "disease"):
        value = float(getattr(terms, name).detach())
        if not np.isfinite(value):
            raise TrainingError(f"{context}: non-finite {name} term")
        if value < -1e-9:
            raise TrainingError(f"{context}: negative {name} term {value:.3e}")


def train_guard(train_images, train_ages, val_images, val_ages,
                config: GuardConfig, student, disease, aux_net,
                backbone) -> tuple[GuardModel, list]:
    """Optimize {E, M, D} under the tri-term loss at strength 1.

    The encoder/decoder start from the reconstruction-pretrained backbone and
    keep a reconstruction anchor so the s=0 path stays near identity. The
    checkpoint maximizing (val readout-MAE gain) - 10*max(0, 0.95 - val SSIM)
    is returned, with all three nets frozen.
    """
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    torch.manual_seed(config.seed)
    maskgen = MaskGenerator(config.mask_width)
    encoder = copy.deepcopy(backbone.encoder)
    decoder = copy.deepcopy(backbone.decoder)
    for p in (*encoder.parameters(), *decoder.parameters(), *maskgen.parameters()):
        p.requires_grad_(True)
    guard = GuardModel(encoder, decoder, maskgen, student, disease, aux_net, config)

    train_arr = np.asarray(train_images, dtype=np.float32)
    val_arr = np.asarray(val_images, dtype=np.float32)
    train_ages = np.asarray(train_ages, dtype=np.float64)
    val_ages = np.asarray(val_ages, dtype=np.float64)
    x_train = images_to_tensor(train_arr)
    zhat_train = batch_z_score(guard.noise_cache.get(train_arr, aux_net))

    coef = fit_linear_age_readout(student.features(train_arr), train_ages)

    def readout_mae(features) -> float:
        # clamp to plausible ages so off-manifold features cannot inflate
        # the gain term of the selection score without bound
        pred = np.clip(readout_ages(coef, features), 0.0, 120.0)
        return float(np.abs(pred - val_ages).mean())

    raw_val_mae = readout_mae(student.features(val_arr))

    params = (list(encoder.parameters()) + list(decoder.parameters())
              + list(maskgen.parameters()))
    opt = torch.optim.Adam(params, lr=config.lr)
    n = len(x_train)
    history = []
    best_score, best_states = -np.inf, None

    for epoch in range(config.epochs):
        rng = substream(config.seed, "batches", epoch)
        aug_rng = substream(config.seed, "augment", epoch)
        sums = {"privacy": 0.0, "quality": 0.0, "disease": 0.0, "recon": 0.0}
        mins = {"privacy": np.inf, "quality": np.inf, "disease": np.inf}
        batches = 0
        for idx in minibatches(rng, n, config.batch_size):
            x, zh = _augment(x_train[idx], zhat_train[idx], aug_rng,
                             config.augment_p)
            opt.zero_grad()
            x_ob = decoder(apply_mask(encoder(x), maskgen(zh), 1.0))
            terms = loss_pp(x, x_ob, student, disease, config.lam, config.phi)
            _check_terms(terms, "guard training")
            loss = terms.total
            # barrier keeping the obfuscation inside the distortion budgets,
            # so privacy is minimized on the budget boundary rather than by
            # destroying the image outright
            if config.budget_weight > 0:
                loss = loss + config.budget_weight * (
                    F.relu(terms.quality - config.pixel_budget)
                    + F.relu(terms.disease - config.disease_budget)
                    + F.relu(config.ssim_floor - _batch_ssim(x, x_ob)))
            recon_val = 0.0
            if config.recon_weight > 0:
                recon = ((decoder(encoder(x)) - x) ** 2).mean()
                loss = loss + config.recon_weight * recon
                recon_val = float(recon.detach())
            check_finite(loss, "guard")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            batches += 1
            detached = terms.detached()
            for key in ("privacy", "quality", "disease"):
                sums[key] += detached[key]
                mins[key] = min(mins[key], detached[key])
            sums["recon"] += recon_val

        obf = guard.obfuscate(val_arr, s=1.0)
        per_image_std = obf.reshape(len(obf), -1).std(axis=1)
        if float(per_image_std.mean()) < 1e-3:
            raise TrainingError("decoder collapse: obfuscated val images are "
                                f"constant (mean std {per_image_std.mean():.2e})")
        obf_mae = readout_mae(student.features(obf))
        ssim_mean = float(np.mean([ssim(obf[i], val_arr[i])
                                   for i in range(len(obf))]))
        val_mse = float(((obf - val_arr) ** 2).mean())
        with torch.no_grad():
            logp = F.log_softmax(disease.logits_t(images_to_tensor(val_arr)), dim=1)
            logq = F.log_softmax(disease.logits_t(images_to_tensor(obf)), dim=1)
            val_kl = float((logp.exp() * (logp - logq)).sum(dim=1).mean())
        score = (obf_mae - raw_val_mae) - 10.0 * max(0.0, 0.95 - ssim_mean)
        entry = {"epoch": epoch, "val_ssim": ssim_mean,
                 "val_mae_gain": obf_mae - raw_val_mae, "score": score,
                 "raw_val_mae": raw_val_mae, "obf_val_mae": obf_mae,
                 "val_pixel_mse": val_mse, "val_disease_kl": val_kl}
        for key in ("privacy", "quality", "disease", "recon"):
            entry[key] = sums[key] / max(batches, 1)
        for key in ("privacy", "quality", "disease"):
            entry["min_" + key] = mins[key]
        history.append(entry)
        if score > best_score:
            best_score = score
            best_states = {"encoder": copy.deepcopy(encoder.state_dict()),
                           "decoder": copy.deepcopy(decoder.state_dict()),
                           "maskgen": copy.deepcopy(maskgen.state_dict())}

    encoder.load_state_dict(best_states["encoder"])
    decoder.load_state_dict(best_states["decoder"])
    maskgen.load_state_dict(best_states["maskgen"])
    for p in params:
        p.requires_grad_(False)
    return guard, history
