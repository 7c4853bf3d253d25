"""Reference obfuscators: identity, Gaussian blur, Gaussian noise, DP pixelation,
and a white-box PGD attack on one designated age model."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .common import images_to_tensor, project_linf, substream

EPS_8BIT = 8.0 / 255.0


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ValueError(f"expected HxWx3 or NxHxWx3, got shape {arr.shape}")
    return arr, False


def identity(images) -> np.ndarray:
    arr, single = _as_batch(images)
    out = arr.copy()
    return out[0] if single else out


def _gaussian_kernel1d(kernel: int, sigma: float) -> np.ndarray:
    half = kernel // 2
    x = np.arange(kernel, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def blur(images, kernel: int = 7, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    if sigma is None:
        sigma = 0.15 * kernel + 0.35
    arr, single = _as_batch(images)
    if kernel == 1:
        return arr[0].copy() if single else arr.copy()
    g = torch.tensor(_gaussian_kernel1d(kernel, sigma), dtype=torch.float32)
    x = images_to_tensor(arr)
    pad = kernel // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    w_h = g.reshape(1, 1, 1, kernel).repeat(3, 1, 1, 1)
    w_v = g.reshape(1, 1, kernel, 1).repeat(3, 1, 1, 1)
    x = F.conv2d(x, w_h, groups=3)
    x = F.conv2d(x, w_v, groups=3)
    out = x.permute(0, 2, 3, 1).numpy().astype(np.float32)
    return out[0] if single else out


def gauss_noise(images, variance: float = 8.0, seed: int = 0) -> np.ndarray:
    """Additive Gaussian noise with the variance given on the 0-255 scale."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    arr, single = _as_batch(images)
    if variance == 0:
        return arr[0].copy() if single else arr.copy()
    sigma = float(np.sqrt(variance)) / 255.0
    rng = substream(seed, "gauss-noise")
    noisy = arr + rng.normal(scale=sigma, size=arr.shape).astype(np.float32)
    out = np.clip(noisy, 0.0, 1.0)
    return out[0] if single else out


def dp_blur(images, grid: int = 8, dp_epsilon: float = 1.0, seed: int = 0) -> np.ndarray:
    """Differentially private pixelation: cell means plus per-cell Laplace noise."""
    arr, single = _as_batch(images)
    n, h, w, _ = arr.shape
    if h % grid or w % grid:
        raise ValueError(f"grid {grid} must divide image size {h}x{w}")
    if dp_epsilon <= 0:
        raise ValueError("dp_epsilon must be positive")
    gh, gw = h // grid, w // grid
    cells = arr.reshape(n, gh, grid, gw, grid, 3).mean(axis=(2, 4))
    scale = 1.0 / (grid * grid * dp_epsilon)
    rng = substream(seed, "dp-blur")
    noisy = cells + rng.laplace(scale=scale, size=cells.shape).astype(np.float32)
    out = np.repeat(np.repeat(noisy, grid, axis=1), grid, axis=2)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[0] if single else out


def _age_loss(model, x: torch.Tensor, anchor) -> torch.Tensor:
    """Training-style loss of the target model against its own clean prediction."""
    out = model.net(x)
    if model.task == "classification":
        return F.cross_entropy(out, anchor)
    return F.mse_loss(out.squeeze(1), anchor)


def adv_pgd(images, target_age_model, eps: float = EPS_8BIT, steps: int = 10,
            step: float = 2.0 / 255.0, seed: int = 0) -> np.ndarray:
    """Untargeted PGD on the designated age model; the anchor label is the
    model's own clean-image prediction, so no ground truth is consumed."""
    arr, single = _as_batch(images)
    x0 = images_to_tensor(arr)
    if steps == 0:
        return arr[0].copy() if single else arr.copy()
    with torch.no_grad():
        out = target_age_model.net(x0)
        if target_age_model.task == "classification":
            anchor = out.argmax(dim=1)
        else:
            anchor = out.squeeze(1).detach()
    # seeded random start inside the ball; the anchor loss has zero gradient at x0
    rng = substream(seed, "adv-start")
    delta = rng.uniform(-eps, eps, size=x0.shape).astype(np.float32)
    x = torch.clamp(x0 + torch.from_numpy(delta), 0.0, 1.0)
    for _ in range(steps):
        x = x.detach().requires_grad_(True)
        loss = _age_loss(target_age_model, x, anchor)
        grad = torch.autograd.grad(loss, x)[0]
        if not torch.isfinite(grad).all():
            raise FloatingPointError("non-finite PGD gradient")
        with torch.no_grad():
            x = x + step * grad.sign()
            x = x0 + torch.clamp(x - x0, -eps, eps)
            x = torch.clamp(x, 0.0, 1.0)
    adv = x.detach().permute(0, 2, 3, 1).numpy()
    out = project_linf(arr, adv, eps)
    return out[0] if single else out


class Obfuscator:
    """Uniform transform interface shared by every baseline and the guard."""

    def __init__(self, name: str, fn, parameters: dict | None = None):
        self.name = name
        self.parameters = dict(parameters or {})
        self._fn = fn

    def transform(self, images) -> np.ndarray:
        out = self._fn(images)
        arr = np.asarray(out)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{self.name}: output escaped [0,1]")
        return out

    def __repr__(self):
        return f"Obfuscator({self.name}, {self.parameters})"


def make_baselines(target_age_model=None, seed: int = 0) -> dict:
    """Named baseline suite; the PGD entry needs a designated target model."""
    methods = {
        "identity": Obfuscator("identity", identity),
        "blur": Obfuscator("blur", lambda im: blur(im, kernel=7),
                           {"kernel": 7}),
        "noise": Obfuscator("noise", lambda im: gauss_noise(im, 8.0, seed),
                            {"variance": 8.0, "seed": seed}),
        "dp-blur": Obfuscator("dp-blur", lambda im: dp_blur(im, 8, 1.0, seed),
                              {"grid": 8, "dp_epsilon": 1.0, "seed": seed}),
    }
    if target_age_model is not None:
        methods["adv"] = Obfuscator(
            "adv", lambda im: adv_pgd(im, target_age_model, seed=seed),
            {"eps": EPS_8BIT, "steps": 10, "seed": seed})
    return methods
