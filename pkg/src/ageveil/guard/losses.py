"""Tri-term obfuscation objective: hinged age-feature cosine, pixel MSE,
and disease-distribution KL, weighted lambda / phi / (1 - lambda - phi)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossTerms:
    """Per-batch means of the three objective terms; total carries the graph."""

    privacy: torch.Tensor
    quality: torch.Tensor
    disease: torch.Tensor
    total: torch.Tensor

    def detached(self) -> dict:
        return {name: float(getattr(self, name).detach())
                for name in ("privacy", "quality", "disease", "total")}


def loss_pp(x_in: torch.Tensor, x_ob: torch.Tensor, student, disease,
            lam: float = 0.4, phi: float = 0.4) -> LossTerms:
    """Differentiable in x_ob; the student and disease models stay frozen.

    privacy: mean over the batch of max(0, cos(A*(x_in), A*(x_ob)))
    quality: mean squared pixel error
    disease: mean KL(softmax S(x_in) || softmax S(x_ob))
    total:   lam*privacy + phi*quality + (1-lam-phi)*disease
    """
    if lam < 0 or phi < 0 or lam + phi > 1:
        raise ValueError(f"invalid weights lam={lam} phi={phi}")
    f_in = student.features_t(x_in)
    f_ob = student.features_t(x_ob)
    n_in = f_in.norm(dim=1)
    n_ob = f_ob.norm(dim=1)
    if float(n_in.detach().min()) < 1e-12 or float(n_ob.detach().min()) < 1e-12:
        raise ValueError("degenerate age feature: zero norm")
    cos = (f_in * f_ob).sum(dim=1) / (n_in * n_ob)
    privacy = torch.relu(cos).mean()

    quality = ((x_in - x_ob) ** 2).mean()

    logp = F.log_softmax(disease.logits_t(x_in), dim=1)
    logq = F.log_softmax(disease.logits_t(x_ob), dim=1)
    kl = (logp.exp() * (logp - logq)).sum(dim=1)
    # KL is nonnegative; float32 rounding can leave a near-zero value a few
    # ULPs below it, so pin the floor to keep the term contract exact
    disease_term = torch.clamp(kl.mean(), min=0.0)

    total = lam * privacy + phi * quality + (1.0 - lam - phi) * disease_term
    return LossTerms(privacy, quality, disease_term, total)
