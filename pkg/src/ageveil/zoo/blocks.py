"""Shared network building blocks and training-loop helpers."""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..common import TrainingError, substream


class ConvBlock(nn.Module):
    """3x3 conv + ReLU, optional stride-2 downsampling."""

    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)

    def forward(self, x):
        return F.relu(self.conv(x))


class ResBlock(nn.Module):
    """Two 3x3 convs with an identity skip; keeps channel count."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return F.relu(x + h)


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention + MLP over a token sequence."""

    def __init__(self, dim, heads=4):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        n, t, c = x.shape
        dh = c // self.heads
        h = self.norm1(x)
        qkv = self.qkv(h).reshape(n, t, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        h = (att @ v).transpose(1, 2).reshape(n, t, c)
        x = x + self.proj(h)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Non-overlapping patches -> linear token embedding + learned positions."""

    def __init__(self, image_size, patch, c_in, dim):
        super().__init__()
        if image_size % patch != 0:
            raise ValueError("patch must divide image size")
        self.proj = nn.Conv2d(c_in, dim, kernel_size=patch, stride=patch)
        n_tokens = (image_size // patch) ** 2
        self.pos = nn.Parameter(torch.zeros(1, n_tokens, dim))

    def forward(self, x):
        tokens = self.proj(x).flatten(2).transpose(1, 2)
        return tokens + self.pos


def minibatches(rng: np.random.Generator, n: int, batch_size: int):
    """Yield index arrays covering a fresh permutation of range(n)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def check_finite(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{context}: non-finite loss {loss.item()!r}")


def fit(net, loss_fn, metric_fn, n_train, epochs, seed, batch_size=64,
        lr=1e-3, patience=5, lower_is_better=True, context="fit"):
    """Generic early-stopped training loop.

    loss_fn(idx) -> scalar loss for a train minibatch; metric_fn() -> val score.
    Restores the best-scoring weights before returning (score, history).
    """
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sign = 1.0 if lower_is_better else -1.0
    best_score = math.inf
    best_state = copy.deepcopy(net.state_dict())
    history = []
    stale = 0
    for epoch in range(epochs):
        net.train()
        rng = substream(seed, "batches", epoch)
        for idx in minibatches(rng, n_train, batch_size):
            opt.zero_grad()
            loss = loss_fn(idx)
            check_finite(loss, context)
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            score = float(metric_fn())
        history.append(score)
        if sign * score < best_score - 1e-9:
            best_score = sign * score
            best_state = copy.deepcopy(net.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return sign * best_score, history
