"""Shared plumbing: deterministic RNG substreams, checksums, tensor conversion."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


class TrainingError(RuntimeError):
    """Raised when a training run fails (non-finite loss, collapse, bad data)."""


def _key_words(key) -> list[int]:
    if isinstance(key, (int, np.integer)):
        return [int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF]
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    raise TypeError(f"unsupported substream key: {key!r}")


def substream(*keys) -> np.random.Generator:
    """Independent RNG stream derived from a tuple of int/str keys.

    Streams for distinct key tuples are statistically independent, so e.g.
    (seed, index, "layout") and (seed, index, "age") never interact.
    """
    words: list[int] = []
    for key in keys:
        words.extend(_key_words(key))
    return np.random.default_rng(np.random.SeedSequence(words))


def seed_everything(seed: int) -> None:
    """Pin every library RNG plus torch's thread count for bit-reproducible runs."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, torch.get_num_threads()))


def array_checksum(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in sorted state-dict order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def text_checksum(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x 3 float arrays in [0,1] -> N x 3 x H x W float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected NxHxWx3 images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))


def project_linf(x0: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Project x onto the L-inf ball of radius eps around x0 and into [0,1],
    guaranteed on the stored float32 values, not just in exact arithmetic."""
    x0_64 = x0.astype(np.float64)
    d = np.clip(x.astype(np.float64) - x0_64, -eps, eps)
    out = np.clip(x0_64 + d, 0.0, 1.0).astype(np.float32)
    # rounding the sum to float32 can spill a few ulps past the ball boundary;
    # nudge offenders one representable value toward x0 until inside
    for _ in range(3):
        d32 = out.astype(np.float64) - x0_64
        over = d32 > eps
        under = d32 < -eps
        if not (over.any() or under.any()):
            break
        out[over] = np.nextafter(out[over], np.float32(-np.inf))
        out[under] = np.nextafter(out[under], np.float32(np.inf))
    return out
