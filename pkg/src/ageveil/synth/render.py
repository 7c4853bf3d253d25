"""Procedural rendering of retina-like images with controllable age/disease factors."""

from __future__ import annotations

import numpy as np

from ..common import substream
from .params import Sample, SynthParams

_BASE_COLOR = np.array([0.78, 0.42, 0.20])      # fundus ground
_VESSEL_COLOR = np.array([0.42, 0.10, 0.08])
_DISC_COLOR = np.array([1.00, 0.86, 0.58])
_LESION_COLOR = np.array([0.98, 0.92, 0.55])


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return xs, ys


def _fundus_region(size):
    xs, ys = _grid(size)
    c = size / 2.0
    r = 0.47 * size
    dist = np.hypot(xs - c, ys - c)
    return dist <= r, dist / r


def _branch_points(p0, direction, length, tortuosity, cycles, phase, n=None):
    """Polyline for one vessel segment; sinusoidal offset pinned to zero at both ends."""
    if n is None:
        n = max(6, int(length * 2.5))
    t = np.linspace(0.0, 1.0, n)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    normal = np.array([-d[1], d[0]])
    amp = 0.10 * length * tortuosity
    wiggle = np.sin(2 * np.pi * cycles * t + phase)
    wiggle = wiggle - ((1 - t) * wiggle[0] + t * wiggle[-1])
    pts = p0[None, :] + t[:, None] * length * d[None, :] + (amp * wiggle)[:, None] * normal[None, :]
    return pts


def _vessel_polylines(rng: np.random.Generator, tortuosity: float, width: float, size: float):
    """Recursive branching tree rooted at an optic-disc location.

    The number and order of RNG draws is independent of tortuosity so that
    layout is a pure function of the stream.
    """
    tortuosity = max(0.0, float(tortuosity))
    width = max(1.0, float(width))
    c = size / 2.0
    side = 1.0 if rng.random() < 0.5 else -1.0
    root = np.array([c + side * 0.33 * size + rng.normal(0, 0.01 * size),
                     c + rng.normal(0, 0.05 * size)])
    toward_center = np.array([-side, 0.0])
    base_angle = np.arctan2(toward_center[1], toward_center[0])

    n_main = 5
    fan = np.linspace(-1.05, 1.05, n_main)
    polylines = []
    disc_center = root.copy()

    def grow(p0, angle, length, w, depth):
        cycles = 2.1 + 0.5 * rng.random()
        phase = rng.uniform(0, 2 * np.pi)
        d = np.array([np.cos(angle), np.sin(angle)])
        pts = _branch_points(p0, d, length, tortuosity, cycles, phase)
        polylines.append((pts, w))
        if depth >= 2:
            # keep draw counts level-independent: consume the same entropy
            rng.uniform(-0.5, 0.5, size=4)
            return
        spread = 0.45 + 0.15 * rng.random()
        jitter = rng.uniform(-0.18, 0.18, size=2)
        rng.random()  # reserved draw, keeps stream layout stable
        end = pts[-1]
        child_len = length * (0.60 + 0.06 * depth)
        grow(end, angle + spread + jitter[0], child_len, w * 0.82, depth + 1)
        grow(end, angle - spread + jitter[1], child_len, w * 0.82, depth + 1)

    for off in fan:
        angle = base_angle + off + rng.uniform(-0.07, 0.07)
        length = size * (0.26 + 0.035 * rng.random())
        grow(root.copy(), angle, length, width, 0)
    return polylines, disc_center


def _stamp_polylines(polylines, size):
    """Rasterize polylines to a soft coverage map in [0, 1]."""
    alpha = np.zeros((size, size), dtype=np.float64)
    for pts, w in polylines:
        seg = np.diff(pts, axis=0)
        seglen = np.hypot(seg[:, 0], seg[:, 1])
        total = seglen.sum()
        if total <= 0:
            continue
        n_samples = max(2, int(total / 0.4))
        cum = np.concatenate([[0.0], np.cumsum(seglen)])
        s = np.linspace(0.0, total, n_samples)
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        frac = (s - cum[idx]) / np.maximum(seglen[idx], 1e-12)
        samples = pts[idx] + seg[idx] * frac[:, None]
        radius = w / 2.0
        win = int(np.ceil(radius + 1.0))
        for px, py in samples:
            x0, y0 = int(np.floor(px)) - win, int(np.floor(py)) - win
            x1, y1 = x0 + 2 * win + 1, y0 + 2 * win + 1
            x0c, y0c = max(0, x0), max(0, y0)
            x1c, y1c = min(size, x1), min(size, y1)
            if x0c >= x1c or y0c >= y1c:
                continue
            yy, xx = np.mgrid[y0c:y1c, x0c:x1c]
            d = np.hypot(xx + 0.5 - px, yy + 0.5 - py)
            cover = np.clip(radius + 0.5 - d, 0.0, 1.0)
            region = alpha[y0c:y1c, x0c:x1c]
            np.maximum(region, cover, out=region)
    return alpha


def render_vessel_tree(rng: np.random.Generator, tortuosity: float, width: float, size: int) -> np.ndarray:
    """Binary vessel mask confined to the circular fundus region."""
    polylines, _ = _vessel_polylines(rng, tortuosity, width, size)
    alpha = _stamp_polylines(polylines, size)
    region, _ = _fundus_region(size)
    return (alpha > 0.5) & region


def _soft_disc(size, center, radius, softness=1.0):
    xs, ys = _grid(size)
    d = np.hypot(xs - center[0], ys - center[1])
    return np.clip((radius - d) / softness + 0.5, 0.0, 1.0)


def _place_lesions(rng, vessel_mask, region, params):
    size = params.image_size
    lo, hi = params.lesion_count_range
    count = int(rng.integers(lo, hi + 1))
    rmin, rmax = params.lesion_radius_range
    c = size / 2.0
    lesions = []
    vy, vx = np.nonzero(vessel_mask)
    vpts = np.stack([vx + 0.5, vy + 0.5], axis=1) if len(vx) else np.zeros((0, 2))
    for _ in range(count):
        radius = rng.uniform(rmin, rmax)
        best, best_d = None, -1.0
        for _attempt in range(40):
            ang = rng.uniform(0, 2 * np.pi)
            rad = 0.40 * size * np.sqrt(rng.random())
            p = np.array([c + rad * np.cos(ang), c + rad * np.sin(ang)])
            d = np.min(np.hypot(vpts[:, 0] - p[0], vpts[:, 1] - p[1])) if len(vpts) else size
            if d > best_d:
                best, best_d = p, d
            if d >= radius + 1.5:
                break
        lesions.append((best, radius))
    return lesions


def render_sample(params: SynthParams, index: int, age_years: float, disease_label: int) -> Sample:
    """Render one sample from explicit factor values.

    Layout, texture phases and lesion placement come from substreams keyed
    only by (seed, index), so two renders of the same index that differ only
    in age draw identical randomness.
    """
    size = params.image_size
    layout_rng = substream(params.seed, index, "layout")
    texture_rng = substream(params.seed, index, "texture")
    lesion_rng = substream(params.seed, index, "lesion")

    region, rnorm = _fundus_region(size)
    age_delta = age_years - params.age_range[0]

    img = np.empty((size, size, 3), dtype=np.float64)
    shading = 1.0 - 0.25 * np.clip(rnorm, 0, 1) ** 2
    for ch in range(3):
        img[:, :, ch] = _BASE_COLOR[ch] * shading

    # age channel 1: global tint, linear in age
    tint = params.tint_shift_per_year * age_delta
    img[:, :, 1] += tint
    img[:, :, 2] += 0.5 * tint

    # age channel 2: oriented texture whose spatial frequency is linear in age
    freq = params.texture_freq_base + params.texture_freq_per_year * age_delta
    xs, ys = _grid(size)
    theta = texture_rng.uniform(0, np.pi)
    phase1 = texture_rng.uniform(0, 2 * np.pi)
    phase2 = texture_rng.uniform(0, 2 * np.pi)
    u = (xs * np.cos(theta) + ys * np.sin(theta)) / size
    v = (-xs * np.sin(theta) + ys * np.cos(theta)) / size
    tex = np.sin(2 * np.pi * freq * u + phase1) + 0.6 * np.sin(2 * np.pi * freq * 0.8 * v + phase2)
    tex *= params.texture_amplitude
    img += tex[:, :, None] * np.array([1.0, 0.8, 0.6])[None, None, :]

    # age channel 3: vessel tortuosity
    tortuosity = params.tortuosity_base + params.tortuosity_per_year * age_delta
    polylines, disc_center = _vessel_polylines(layout_rng, tortuosity, params.vessel_base_width, size)
    alpha = _stamp_polylines(polylines, size)
    vessel_mask = (alpha > 0.5) & region
    blend = (alpha * 0.9)[:, :, None]
    img = img * (1 - blend) + _VESSEL_COLOR[None, None, :] * blend

    disc = _soft_disc(size, disc_center, 0.065 * size, softness=1.5)[:, :, None]
    img = img * (1 - disc * 0.85) + _DISC_COLOR[None, None, :] * disc * 0.85

    if disease_label:
        for center, radius in _place_lesions(lesion_rng, vessel_mask, region, params):
            spot = _soft_disc(size, center, radius, softness=1.2)[:, :, None]
            img = img * (1 - spot * 0.9) + _LESION_COLOR[None, None, :] * spot * 0.9

    img += texture_rng.normal(0.0, params.pixel_noise_std, size=img.shape)
    img[~region] = 0.0
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    return Sample(
        image=img,
        age_years=float(age_years),
        disease_label=int(disease_label),
        vessel_mask=vessel_mask,
        subject_id=f"s{index:05d}",
    )


def generate_sample(params: SynthParams, index: int) -> Sample:
    """Deterministic sample for (params, index); age and disease are drawn independently."""
    if not 0 <= index < params.n_samples:
        raise IndexError(f"index {index} outside [0, {params.n_samples})")
    lo, hi = params.age_range
    age = lo + substream(params.seed, index, "age").random() * (hi - lo)
    disease = int(substream(params.seed, index, "disease").random() < params.disease_prevalence)
    return render_sample(params, index, age, disease)
