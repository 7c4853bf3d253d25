"""Cohort persistence (PNG + manifest.csv) and deterministic splitting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..common import substream, file_checksum
from .params import Sample, SynthParams
from .render import generate_sample

SPLIT_NAMES = ("train", "val", "test", "heldout")
MANIFEST_HEADER = ["subject_id", "image", "mask", "age_years", "disease_label", "split"]


class CohortIOError(IOError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    subject_id: str
    image: str
    mask: str
    age_years: float
    disease_label: int
    split: str


@dataclass
class CohortManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def by_split(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def validate(self) -> None:
        ids = [r.subject_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject_ids in manifest")
        for r in self.records:
            if r.split not in SPLIT_NAMES:
                raise ValueError(f"{r.subject_id}: unknown split {r.split!r}")


def generate_cohort(params: SynthParams) -> list[Sample]:
    """Materialize the full cohort; a pure function of params."""
    samples = [generate_sample(params, i) for i in range(params.n_samples)]
    for s in samples:
        s.validate()
    return samples


def _save_png(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        data = np.round(np.clip(arr, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    else:
        data = (arr.astype(np.uint8) * 255)
        Image.fromarray(data, mode="L").save(path, format="PNG")


def _load_png(path: Path, mask: bool = False) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if mask:
        return arr > 127
    return (arr.astype(np.float32) / 255.0)


def write_cohort(samples: list[Sample], directory) -> CohortManifest:
    """Persist samples as 8-bit PNGs plus manifest.csv and a checksum sidecar."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    checksums = {}
    for s in samples:
        img_rel = f"images/{s.subject_id}.png"
        mask_rel = f"masks/{s.subject_id}.png"
        _save_png(directory / img_rel, s.image)
        _save_png(directory / mask_rel, s.vessel_mask)
        checksums[img_rel] = file_checksum(directory / img_rel)
        checksums[mask_rel] = file_checksum(directory / mask_rel)
        records.append(ManifestRecord(s.subject_id, img_rel, mask_rel, s.age_years, s.disease_label, "train"))
    manifest = CohortManifest(records)
    _write_manifest(manifest, directory)
    with open(directory / "checksums.json", "w", encoding="utf-8") as f:
        json.dump(checksums, f, indent=0, sort_keys=True)
    return manifest


def _write_manifest(manifest: CohortManifest, directory: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        writer.writerow([r.subject_id, r.image, r.mask, repr(r.age_years), r.disease_label, r.split])
    (directory / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")


def save_manifest(manifest: CohortManifest, directory) -> None:
    _write_manifest(manifest, Path(directory))


def load_cohort(directory, verify: bool = True) -> tuple[list[Sample], CohortManifest]:
    """Load a persisted cohort; verifies per-file checksums when the sidecar exists."""
    directory = Path(directory)
    manifest_path = directory / "manifest.csv"
    if not manifest_path.exists():
        raise CohortIOError(f"manifest not found in {directory}")
    with open(manifest_path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise CohortIOError(f"malformed manifest header in {manifest_path}")
    checksums = {}
    sidecar = directory / "checksums.json"
    if verify and sidecar.exists():
        checksums = json.loads(sidecar.read_text(encoding="utf-8"))

    records, samples = [], []
    for row in rows[1:]:
        sid, img_rel, mask_rel, age_s, label_s, split = row
        rec = ManifestRecord(sid, img_rel, mask_rel, float(age_s), int(label_s), split)
        for rel in (img_rel, mask_rel):
            path = directory / rel
            if not path.exists():
                raise CohortIOError(f"record {sid}: missing file {rel}")
            if rel in checksums and file_checksum(path) != checksums[rel]:
                raise CohortIOError(f"record {sid}: checksum mismatch for {rel}")
        image = _load_png(directory / img_rel)
        mask = _load_png(directory / mask_rel, mask=True)
        records.append(rec)
        samples.append(Sample(image, rec.age_years, rec.disease_label, mask, sid))
    manifest = CohortManifest(records)
    manifest.validate()
    return samples, manifest


def split_cohort(manifest: CohortManifest, fractions, seed: int) -> CohortManifest:
    """Assign splits by a seed-keyed permutation; floor-allocated, remainder to train."""
    if len(manifest) == 0:
        raise ValueError("cannot split an empty manifest")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 4 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be four nonnegative values")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(manifest)
    counts = [int(np.floor(f * n)) for f in fractions]
    counts[0] += n - sum(counts)
    perm = substream(seed, "split").permutation(n)
    assignment = [""] * n
    pos = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for j in perm[pos : pos + count]:
            assignment[j] = name
        pos += count
    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    return CohortManifest(records)
