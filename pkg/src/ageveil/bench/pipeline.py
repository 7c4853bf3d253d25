"""Staged artifact builder with an on-disk cache.

Training the full model suite takes the better part of an hour on one core,
so every stage persists its product under ``<out_dir>/cache`` keyed by a
digest of the parameters that could change the result.  Reruns with the same
config load from disk; changing a knob invalidates exactly the stages that
depend on it (a new cohort seed retrains everything, a new guard seed only
retrains that guard).
"""

import hashlib
import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from ..common import array_checksum, substream
from ..synth import generate_cohort, SPLIT_NAMES
from ..zoo import (TEACHER_CONFIGS, AgeEncoder, train_named_teacher,
                   DiseaseEncoder, train_disease_encoder,
                   train_vessel_segmenter, save_segmenter, load_segmenter,
                   train_rotation_classifier, save_rotation, load_rotation,
                   pretrain_foundation_backbone, FoundationBackbone,
                   new_backbone, pretrain_reconstruction, save_backbone,
                   load_backbone)
from ..zoo.heldout import train_heldout_model
from ..distill import TeacherPool, Student, train_student, load_student
from ..guard import train_guard, load_guard
from ..baselines import make_baselines
from .config import RunConfig
from .budget import TradeoffBudget, TradeoffPoint
from .compare import run_method_comparison
from .sweep import run_tradeoff_sweep
from .ablate import DEFAULT_POOLS, run_pool_ablation
from .report import emit_report, load_comparison_json

# fixed seeds for the single-instance zoo members; teacher seeds live in
# TEACHER_CONFIGS and guard seeds in the run config
DISEASE_SEED = 41
SEGMENTER_SEED = 31
ROTATION_SEED = 61


@dataclass
class SplitArrays:
    """One cohort split as flat arrays."""

    images: np.ndarray   # N x H x W x 3 float32
    ages: np.ndarray     # N float64
    labels: np.ndarray   # N int64
    masks: np.ndarray    # N x H x W bool

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class CohortData:
    """Materialized cohort with its split assignment and content digest."""

    images: np.ndarray
    ages: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    splits: dict
    checksum: str

    def subset(self, name: str) -> SplitArrays:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}")
        idx = self.splits[name]
        return SplitArrays(self.images[idx], self.ages[idx],
                           self.labels[idx], self.masks[idx])


def _digest(parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _cohort_checksum(images, ages, labels, masks) -> str:
    h = hashlib.sha256()
    for arr in (images, ages, labels, masks):
        h.update(array_checksum(arr).encode())
    return h.hexdigest()[:16]


class Pipeline:
    """Builds and caches every artifact a benchmark run needs."""

    def __init__(self, config: RunConfig, cache_dir=None):
        self.config = config
        self.cache = Path(cache_dir) if cache_dir else Path(config.out_dir) / "cache"
        self.cache.mkdir(parents=True, exist_ok=True)
        self.timings_path = self.cache / "timings.json"

    # -- bookkeeping ---------------------------------------------------

    def _record(self, stage: str, seconds: float) -> None:
        timings = self.timings()
        timings[stage] = round(seconds, 2)
        self.timings_path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")

    def timings(self) -> dict:
        """Wall-clock seconds per stage, accumulated across runs that trained."""
        if self.timings_path.exists():
            return json.loads(self.timings_path.read_text())
        return {}

    def _run(self, stage: str, path: Path, build, save, load):
        """Shared cache protocol: load if present, else build, time, save."""
        if path.exists():
            return load(path)
        start = time.monotonic()
        product = build()
        self._record(stage, time.monotonic() - start)
        save(product, path)
        return product

    # -- data ----------------------------------------------------------

    def _cohort_key(self) -> str:
        return _digest({"synth": asdict(self.config.synth_params()),
                        "sizes": self.config.split_sizes(),
                        "split_seed": self.config.split_seed})

    def cohort(self) -> CohortData:
        path = self.cache / f"cohort-{self._cohort_key()}.npz"

        def build():
            samples = generate_cohort(self.config.synth_params())
            images = np.stack([s.image for s in samples])
            ages = np.array([s.age_years for s in samples], dtype=np.float64)
            labels = np.array([s.disease_label for s in samples], dtype=np.int64)
            masks = np.stack([s.vessel_mask for s in samples])
            splits = self._assign_splits(len(samples))
            return CohortData(images, ages, labels, masks, splits,
                              _cohort_checksum(images, ages, labels, masks))

        def save(c, p):
            np.savez(p, images=c.images, ages=c.ages, labels=c.labels,
                     masks=c.masks,
                     **{f"idx_{k}": v for k, v in c.splits.items()})

        def load(p):
            with np.load(p) as z:
                splits = {k: z[f"idx_{k}"] for k in SPLIT_NAMES}
                return CohortData(z["images"], z["ages"], z["labels"], z["masks"],
                                  splits, _cohort_checksum(z["images"], z["ages"],
                                                           z["labels"], z["masks"]))

        return self._run("cohort", path, build, save, load)

    def _assign_splits(self, n: int) -> dict:
        # same permutation stream as the manifest splitter, but with exact
        # counts instead of floored fractions (floats would jitter the floor)
        sizes = self.config.split_sizes()
        perm = substream(self.config.split_seed, "split").permutation(n)
        splits, pos = {}, 0
        for name, count in zip(SPLIT_NAMES, sizes):
            splits[name] = np.sort(perm[pos:pos + count])
            pos += count
        return splits

    # -- frozen model zoo ------------------------------------------------

    def teacher(self, name: str) -> AgeEncoder:
        cohort = self.cohort()
        key = _digest({"cohort": cohort.checksum, "teacher": name,
                       "epochs": self.config.teacher_epochs})
        path = self.cache / f"teacher-{name}-{key}.pt"

        def build():
            train, val = cohort.subset("train"), cohort.subset("val")
            return train_named_teacher(name, train.images, train.ages,
                                       val.images, val.ages,
                                       epochs=self.config.teacher_epochs)

        return self._run(f"teacher-{name}", path, build,
                         lambda enc, p: enc.save(p, cohort.checksum),
                         AgeEncoder.load)

    def teachers(self) -> dict:
        return {name: self.teacher(name) for name in TEACHER_CONFIGS}

    def heldout(self) -> AgeEncoder:
        cohort = self.cohort()
        key = _digest({"cohort": cohort.checksum,
                       "epochs": self.config.heldout_epochs})
        path = self.cache / f"heldout-{key}.pt"

        def build():
            # trained on its own reserved split so the transfer claim is
            # leakage-free; validates on the shared val split
            own, val = cohort.subset("heldout"), cohort.subset("val")
            return train_heldout_model(own.images, own.ages, val.images,
                                       val.ages, epochs=self.config.heldout_epochs)

        return self._run("heldout", path, build,
                         lambda enc, p: enc.save(p, cohort.checksum),
                         AgeEncoder.load)

    def disease(self) -> DiseaseEncoder:
        cohort = self.cohort()
        key = _digest({"cohort": cohort.checksum, "seed": DISEASE_SEED,
                       "epochs": self.config.disease_epochs})
        path = self.cache / f"disease-{key}.pt"

        def build():
            train, val = cohort.subset("train"), cohort.subset("val")
            return train_disease_encoder(train.images, train.labels,
                                         val.images, val.labels,
                                         seed=DISEASE_SEED,
                                         epochs=self.config.disease_epochs)

        return self._run("disease", path, build,
                         lambda enc, p: enc.save(p, cohort.checksum),
                         DiseaseEncoder.load)

    def segmenter(self):
        cohort = self.cohort()
        key = _digest({"cohort": cohort.checksum, "seed": SEGMENTER_SEED,
                       "epochs": self.config.segmenter_epochs})
        path = self.cache / f"segmenter-{key}.pt"

        def build():
            train, val = cohort.subset("train"), cohort.subset("val")
            return train_vessel_segmenter(train.images, train.masks,
                                          val.images, val.masks,
                                          seed=SEGMENTER_SEED,
                                          epochs=self.config.segmenter_epochs)

        return self._run("segmenter", path, build,
                         lambda net, p: save_segmenter(net, p, cohort.checksum),
                         load_segmenter)

    def rotation(self):
        cohort = self.cohort()
        key = _digest({"cohort": cohort.checksum, "seed": ROTATION_SEED,
                       "epochs": self.config.rotation_epochs})
        path = self.cache / f"rotation-{key}.pt"

        def build():
            train, val = cohort.subset("train"), cohort.subset("val")
            return train_rotation_classifier(train.images, val.images,
                                             seed=ROTATION_SEED,
                                             epochs=self.config.rotation_epochs)

        return self._run("rotation", path, build,
                         lambda net, p: save_rotation(net, p, cohort.checksum),
                         load_rotation)

    def foundation(self) -> FoundationBackbone:
        cohort = self.cohort()
        key = _digest({"cohort": cohort.checksum, "seed": self.config.zoo_seed,
                       "epochs": self.config.foundation_epochs})
        path = self.cache / f"foundation-{key}.pt"

        def build():
            train, val = cohort.subset("train"), cohort.subset("val")
            return pretrain_foundation_backbone(train.images, val.images,
                                                seed=self.config.zoo_seed,
                                                epochs=self.config.foundation_epochs)

        return self._run("foundation", path, build,
                         lambda bb, p: bb.save(p, cohort.checksum),
                         FoundationBackbone.load)

    def guard_backbone(self):
        cohort = self.cohort()
        key = _digest({"cohort": cohort.checksum, "seed": self.config.zoo_seed,
                       "epochs": self.config.recon_epochs,
                       "width": self.config.guard_width})
        path = self.cache / f"backbone-{key}.pt"

        def build():
            train, val = cohort.subset("train"), cohort.subset("val")
            backbone = new_backbone(seed=self.config.zoo_seed,
                                    width=self.config.guard_width)
            pretrain_reconstruction(backbone, train.images, val.images,
                                    seed=self.config.zoo_seed,
                                    epochs=self.config.recon_epochs)
            return backbone

        return self._run("backbone", path, build,
                         lambda bb, p: save_backbone(bb, p, cohort.checksum),
                         load_backbone)

    # -- distillation and guards -----------------------------------------

    def student(self, pool_names=None) -> Student:
        pool_names = tuple(pool_names) if pool_names else DEFAULT_POOLS["four"]
        cohort = self.cohort()
        foundation = self.foundation()
        key = _digest({"cohort": cohort.checksum, "pool": pool_names,
                       "epochs": self.config.distill_epochs,
                       "beta": self.config.distill_beta,
                       "seed": self.config.distill_seed,
                       "foundation": foundation.checksum()})
        path = self.cache / f"student-{'_'.join(pool_names)}-{key}.pt"

        def build():
            pool = TeacherPool(pool_names, [self.teacher(n) for n in pool_names])
            train, val = cohort.subset("train"), cohort.subset("val")
            student, fusion, _ = train_student(pool, foundation,
                                               train.images, val.images,
                                               epochs=self.config.distill_epochs,
                                               beta=self.config.distill_beta,
                                               seed=self.config.distill_seed)
            student._fusion = fusion
            student._pool = pool
            return student

        def save(student, p):
            student.save(p, cohort.checksum, fusion=getattr(student, "_fusion", None),
                         pool=getattr(student, "_pool", None))

        return self._run(f"student-{'+'.join(pool_names)}", path, build, save,
                         lambda p: load_student(p, foundation))

    def guard(self, seed: int, pool_names=None):
        pool_names = tuple(pool_names) if pool_names else DEFAULT_POOLS["four"]
        cohort = self.cohort()
        student = self.student(pool_names)
        disease = self.disease()
        guard_config = self.config.guard_config(seed)
        key = _digest({"cohort": cohort.checksum, "pool": pool_names,
                       "student": student.checksum(),
                       "guard": guard_config.to_dict()})
        path = self.cache / f"guard-{'_'.join(pool_names)}-s{seed}-{key}.pt"
        history_path = path.with_suffix(".history.json")

        def build():
            train, val = cohort.subset("train"), cohort.subset("val")
            guard, history = train_guard(train.images, train.ages,
                                         val.images, val.ages, guard_config,
                                         student, disease, self.rotation(),
                                         self.guard_backbone())
            history_path.write_text(json.dumps(history, indent=2) + "\n")
            return guard

        return self._run(f"guard-{'+'.join(pool_names)}-s{seed}", path, build,
                         lambda g, p: g.save(p),
                         lambda p: load_guard(p, student, disease))

    def guard_history(self, seed: int, pool_names=None) -> list:
        pool_names = tuple(pool_names) if pool_names else DEFAULT_POOLS["four"]
        self.guard(seed, pool_names)
        student = self.student(pool_names)
        key = _digest({"cohort": self.cohort().checksum, "pool": pool_names,
                       "student": student.checksum(),
                       "guard": self.config.guard_config(seed).to_dict()})
        history_path = self.cache / f"guard-{'_'.join(pool_names)}-s{seed}-{key}.history.json"
        return json.loads(history_path.read_text())

    # -- evaluation --------------------------------------------------------

    def budget(self) -> TradeoffBudget:
        return TradeoffBudget(self.config.epsilon_pixel, self.config.tau_disease)

    def methods(self) -> dict:
        """Named obfuscators to benchmark, per the configured method list."""
        known = make_baselines(target_age_model=self.teacher("conv-reg"), seed=0)
        guard = self.guard(self.config.guard_seeds[0])
        methods = {}
        for name in self.config.methods:
            if name == "guard":
                methods["guard"] = lambda im: guard.obfuscate(im, s=self.config.strength)
            elif name in known:
                methods[name] = known[name]
            else:
                raise ValueError(f"unknown method {name!r}")
        return methods

    def comparison(self) -> list:
        path = self.cache / f"comparison-{self.config.checksum()}.json"

        def build():
            test = self.cohort().subset("test")
            return run_method_comparison(
                self.methods(), test.images, test.ages, test.labels, test.masks,
                self.teachers(), self.heldout(), self.disease(), self.segmenter(),
                budget=self.budget(), config_checksum=self.config.checksum(),
                mae_filter=self.config.mae_filter,
                mae_threshold=self.config.mae_filter_threshold)

        def save(reports, p):
            # insertion order is load-bearing: the CSV column order derives
            # from these dicts, so a cached reload must not re-sort keys
            p.write_text(json.dumps([asdict(r) for r in reports],
                                    indent=2) + "\n")

        return self._run("comparison", path, build, save, load_comparison_json)

    def sweep(self) -> list:
        path = self.cache / f"sweep-{self.config.checksum()}.json"

        def build():
            test = self.cohort().subset("test")
            guard = self.guard(self.config.guard_seeds[0])
            return run_tradeoff_sweep(
                guard, self.config.strengths, test.images, test.ages,
                test.labels, test.masks, self.teachers(), self.heldout(),
                self.disease(), self.segmenter(), self.budget(),
                mae_filter=self.config.mae_filter,
                mae_threshold=self.config.mae_filter_threshold)

        def save(points, p):
            p.write_text(json.dumps([asdict(pt) for pt in points],
                                    indent=2) + "\n")

        def load(p):
            rows = json.loads(p.read_text())
            return [TradeoffPoint(**{**d, "violations": tuple(d["violations"])})
                    for d in rows]

        return self._run("sweep", path, build, save, load)

    def ablation(self) -> list:
        path = self.cache / f"ablation-{self.config.checksum()}.json"

        def build():
            # the four-teacher guards double as the main benchmark guards;
            # the dual pool gets one seed, the claim-bearing pools all three
            entries = []
            for label, pool in DEFAULT_POOLS.items():
                seeds = (self.config.guard_seeds if label != "dual"
                         else self.config.guard_seeds[:1])
                for seed in seeds:
                    entries.append((label, pool, self.guard(seed, pool), seed))
            test = self.cohort().subset("test")
            return run_pool_ablation(entries, test.images, test.ages,
                                     self.teachers(), self.heldout(),
                                     self.cohort().checksum,
                                     config_checksum=self.config.checksum(),
                                     mae_filter=self.config.mae_filter,
                                     mae_threshold=self.config.mae_filter_threshold)

        def save(rows, p):
            p.write_text(json.dumps(rows, indent=2) + "\n")

        return self._run("ablation", path, build, save,
                         lambda p: json.loads(p.read_text()))

    def run_all(self, out_dir=None) -> dict:
        """Materialize every artifact and emit the report bundle."""
        comparison = self.comparison()
        sweep_points = self.sweep()
        ablation = self.ablation()
        meta = {"config_checksum": self.config.checksum(),
                "cohort_checksum": self.cohort().checksum,
                "guard_seeds": list(self.config.guard_seeds),
                "timings_seconds": self.timings()}
        return emit_report(out_dir or self.config.out_dir,
                           comparison=comparison, sweep_points=sweep_points,
                           ablation=ablation, run_meta=meta,
                           budget=self.budget())
