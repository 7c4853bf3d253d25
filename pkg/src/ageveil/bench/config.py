"""One flat run configuration: cohort, model, guard, and experiment knobs,
serializable to an INI file whose checksum stamps every artifact."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields

from ..guard.training import GuardConfig
from ..synth import SynthParams

# field -> INI section; every config key lives in exactly one section
_SECTIONS = {
    "cohort_seed": "cohort", "n_samples": "cohort", "image_size": "cohort",
    "train_size": "cohort", "val_size": "cohort", "test_size": "cohort",
    "heldout_size": "cohort", "split_seed": "cohort",
    "teacher_epochs": "zoo", "heldout_epochs": "zoo", "disease_epochs": "zoo",
    "segmenter_epochs": "zoo", "rotation_epochs": "zoo",
    "foundation_epochs": "zoo", "recon_epochs": "zoo", "zoo_seed": "zoo",
    "distill_epochs": "distill", "distill_beta": "distill",
    "distill_seed": "distill",
    "lam": "guard", "phi": "guard", "pgd_eps": "guard", "pgd_steps": "guard",
    "pgd_step_size": "guard", "strength": "guard", "guard_epochs": "guard",
    "guard_batch_size": "guard", "guard_lr": "guard",
    "recon_weight": "guard", "pixel_budget": "guard",
    "disease_budget": "guard", "ssim_floor": "guard",
    "budget_weight": "guard", "guard_width": "guard", "mask_width": "guard",
    "augment_p": "guard",
    "methods": "bench", "strengths": "bench", "guard_seeds": "bench",
    "epsilon_pixel": "bench", "tau_disease": "bench",
    "mae_filter": "bench", "mae_filter_threshold": "bench",
    "out_dir": "bench",
}


@dataclass
class RunConfig:
    """Everything one experiment run depends on."""

    cohort_seed: int = 7
    n_samples: int = 3500
    image_size: int = 64
    train_size: int = 2000
    val_size: int = 500
    test_size: int = 500
    heldout_size: int = 500
    split_seed: int = 7

    teacher_epochs: int = 30
    heldout_epochs: int = 25
    disease_epochs: int = 30
    segmenter_epochs: int = 12
    rotation_epochs: int = 15
    foundation_epochs: int = 10
    recon_epochs: int = 10
    zoo_seed: int = 5

    distill_epochs: int = 30
    distill_beta: float = 0.5
    distill_seed: int = 11

    lam: float = 0.4
    phi: float = 0.4
    pgd_eps: float = 8.0 / 255.0
    pgd_steps: int = 10
    pgd_step_size: float = 2.0 / 255.0
    strength: float = 1.0
    guard_epochs: int = 20
    guard_batch_size: int = 32
    guard_lr: float = 1e-3
    recon_weight: float = 100.0
    pixel_budget: float = 0.005
    disease_budget: float = 0.05
    ssim_floor: float = 0.95
    budget_weight: float = 50.0
    guard_width: int = 24
    mask_width: int = 24
    augment_p: float = 0.2

    methods: tuple = ("identity", "blur", "noise", "dp-blur", "adv", "guard")
    strengths: tuple = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)
    guard_seeds: tuple = (3, 4, 5)
    epsilon_pixel: float = 0.005
    tau_disease: float = 0.05
    mae_filter: bool = True
    mae_filter_threshold: float = 3.0
    out_dir: str = "runs/default"

    def __post_init__(self):
        sizes = (self.train_size, self.val_size, self.test_size,
                 self.heldout_size)
        if sum(sizes) != self.n_samples:
            raise ValueError(f"split sizes {sizes} do not sum to "
                             f"n_samples={self.n_samples}")
        if not self.methods:
            raise ValueError("method list must not be empty")
        if not self.guard_seeds:
            raise ValueError("at least one guard seed is required")

    def synth_params(self) -> SynthParams:
        return SynthParams(seed=self.cohort_seed, n_samples=self.n_samples,
                           image_size=self.image_size)

    def split_sizes(self) -> tuple:
        return (self.train_size, self.val_size, self.test_size,
                self.heldout_size)

    def guard_config(self, seed: int) -> GuardConfig:
        return GuardConfig(lam=self.lam, phi=self.phi, pgd_eps=self.pgd_eps,
                           pgd_steps=self.pgd_steps,
                           pgd_step_size=self.pgd_step_size,
                           strength=self.strength, epochs=self.guard_epochs,
                           seed=seed, batch_size=self.guard_batch_size,
                           lr=self.guard_lr, recon_weight=self.recon_weight,
                           pixel_budget=self.pixel_budget,
                           disease_budget=self.disease_budget,
                           ssim_floor=self.ssim_floor,
                           budget_weight=self.budget_weight,
                           width=self.guard_width,
                           mask_width=self.mask_width,
                           augment_p=self.augment_p)

    def _items(self):
        for f in fields(self):
            yield f, getattr(self, f.name)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f, value in self._items():
            section = _SECTIONS[f.name]
            if not parser.has_section(section):
                parser.add_section(section)
            if isinstance(value, tuple):
                text = ",".join(_scalar_str(v) for v in value)
            else:
                text = _scalar_str(value)
            parser.set(section, f.name, text)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        kwargs = {}
        defaults = {f.name: f.default for f in fields(cls)}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ValueError(f"unknown config key: {section}.{key}")
                if _SECTIONS[key] != section:
                    raise ValueError(f"key {key} belongs in "
                                     f"[{_SECTIONS[key]}], not [{section}]")
                kwargs[key] = _parse_value(raw, defaults[key])
        return cls(**kwargs)

    def checksum(self) -> str:
        lines = []
        for f, value in self._items():
            if isinstance(value, tuple):
                text = ",".join(_scalar_str(v) for v in value)
            else:
                text = _scalar_str(value)
            lines.append(f"{_SECTIONS[f.name]}.{f.name}={text}")
        blob = "\n".join(sorted(lines)).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _scalar_str(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, default):
    if isinstance(default, tuple):
        elem = default[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if isinstance(elem, bool):
            return tuple(_parse_bool(p) for p in parts)
        if isinstance(elem, int):
            return tuple(int(p) for p in parts)
        if isinstance(elem, float):
            return tuple(float(p) for p in parts)
        return tuple(parts)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_ini(fh.read())


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(config.to_ini())
