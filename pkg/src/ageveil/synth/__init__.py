from .params import SynthParams, Sample
from .render import generate_sample, render_sample, render_vessel_tree
from .cohort import (
    CohortManifest,
    ManifestRecord,
    CohortIOError,
    SPLIT_NAMES,
    write_cohort,
    load_cohort,
    split_cohort,
    generate_cohort,
)

__all__ = [
    "SynthParams",
    "Sample",
    "generate_sample",
    "render_sample",
    "render_vessel_tree",
    "CohortManifest",
    "ManifestRecord",
    "CohortIOError",
    "SPLIT_NAMES",
    "write_cohort",
    "load_cohort",
    "split_cohort",
    "generate_cohort",
]
