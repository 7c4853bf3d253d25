import numpy as np
import pytest
import torch

from ageveil.bench import Pipeline, RunConfig
from ageveil.common import module_checksum
from ageveil.distill import TeacherPool, train_student
from ageveil.guard import GuardConfig, train_guard
from ageveil.synth import SynthParams, generate_cohort
from ageveil.zoo import (new_backbone, pretrain_foundation_backbone,
                         pretrain_reconstruction, train_age_encoder,
                         train_disease_encoder, train_rotation_classifier,
                         train_vessel_segmenter)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cohort():
    """240-sample cohort shared by unit tests; slices give 160/40/40 splits."""
    params = SynthParams(seed=7, n_samples=240)
    cohort = generate_cohort(params)
    return {
        "params": params,
        "samples": cohort,
        "images": np.stack([s.image for s in cohort]),
        "ages": np.array([s.age_years for s in cohort]),
        "labels": np.array([s.disease_label for s in cohort]),
        "masks": np.stack([s.vessel_mask for s in cohort]),
        "train": slice(0, 160),
        "val": slice(160, 200),
        "test": slice(200, 240),
    }


@pytest.fixture(scope="session")
def tiny_teacher(tiny_cohort):
    """Quickly trained conv classification age model."""
    c = tiny_cohort
    tr, va = c["train"], c["val"]
    return train_age_encoder(c["images"][tr], c["ages"][tr],
                             c["images"][va], c["ages"][va],
                             arch="conv", task="classification", feature_dim=48,
                             seed=101, width=16, epochs=70, batch_size=32,
                             lr=2e-3, patience=15)


@pytest.fixture(scope="session")
def tiny_reg_teacher(tiny_cohort):
    """Quickly trained conv regression age model."""
    c = tiny_cohort
    tr, va = c["train"], c["val"]
    return train_age_encoder(c["images"][tr], c["ages"][tr],
                             c["images"][va], c["ages"][va],
                             arch="conv", task="regression", feature_dim=64,
                             seed=102, width=18, epochs=40, batch_size=32,
                             lr=2e-3, patience=15)


@pytest.fixture(scope="session")
def tiny_disease(tiny_cohort):
    """Disease classifier; the long patience rides out the majority plateau."""
    c = tiny_cohort
    tr, va = c["train"], c["val"]
    return train_disease_encoder(c["images"][tr], c["labels"][tr],
                                 c["images"][va], c["labels"][va],
                                 seed=41, epochs=80, batch_size=32,
                                 lr=5e-3, patience=80)


@pytest.fixture(scope="session")
def tiny_segmenter(tiny_cohort):
    c = tiny_cohort
    tr, va = c["train"], c["val"]
    return train_vessel_segmenter(c["images"][tr], c["masks"][tr],
                                  c["images"][va], c["masks"][va],
                                  seed=31, epochs=40, lr=5e-3, patience=20)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_cohort):
    """Short masked-reconstruction pretraining run."""
    c = tiny_cohort
    return pretrain_foundation_backbone(c["images"][c["train"]],
                                        c["images"][c["val"]],
                                        seed=5, epochs=6)


@pytest.fixture(scope="session")
def tiny_pool(tiny_teacher, tiny_reg_teacher):
    return TeacherPool(["conv-cls", "conv-reg"], [tiny_teacher, tiny_reg_teacher])


@pytest.fixture(scope="session")
def tiny_student(tiny_pool, tiny_backbone, tiny_cohort):
    """Distilled student plus its fusion head and training diagnostics."""
    c = tiny_cohort
    student, fusion, diag = train_student(tiny_pool, tiny_backbone,
                                          c["images"][c["train"]],
                                          c["images"][c["val"]],
                                          epochs=40, beta=0.5, seed=11)
    return student, fusion, diag


@pytest.fixture(scope="session")
def tiny_aux(tiny_cohort):
    """Rotation-prediction network used to seed the adversarial noise."""
    c = tiny_cohort
    return train_rotation_classifier(c["images"][c["train"]],
                                     c["images"][c["val"]],
                                     seed=61, epochs=6, lr=5e-3)


@pytest.fixture(scope="session")
def tiny_guard_backbone(tiny_cohort):
    c = tiny_cohort
    backbone = new_backbone(seed=5)
    pretrain_reconstruction(backbone, c["images"][c["train"]],
                            c["images"][c["val"]], seed=5, epochs=2)
    return backbone


@pytest.fixture(scope="session")
def tiny_guard(tiny_cohort, tiny_student, tiny_disease, tiny_aux,
               tiny_guard_backbone):
    """Short but realistic guard training run, plus pre-training checksums
    of every model that must stay frozen."""
    c = tiny_cohort
    student = tiny_student[0]
    pre = {"student": student.checksum(), "disease": tiny_disease.checksum(),
           "aux": module_checksum(tiny_aux)}
    config = GuardConfig(epochs=6, seed=3, pgd_steps=3, batch_size=32)
    guard, history = train_guard(c["images"][c["train"]],
                                 c["ages"][c["train"]],
                                 c["images"][c["val"]], c["ages"][c["val"]],
                                 config, student, tiny_disease, tiny_aux,
                                 tiny_guard_backbone)
    return guard, history, pre
