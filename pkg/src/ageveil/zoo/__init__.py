from .age import (
    AGE_LO, AGE_HI, BIN_CENTERS, N_BINS, TEACHER_CONFIGS, AgeEncoder,
    age_to_bin, train_age_encoder, train_named_teacher,
)
from .backbone import (GuardBackbone, new_backbone, pretrain_reconstruction,
                       save_backbone, load_backbone)
from .checkpoint import CheckpointError, load_archive, save_archive
from .disease import DiseaseEncoder, train_disease_encoder
from .foundation import FoundationBackbone, pretrain_foundation_backbone
from .rotation import (RotationNet, rotate_batch, train_rotation_classifier,
                       save_rotation, load_rotation)
from .segmenter import (VesselUNet, batch_iou, predict_masks,
                        train_vessel_segmenter, save_segmenter, load_segmenter)

__all__ = [
    "AGE_LO", "AGE_HI", "BIN_CENTERS", "N_BINS", "TEACHER_CONFIGS",
    "AgeEncoder", "age_to_bin", "train_age_encoder", "train_named_teacher",
    "GuardBackbone", "new_backbone", "pretrain_reconstruction",
    "save_backbone", "load_backbone",
    "CheckpointError", "load_archive", "save_archive",
    "DiseaseEncoder", "train_disease_encoder",
    "FoundationBackbone", "pretrain_foundation_backbone",
    "RotationNet", "rotate_batch", "train_rotation_classifier",
    "save_rotation", "load_rotation",
    "VesselUNet", "batch_iou", "predict_masks", "train_vessel_segmenter",
    "save_segmenter", "load_segmenter",
]
