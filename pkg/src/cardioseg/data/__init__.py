"""Volume ingestion, preprocessing, augmentation, and phantom generation."""

from .augment import AugmentConfig, apply_transform, augment, sample_seed, sample_transform
from .dataset import (load_dataset, load_study, parse_kv_lines, save_dataset,
                      save_study, stack_slices)
from .nifti import read_nifti, write_nifti
from .phantom import generate_phantom
from .preprocess import (PreprocessConfig, PreprocessRecord, clahe_slice, clahe_volume,
                         crop_or_pad, crop_or_pad_axis, normalize_percentile,
                         preprocess_study, resample, resample_extent, restore_labels)
from .volume import (LABEL_BACKGROUND, LABEL_LV, LABEL_MYO, LABEL_RV, PHASES,
                     STRUCTURE_LABELS, VolumeStudy)

__all__ = [
    "AugmentConfig", "PreprocessConfig", "PreprocessRecord", "VolumeStudy",
    "LABEL_BACKGROUND", "LABEL_RV", "LABEL_MYO", "LABEL_LV", "PHASES", "STRUCTURE_LABELS",
    "apply_transform", "augment", "sample_seed", "sample_transform",
    "clahe_slice", "clahe_volume", "crop_or_pad", "crop_or_pad_axis",
    "normalize_percentile", "preprocess_study", "resample", "resample_extent",
    "restore_labels", "read_nifti", "write_nifti", "generate_phantom",
    "load_dataset", "load_study", "parse_kv_lines", "save_dataset", "save_study",
    "stack_slices",
]
