"""Dataset directory layout and slice access.

One folder per patient per phase, named ``<patient_id>_<phase>``, holding
image.nii, an optional label.nii on the same grid, and a small key=value
meta.txt. Loading is sorted so dataset order never depends on filesystem
enumeration.
"""

from __future__ import annotations

import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import DataError, ParameterError
from .nifti import read_nifti, write_nifti
from .volume import PHASES, VolumeStudy

_IMAGE_NAME = "image.nii"
_LABEL_NAME = "label.nii"
_META_NAME = "meta.txt"


def parse_kv_lines(text: str) -> Dict[str, str]:
    """Parse 'key = value' lines; '#' starts a comment, blanks are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_study(study: VolumeStudy, root) -> str:
    study.validate()
    if study.phase is None:
        raise DataError(f"study {study.patient_id} has no phase; cannot place it in the layout")
    folder = os.path.join(str(root), f"{study.patient_id}_{study.phase}")
    os.makedirs(folder, exist_ok=True)
    write_nifti(os.path.join(folder, _IMAGE_NAME),
                study.image.astype(np.float32), study.spacing, dtype=np.float32)
    if study.labels is not None:
        write_nifti(os.path.join(folder, _LABEL_NAME),
                    study.labels.astype(np.uint8), study.spacing, dtype=np.uint8)
    with open(os.path.join(folder, _META_NAME), "w", encoding="utf-8") as fh:
        fh.write(f"patient_id = {study.patient_id}\n")
        fh.write(f"phase = {study.phase}\n")
    return folder


def load_study(folder) -> VolumeStudy:
    image_path = os.path.join(str(folder), _IMAGE_NAME)
    if not os.path.exists(image_path):
        raise DataError(f"{folder}: missing {_IMAGE_NAME}")
    raw = read_nifti(image_path)
    labels = None
    label_path = os.path.join(str(folder), _LABEL_NAME)
    if os.path.exists(label_path):
        labels = read_nifti(label_path).image.astype(np.int64)

    meta_path = os.path.join(str(folder), _META_NAME)
    patient_id = os.path.basename(os.path.normpath(str(folder)))
    phase = None
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = parse_kv_lines(fh.read())
        patient_id = meta.get("patient_id", patient_id)
        phase = meta.get("phase", None)
    elif "_" in patient_id and patient_id.rsplit("_", 1)[1] in PHASES:
        patient_id, phase = patient_id.rsplit("_", 1)

    return VolumeStudy(image=raw.image, labels=labels, spacing=raw.spacing,
                       patient_id=patient_id, phase=phase).validate()


def load_dataset(root) -> List[VolumeStudy]:
    root = str(root)
    if not os.path.isdir(root):
        raise DataError(f"dataset directory {root} does not exist")
    studies = []
    for name in sorted(os.listdir(root)):
        folder = os.path.join(root, name)
        if os.path.isdir(folder) and os.path.exists(os.path.join(folder, _IMAGE_NAME)):
            studies.append(load_study(folder))
    if not studies:
        raise DataError(f"no studies found under {root}")
    studies.sort(key=lambda s: (s.patient_id, s.phase or ""))
    return studies


def save_dataset(studies, root) -> None:
    for study in studies:
        save_study(study, root)


def stack_slices(image: np.ndarray, n: int, z: int,
                 labels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """N consecutive slices centered on z (edges clamped), target at z."""
    if n % 2 == 0 or n < 1:
        raise ParameterError(f"slice count must be odd and positive, got {n}")
    total = image.shape[0]
    if not 0 <= z < total:
        raise ParameterError(f"slice index {z} outside 0..{total - 1}")
    half = (n - 1) // 2
    idx = np.clip(np.arange(z - half, z + half + 1), 0, total - 1)
    stack = image[idx]
    target = labels[z] if labels is not None else None
    return stack, target
