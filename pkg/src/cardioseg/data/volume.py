"""In-memory representation of one cardiac study (one patient, one phase)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import LabelError, ShapeError

LABEL_BACKGROUND = 0
LABEL_RV = 1
LABEL_MYO = 2
LABEL_LV = 3
STRUCTURE_LABELS = {"RV": LABEL_RV, "MYO": LABEL_MYO, "LV": LABEL_LV}
PHASES = ("ED", "ES")


@dataclass
class VolumeStudy:
    """One short-axis volume: image [Z,H,W], optional labels, mm spacing.

    Spacing is (sz, sy, sx), matching the array axis order.
    """

    image: np.ndarray
    labels: Optional[np.ndarray]
    spacing: Tuple[float, float, float]
    patient_id: str
    phase: Optional[str] = None

    def validate(self) -> "VolumeStudy":
        if self.image.ndim != 3:
            raise ShapeError(f"study image must be [Z,H,W], got shape {self.image.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ShapeError(f"spacing must be three positive extents, got {self.spacing}")
        if self.labels is not None:
            if self.labels.shape != self.image.shape:
                raise ShapeError(
                    f"label extents {self.labels.shape} differ from image {self.image.shape}")
            values = np.unique(self.labels)
            if values.size and (values.min() < 0 or values.max() > LABEL_LV):
                raise LabelError(f"labels outside 0..{LABEL_LV}: {values}")
        if self.phase is not None and self.phase not in PHASES:
            raise LabelError(f"phase must be one of {PHASES}, got {self.phase!r}")
        return self

    @property
    def shape(self) -> tuple:
        return self.image.shape

    def study_id(self) -> str:
        return f"{self.patient_id}_{self.phase}" if self.phase else self.patient_id
