"""On-the-fly rotation and scaling, applied in-plane only.

One transform is drawn per sample and shared by every slice of that
sample, so stacked input channels and their target stay aligned. Images
resample bilinearly, labels by nearest neighbor; anything mapped from
outside the canvas becomes 0 (background).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import ParameterError, ShapeError


@dataclass
class AugmentConfig:
    rotation_degrees: Tuple[float, float] = (-15.0, 15.0)
    scale_range: Tuple[float, float] = (0.9, 1.1)
    probability: float = 0.5  # chance a sample is transformed at all

    def validate(self) -> None:
        if self.rotation_degrees[0] > self.rotation_degrees[1]:
            raise ParameterError(f"rotation range reversed: {self.rotation_degrees}")
        if not 0.0 < self.scale_range[0] <= self.scale_range[1]:
            raise ParameterError(f"scale range must be positive and ordered: {self.scale_range}")
        if not 0.0 <= self.probability <= 1.0:
            raise ParameterError(f"probability must be in [0, 1], got {self.probability}")


def sample_seed(global_seed: int, patient_id: str, phase: str, epoch: int, index: int) -> int:
    """Stable per-sample seed; hashlib keeps it identical across processes."""
    key = f"{global_seed}|{patient_id}|{phase}|{epoch}|{index}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator) -> Optional[Tuple[float, float]]:
    """Draw (angle_degrees, scale) or None when the sample stays untouched."""
    if rng.random() >= cfg.probability:
        return None
    angle = rng.uniform(*cfg.rotation_degrees)
    scale = rng.uniform(*cfg.scale_range)
    return angle, scale


def _source_coords(h: int, w: int, angle_deg: float, scale: float):
    """For each output pixel, the input location it samples (inverse map)."""
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    src_y = (cos_t * dy + sin_t * dx) / scale + cy
    src_x = (-sin_t * dy + cos_t * dx) / scale + cx
    return src_y, src_x


def _bilinear(img: np.ndarray, src_y, src_x) -> np.ndarray:
    h, w = img.shape
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy = src_y - y0
    fx = src_x - x0

    def corner(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside, vals, 0.0)

    return ((1 - fy) * (1 - fx) * corner(y0, x0)
            + (1 - fy) * fx * corner(y0, x0 + 1)
            + fy * (1 - fx) * corner(y0 + 1, x0)
            + fy * fx * corner(y0 + 1, x0 + 1))


def _nearest(lab: np.ndarray, src_y, src_x) -> np.ndarray:
    h, w = lab.shape
    yi = np.rint(src_y).astype(int)
    xi = np.rint(src_x).astype(int)
    inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    vals = lab[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(inside, vals, 0).astype(lab.dtype)


def apply_transform(image: np.ndarray, labels: Optional[np.ndarray],
                    angle_deg: float, scale: float):
    """Rotate by ``angle_deg`` (90 maps like np.rot90) and zoom by ``scale``.

    Works on [..., H, W] stacks; all leading slices share the transform.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2:
        raise ShapeError(f"expected [..., H, W], got shape {image.shape}")
    h, w = image.shape[-2:]
    if labels is not None and labels.shape[-2:] != (h, w):
        raise ShapeError(f"label extents {labels.shape} do not match image {image.shape}")
    src_y, src_x = _source_coords(h, w, angle_deg, scale)

    flat = image.reshape(-1, h, w)
    out = np.stack([_bilinear(sl, src_y, src_x) for sl in flat]).reshape(image.shape)
    new_labels = None
    if labels is not None:
        lflat = labels.reshape(-1, h, w)
        new_labels = np.stack([_nearest(sl, src_y, src_x) for sl in lflat]).reshape(labels.shape)
    return out, new_labels


def augment(image: np.ndarray, labels: Optional[np.ndarray],
            cfg: AugmentConfig, rng: np.random.Generator):
    """Randomly transform one sample per the config; identity when skipped."""
    cfg.validate()
    drawn = sample_transform(cfg, rng)
    if drawn is None:
        return image, labels
    return apply_transform(image, labels, *drawn)
