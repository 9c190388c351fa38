"""Synthetic short-axis cardiac phantoms for desk-scale runs.

Each patient gets an ED/ES pair on the same grid: an LV disk inside a
myocardial annulus, with a crescent-shaped RV pressed against the wall.
Geometry drifts smoothly across slices and across patients; the ES LV
and RV shrink while the outer wall radius holds, so ejection fraction
is strictly positive by construction. Intensities are per-structure
means plus Gaussian noise under a smooth multiplicative-free bias ramp,
giving a contrast a small network can actually learn.
"""

from __future__ import annotations

from typing import List, Optional, Tuple, Union

import numpy as np

from ..errors import ParameterError
from .volume import LABEL_LV, LABEL_MYO, LABEL_RV, VolumeStudy

_MEANS = {0: 0.20, LABEL_RV: 0.75, LABEL_MYO: 0.45, LABEL_LV: 0.85}
_NOISE_SD = 0.03


def generate_phantom(count: int, extents: Tuple[int, int, int] = (8, 64, 64),
                     spacing: Tuple[float, float, float] = (10.0, 1.5, 1.5),
                     rng: Optional[Union[int, np.random.Generator]] = None) -> List[VolumeStudy]:
    """Build ``count`` patients as ED/ES study pairs (2*count studies)."""
    if count < 0:
        raise ParameterError(f"patient count must be nonnegative, got {count}")
    z, h, w = extents
    if h < 32 or w < 32:
        raise ParameterError(f"in-plane extents must be at least 32x32, got {h}x{w}")
    if z < 1:
        raise ParameterError(f"need at least one slice, got {z}")
    if any(s <= 0 for s in spacing):
        raise ParameterError(f"spacing must be positive, got {spacing}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    side = min(h, w)
    studies: List[VolumeStudy] = []
    for p in range(count):
        cy = h / 2.0 + rng.uniform(-side / 20, side / 20)
        cx = w / 2.0 + rng.uniform(-side / 20, side / 20)
        drift_y = rng.uniform(-0.2, 0.2)
        drift_x = rng.uniform(-0.2, 0.2)
        r_lv = rng.uniform(side / 7.0, side / 5.5)
        wall_lo = max(2.0, side / 22.0)  # floor must stay below the ceiling at 32x32
        wall = rng.uniform(wall_lo, max(wall_lo, side / 16.0))
        r_rv = rng.uniform(side / 9.0, side / 7.0)
        lv_es = rng.uniform(0.60, 0.75)
        rv_es = rng.uniform(0.70, 0.85)
        bias_y = rng.uniform(-0.08, 0.08)
        bias_x = rng.uniform(-0.08, 0.08)
        patient = f"patient{p:04d}"

        for phase, lv_factor, rv_factor in (("ED", 1.0, 1.0), ("ES", lv_es, rv_es)):
            labels = _paint_labels(z, h, w, cy, cx, drift_y, drift_x,
                                   r_lv * lv_factor, r_lv + wall, r_rv * rv_factor)
            image = _paint_image(labels, bias_y, bias_x, rng)
            studies.append(VolumeStudy(image=image, labels=labels,
                                       spacing=tuple(float(s) for s in spacing),
                                       patient_id=patient, phase=phase).validate())
    return studies


def _radius_profile(z_index: int, z_total: int) -> float:
    """Smooth apical taper: 1.0 mid-stack, down to 0.75 at the ends."""
    if z_total == 1:
        return 1.0
    zc = (z_total - 1) / 2.0
    return 1.0 - 0.25 * ((z_index - zc) / max(zc, 1.0)) ** 2


def _paint_labels(z, h, w, cy, cx, drift_y, drift_x, r_lv, r_out, r_rv) -> np.ndarray:
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    labels = np.zeros((z, h, w), dtype=np.uint8)
    zc = (z - 1) / 2.0
    for k in range(z):
        rho = _radius_profile(k, z)
        cyz = cy + drift_y * (k - zc)
        cxz = cx + drift_x * (k - zc)
        lv_r = max(3.0, r_lv * rho)
        out_r = lv_r + max(2.0, (r_out - r_lv) * rho)  # wall never thins below 2 voxels
        rv_r = max(2.5, r_rv * rho)
        d_lv = np.hypot(yy - cyz, xx - cxz)
        rv_cx = cxz - (out_r + 0.45 * rv_r)
        d_rv = np.hypot(yy - cyz, xx - rv_cx)
        sl = labels[k]
        sl[(d_rv <= rv_r) & (d_lv > out_r)] = LABEL_RV
        sl[(d_lv <= out_r) & (d_lv > lv_r)] = LABEL_MYO
        sl[d_lv <= lv_r] = LABEL_LV
    return labels


def _paint_image(labels: np.ndarray, bias_y: float, bias_x: float,
                 rng: np.random.Generator) -> np.ndarray:
    z, h, w = labels.shape
    image = np.full(labels.shape, _MEANS[0], dtype=np.float64)
    for value, mean in _MEANS.items():
        if value:
            image[labels == value] = mean
    ramp = (bias_y * (np.arange(h)[:, None] / max(h - 1, 1))
            + bias_x * (np.arange(w)[None, :] / max(w - 1, 1)))
    image += ramp[None, :, :]
    image += rng.normal(0.0, _NOISE_SD, size=labels.shape)
    return np.clip(image, 0.0, 1.0)
