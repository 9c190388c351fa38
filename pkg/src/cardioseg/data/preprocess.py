"""Intensity and geometry preprocessing.

Pipeline order is fixed: CLAHE per slice, percentile normalization with
clipping to [0, 1], resampling to a common voxel spacing, then center
crop or pad to the network grid. Every geometric step is recorded so a
prediction made on the network grid can be mapped back onto the study's
native grid for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import ParameterError, ShapeError
from .volume import VolumeStudy


@dataclass
class PreprocessConfig:
    target_spacing: Optional[Tuple[float, float, float]] = (1.5, 1.5, 10.0)  # (x, y, z) mm; None skips resampling
    percentiles: Tuple[float, float] = (1.0, 99.0)
    size: Tuple[int, int] = (256, 256)          # (H, W) network grid
    z_slices: int = 12                          # 3D training depth
    clahe_bins: int = 256
    clahe_tiles: Tuple[int, int] = (8, 8)
    clahe_clip: float = 0.01                    # normalized per-tile clip limit
    apply_clahe: bool = True

    def validate(self) -> None:
        lo, hi = self.percentiles
        if not (0.0 <= lo < hi <= 100.0):
            raise ParameterError(f"percentiles must be increasing within [0, 100], got {self.percentiles}")
        if self.target_spacing is not None and any(s <= 0 for s in self.target_spacing):
            raise ParameterError(f"target spacing must be positive, got {self.target_spacing}")
        if any(s < 1 for s in self.size) or self.z_slices < 1:
            raise ParameterError("network grid extents must be positive")
        if self.clahe_bins < 2 or any(t < 1 for t in self.clahe_tiles):
            raise ParameterError("CLAHE needs at least 2 bins and 1 tile per axis")
        if not 0.0 < self.clahe_clip <= 1.0:
            raise ParameterError(f"CLAHE clip limit must be in (0, 1], got {self.clahe_clip}")


# ---------------------------------------------------------------------------
# CLAHE

def clahe_slice(slice2d: np.ndarray, bins: int = 256, tiles: Tuple[int, int] = (8, 8),
                clip_limit: float = 0.01) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of one slice.

    The slice is quantized to ``bins`` levels; each tile gets a clipped
    histogram (excess mass spread uniformly over all bins) whose CDF is
    its equalization mapping; pixels blend the four surrounding tile
    mappings bilinearly. The result is rescaled to the slice's original
    min-max range, and a constant slice is returned unchanged.
    """
    slice2d = np.asarray(slice2d, dtype=np.float64)
    if slice2d.ndim != 2:
        raise ShapeError(f"CLAHE operates on single slices, got shape {slice2d.shape}")
    lo, hi = slice2d.min(), slice2d.max()
    if hi == lo:
        return slice2d.copy()

    h, w = slice2d.shape
    ty, tx = min(tiles[0], h), min(tiles[1], w)
    quant = np.clip(np.rint((slice2d - lo) / (hi - lo) * (bins - 1)), 0, bins - 1).astype(np.int64)

    y_edges = np.linspace(0, h, ty + 1).astype(int)
    x_edges = np.linspace(0, w, tx + 1).astype(int)
    maps = np.empty((ty, tx, bins), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = quant[y_edges[i]:y_edges[i + 1], x_edges[j]:x_edges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            limit = clip_limit * tile.size
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / bins
            maps[i, j] = np.cumsum(hist) / tile.size

    mapped = _blend_tile_maps(maps, quant, y_edges, x_edges)
    mlo, mhi = mapped.min(), mapped.max()
    if mhi == mlo:
        return slice2d.copy()
    return lo + (mapped - mlo) / (mhi - mlo) * (hi - lo)


def _blend_tile_maps(maps, quant, y_edges, x_edges) -> np.ndarray:
    ty, tx, _ = maps.shape
    cy = (y_edges[:-1] + y_edges[1:] - 1) / 2.0
    cx = (x_edges[:-1] + x_edges[1:] - 1) / 2.0

    def interp_coords(coords, centers):
        n = centers.size
        if n == 1:
            return np.zeros_like(coords, dtype=int), np.zeros_like(coords, dtype=int), np.zeros(coords.shape)
        hi_idx = np.clip(np.searchsorted(centers, coords, side="right"), 1, n - 1)
        lo_idx = hi_idx - 1
        frac = (coords - centers[lo_idx]) / (centers[hi_idx] - centers[lo_idx])
        return lo_idx, hi_idx, np.clip(frac, 0.0, 1.0)

    h, w = quant.shape
    y0, y1, fy = interp_coords(np.arange(h, dtype=np.float64), cy)
    x0, x1, fx = interp_coords(np.arange(w, dtype=np.float64), cx)
    fy = fy[:, None]
    fx = fx[None, :]
    q = quant
    out = ((1 - fy) * (1 - fx) * maps[y0[:, None], x0[None, :], q]
           + (1 - fy) * fx * maps[y0[:, None], x1[None, :], q]
           + fy * (1 - fx) * maps[y1[:, None], x0[None, :], q]
           + fy * fx * maps[y1[:, None], x1[None, :], q])
    return out


def clahe_volume(volume: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    return np.stack([clahe_slice(sl, cfg.clahe_bins, cfg.clahe_tiles, cfg.clahe_clip)
                     for sl in volume])


# ---------------------------------------------------------------------------
# intensity normalization

def normalize_percentile(volume: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Map the [lo, hi] percentile window to [0, 1] and clip; constant -> zeros."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.size == 0:
        raise ShapeError("cannot normalize an empty volume")
    lo, hi = np.percentile(volume, [lo_pct, hi_pct])
    if hi == lo:
        return np.zeros_like(volume)
    return np.clip((volume - lo) / (hi - lo), 0.0, 1.0)


# ---------------------------------------------------------------------------
# resampling (image linear, labels nearest)

def _axis_coords(old_n: int, new_n: int) -> np.ndarray:
    """Sample positions into an axis of length old_n, corners aligned."""
    if new_n == 1:
        return np.array([0.5 * (old_n - 1)])
    return np.arange(new_n, dtype=np.float64) * ((old_n - 1) / (new_n - 1))


def _resample_axis_linear(vol: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    old_n = vol.shape[axis]
    if new_n == old_n:
        return vol
    coords = _axis_coords(old_n, new_n)
    if old_n == 1:
        return np.take(vol, np.zeros(new_n, dtype=int), axis=axis)
    i0 = np.clip(np.floor(coords).astype(int), 0, old_n - 2)
    frac = coords - i0
    shape = [1] * vol.ndim
    shape[axis] = new_n
    frac = frac.reshape(shape)
    return np.take(vol, i0, axis=axis) * (1.0 - frac) + np.take(vol, i0 + 1, axis=axis) * frac


def _resample_axis_nearest(vol: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    old_n = vol.shape[axis]
    if new_n == old_n:
        return vol
    idx = np.clip(np.rint(_axis_coords(old_n, new_n)).astype(int), 0, old_n - 1)
    return np.take(vol, idx, axis=axis)


def resample_extent(old_n: int, old_spacing: float, new_spacing: float) -> int:
    return max(1, int(np.floor(old_n * old_spacing / new_spacing + 0.5)))


def resample(study: VolumeStudy, target_spacing: Tuple[float, float, float]) -> VolumeStudy:
    """Resample to ``target_spacing`` (sz, sy, sx); trilinear image, nearest labels."""
    if any(s <= 0 for s in target_spacing):
        raise ParameterError(f"target spacing must be positive, got {target_spacing}")
    new_shape = tuple(resample_extent(n, so, sn)
                      for n, so, sn in zip(study.image.shape, study.spacing, target_spacing))
    image = study.image.astype(np.float64)
    labels = study.labels
    for axis, new_n in enumerate(new_shape):
        image = _resample_axis_linear(image, axis, new_n)
        if labels is not None:
            labels = _resample_axis_nearest(labels, axis, new_n)
    return VolumeStudy(image=image, labels=labels, spacing=tuple(float(s) for s in target_spacing),
                       patient_id=study.patient_id, phase=study.phase)


# ---------------------------------------------------------------------------
# crop / pad

def crop_or_pad_axis(vol: np.ndarray, axis: int, target: int, pad_mode: str = "zero"):
    """Center-crop or symmetrically pad one axis.

    Returns the new array plus (src_start, dst_start, copy_len), the
    mapping from the old axis onto the new one, used for inversion.
    """
    n = vol.shape[axis]
    if target == n:
        return vol, (0, 0, n)
    if target < n:
        start = (n - target) // 2
        sl = [slice(None)] * vol.ndim
        sl[axis] = slice(start, start + target)
        return vol[tuple(sl)].copy(), (start, 0, target)
    before = (target - n) // 2
    after = target - n - before
    pad_spec = [(0, 0)] * vol.ndim
    pad_spec[axis] = (before, after)
    if pad_mode == "edge":
        out = np.pad(vol, pad_spec, mode="edge")
    else:
        out = np.pad(vol, pad_spec, mode="constant", constant_values=0)
    return out, (0, before, n)


def crop_or_pad(vol: np.ndarray, target_hw: Tuple[int, int], pad_mode: str = "zero"):
    """In-plane crop/pad of a [..., H, W] array; returns (array, (map_h, map_w))."""
    out, map_h = crop_or_pad_axis(vol, vol.ndim - 2, target_hw[0], pad_mode)
    out, map_w = crop_or_pad_axis(out, vol.ndim - 1, target_hw[1], pad_mode)
    return out, (map_h, map_w)


# ---------------------------------------------------------------------------
# full pipeline with inverse mapping

@dataclass
class PreprocessRecord:
    original_shape: tuple
    original_spacing: tuple
    resampled_shape: tuple
    resampled_spacing: tuple
    axis_maps: tuple  # per axis (z, y, x): (src_start, dst_start, copy_len)


def preprocess_study(study: VolumeStudy, cfg: PreprocessConfig,
                     fix_z: bool = False) -> Tuple[VolumeStudy, PreprocessRecord]:
    """CLAHE -> percentile normalize -> resample -> crop/pad to the grid.

    ``fix_z`` additionally forces the 3D training depth, padding by edge
    replication (image and labels alike).
    """
    cfg.validate()
    study.validate()
    image = study.image.astype(np.float64)
    if cfg.apply_clahe:
        image = clahe_volume(image, cfg)
    image = normalize_percentile(image, *cfg.percentiles)

    working = VolumeStudy(image=image, labels=study.labels, spacing=study.spacing,
                          patient_id=study.patient_id, phase=study.phase)
    if cfg.target_spacing is not None:
        tx, tyy, tz = cfg.target_spacing
        working = resample(working, (float(tz), float(tyy), float(tx)))
    resampled_shape = working.image.shape
    resampled_spacing = working.spacing

    target_z = cfg.z_slices if fix_z else resampled_shape[0]
    image = working.image
    labels = working.labels
    image, map_z = crop_or_pad_axis(image, 0, target_z, pad_mode="edge")
    image, (map_h, map_w) = crop_or_pad(image, cfg.size, pad_mode="zero")
    if labels is not None:
        labels, _ = crop_or_pad_axis(labels, 0, target_z, pad_mode="edge")
        labels, _ = crop_or_pad(labels, cfg.size, pad_mode="zero")

    out = VolumeStudy(image=image, labels=labels, spacing=resampled_spacing,
                      patient_id=study.patient_id, phase=study.phase)
    record = PreprocessRecord(
        original_shape=study.image.shape,
        original_spacing=tuple(float(s) for s in study.spacing),
        resampled_shape=resampled_shape,
        resampled_spacing=tuple(float(s) for s in resampled_spacing),
        axis_maps=(map_z, map_h, map_w),
    )
    return out, record


def restore_labels(pred: np.ndarray, record: PreprocessRecord) -> np.ndarray:
    """Map a network-grid label volume back onto the study's native grid.

    Crop/pad is inverted exactly (regions cropped away come back as
    background); the resampling is inverted by nearest-neighbor lookup.
    """
    if pred.ndim != 3:
        raise ShapeError(f"expected a [Z,H,W] label volume, got shape {pred.shape}")
    onto = np.zeros(record.resampled_shape, dtype=pred.dtype)
    src = []
    dst = []
    for (src_start, dst_start, length) in record.axis_maps:
        src.append(slice(src_start, src_start + length))
        dst.append(slice(dst_start, dst_start + length))
    onto[tuple(src)] = pred[tuple(dst)]
    out = onto
    for axis, orig_n in enumerate(record.original_shape):
        out = _resample_axis_nearest(out, axis, orig_n)
    return out
