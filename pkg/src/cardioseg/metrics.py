"""Evaluation battery: overlap, surface distance, and clinical agreement.

Per study and structure this computes hard Dice and the full symmetric
Hausdorff distance in millimeters over boundary voxels; per cohort it
derives ejection fractions and myocardial mass and compares prediction
against truth with Pearson correlation and Bland-Altman statistics.

An empty mask has no boundary, so its Hausdorff distance is reported as
the infinity sentinel and flagged rather than dropped; far-off false
positives are deliberately kept, since they are exactly what the full
Hausdorff is meant to expose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data.volume import STRUCTURE_LABELS, VolumeStudy
from .errors import DegenerateStudyError, PairingError, ShapeError, StatisticsError

MYO_DENSITY_G_PER_ML = 1.05


# ---------------------------------------------------------------------------
# per-structure geometry

def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Hard-label overlap 2|A∩B|/(|A|+|B|); two empty masks agree perfectly."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask extents differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbor outside the mask.

    The array border counts as outside, so a mask touching the edge still
    has a boundary there.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 3:
        raise ShapeError(f"expected a 3D mask, got shape {mask.shape}")
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    exposed = np.zeros_like(mask)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for step in (-1, 1):
            exposed |= ~np.roll(padded, step, axis=axis)[core]
    return mask & exposed


def hausdorff_mm(a: np.ndarray, b: np.ndarray,
                 spacing: Sequence[float]) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in mm.

    Either mask empty yields the infinity sentinel. Distances use voxel
    centers scaled by (sz, sy, sx); the implementation is the direct
    max-over-min of all boundary pairs, blocked for memory but with the
    same float64 arithmetic as an explicit all-pairs loop.
    """
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask extents differ: {a.shape} vs {b.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ShapeError(f"spacing must be three positive extents, got {spacing}")
    if not a.any() or not b.any():
        return float("inf")
    scale = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary_voxels(a)).astype(np.float64) * scale
    pb = np.argwhere(boundary_voxels(b)).astype(np.float64) * scale
    return float(np.sqrt(max(_directed_sq(pa, pb), _directed_sq(pb, pa))))


def _directed_sq(p: np.ndarray, q: np.ndarray, block: int = 2048) -> float:
    worst = 0.0
    for start in range(0, p.shape[0], block):
        chunk = p[start:start + block]
        d2 = ((chunk[:, None, :] - q[None, :, :]) ** 2).sum(axis=-1)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def structure_volume_ml(labels: np.ndarray, structure: int,
                        spacing: Sequence[float]) -> float:
    count = int((np.asarray(labels) == structure).sum())
    sz, sy, sx = (float(s) for s in spacing)
    return count * sz * sy * sx / 1000.0


def ejection_fraction(edv_ml: float, esv_ml: float) -> float:
    if edv_ml <= 0:
        raise DegenerateStudyError(f"end-diastolic volume {edv_ml} mL is not positive")
    return 100.0 * (edv_ml - esv_ml) / edv_ml


def myocardial_mass_g(myo_volume_ml: float, density: float = MYO_DENSITY_G_PER_ML) -> float:
    return myo_volume_ml * density


# ---------------------------------------------------------------------------
# cohort statistics

@dataclass
class ClinicalStats:
    n: int
    cc: Optional[float]  # None when either vector has zero variance
    bias: float
    loa: Tuple[float, float]


def clinical_stats(pred: Sequence[float], truth: Sequence[float]) -> ClinicalStats:
    """Pearson correlation plus Bland-Altman bias and limits of agreement."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"paired vectors required, got {pred.shape} and {truth.shape}")
    if pred.size < 3:
        raise StatisticsError(f"need at least 3 paired values, got {pred.size}")
    if not (np.isfinite(pred).all() and np.isfinite(truth).all()):
        raise StatisticsError("agreement statistics need finite values")
    diff = pred - truth
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    loa = (bias - 1.96 * sd, bias + 1.96 * sd)
    pc = pred - pred.mean()
    tc = truth - truth.mean()
    denom = np.sqrt((pc * pc).sum() * (tc * tc).sum())
    cc = float((pc * tc).sum() / denom) if denom > 0 else None
    return ClinicalStats(n=pred.size, cc=cc, bias=bias, loa=loa)


# ---------------------------------------------------------------------------
# cohort evaluation

@dataclass
class StructureResult:
    study_id: str
    structure: str
    phase: str
    dice: float
    hausdorff_mm: float
    flags: str = ""


@dataclass
class EvaluationReport:
    per_study: List[StructureResult]
    cohort_dice: Dict[Tuple[str, str], float]       # (structure, phase) -> mean
    cohort_hausdorff: Dict[Tuple[str, str], float]  # mean over finite values
    clinical: Dict[str, ClinicalStats]
    flagged: int = 0
    degenerate: List[str] = field(default_factory=list)


def _index_studies(studies: Sequence[VolumeStudy], side: str) -> Dict[Tuple[str, str], VolumeStudy]:
    table: Dict[Tuple[str, str], VolumeStudy] = {}
    for s in studies:
        if s.labels is None:
            raise PairingError(f"{side} study {s.study_id()} carries no label volume")
        key = (s.patient_id, s.phase or "")
        if key in table:
            raise PairingError(f"duplicate {side} study {s.study_id()}")
        table[key] = s
    return table


def evaluate_cohort(predictions: Sequence[VolumeStudy],
                    truths: Sequence[VolumeStudy]) -> EvaluationReport:
    """Pair studies by (patient, phase) and score the whole cohort."""
    pred_map = _index_studies(predictions, "predicted")
    truth_map = _index_studies(truths, "reference")
    missing = sorted(set(truth_map) - set(pred_map))
    extra = sorted(set(pred_map) - set(truth_map))
    if missing or extra:
        raise PairingError(
            f"unmatched studies; missing predictions {missing[:4]}, unmatched predictions {extra[:4]}")

    per_study: List[StructureResult] = []
    flagged = 0
    for key in sorted(truth_map):
        truth = truth_map[key]
        pred = pred_map[key]
        if pred.labels.shape != truth.labels.shape:
            raise ShapeError(f"{truth.study_id()}: prediction grid {pred.labels.shape} "
                             f"vs truth grid {truth.labels.shape}")
        for name, value in STRUCTURE_LABELS.items():
            t_mask = truth.labels == value
            p_mask = pred.labels == value
            d = dice_score(p_mask, t_mask)
            hd = hausdorff_mm(p_mask, t_mask, truth.spacing)
            flags = ""
            if not p_mask.any():
                flags = "empty_prediction"
            elif not t_mask.any():
                flags = "empty_reference"
            if np.isinf(hd):
                flagged += 1
            per_study.append(StructureResult(study_id=truth.study_id(), structure=name,
                                             phase=truth.phase or "", dice=d,
                                             hausdorff_mm=hd, flags=flags))

    cohort_dice: Dict[Tuple[str, str], float] = {}
    cohort_hd: Dict[Tuple[str, str], float] = {}
    for name in STRUCTURE_LABELS:
        for phase in ("ED", "ES"):
            rows = [r for r in per_study if r.structure == name and r.phase == phase]
            if not rows:
                continue
            cohort_dice[(name, phase)] = float(np.mean([r.dice for r in rows]))
            finite = [r.hausdorff_mm for r in rows if np.isfinite(r.hausdorff_mm)]
            cohort_hd[(name, phase)] = float(np.mean(finite)) if finite else float("inf")

    clinical, degenerate = _clinical_agreement(pred_map, truth_map)
    return EvaluationReport(per_study=per_study, cohort_dice=cohort_dice,
                            cohort_hausdorff=cohort_hd, clinical=clinical,
                            flagged=flagged, degenerate=degenerate)


def _clinical_agreement(pred_map, truth_map):
    """EF and mass agreement over patients that have both phases."""
    patients: Dict[str, Dict[str, VolumeStudy]] = {}
    for (pid, phase), study in truth_map.items():
        patients.setdefault(pid, {})[phase] = study

    series: Dict[str, Tuple[List[float], List[float]]] = {
        "LV_EF": ([], []), "RV_EF": ([], []), "MYO_mass": ([], [])}
    degenerate: List[str] = []
    for pid in sorted(patients):
        phases = patients[pid]
        if "ED" not in phases or "ES" not in phases:
            continue
        t_ed, t_es = phases["ED"], phases["ES"]
        p_ed, p_es = pred_map[(pid, "ED")], pred_map[(pid, "ES")]
        try:
            for metric, value in (("LV_EF", STRUCTURE_LABELS["LV"]),
                                  ("RV_EF", STRUCTURE_LABELS["RV"])):
                truth_ef = ejection_fraction(
                    structure_volume_ml(t_ed.labels, value, t_ed.spacing),
                    structure_volume_ml(t_es.labels, value, t_es.spacing))
                pred_ef = ejection_fraction(
                    structure_volume_ml(p_ed.labels, value, p_ed.spacing),
                    structure_volume_ml(p_es.labels, value, p_es.spacing))
                series[metric][0].append(pred_ef)
                series[metric][1].append(truth_ef)
        except DegenerateStudyError:
            degenerate.append(pid)
            continue
        myo = STRUCTURE_LABELS["MYO"]
        series["MYO_mass"][0].append(
            myocardial_mass_g(structure_volume_ml(p_ed.labels, myo, p_ed.spacing)))
        series["MYO_mass"][1].append(
            myocardial_mass_g(structure_volume_ml(t_ed.labels, myo, t_ed.spacing)))

    clinical: Dict[str, ClinicalStats] = {}
    for metric, (pred_vals, truth_vals) in series.items():
        if len(pred_vals) >= 3:
            clinical[metric] = clinical_stats(pred_vals, truth_vals)
    return clinical, degenerate


# ---------------------------------------------------------------------------
# report rendering

def render_report_table(report: EvaluationReport) -> str:
    """Aligned text tables: structure x phase means, then clinical agreement."""
    structures = ("LV", "RV", "MYO")
    phases = ("ED", "ES")
    header = ["metric"] + [f"{s} {p}" for s in structures for p in phases]
    rows = [header]
    for metric, table in (("dice", report.cohort_dice), ("hausdorff_mm", report.cohort_hausdorff)):
        row = [metric]
        for s in structures:
            for p in phases:
                value = table.get((s, p))
                row.append("-" if value is None else f"{value:.4f}")
        rows.append(row)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["Structure metrics (cohort means)"]
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))

    lines.append("")
    lines.append("Clinical agreement (prediction vs reference)")
    lines.append(f"{'metric':10s}  {'n':>3s}  {'cc':>8s}  {'bias':>10s}  {'loa_lo':>10s}  {'loa_hi':>10s}")
    for metric in ("LV_EF", "RV_EF", "MYO_mass"):
        st = report.clinical.get(metric)
        if st is None:
            lines.append(f"{metric:10s}  {'-':>3s}")
            continue
        cc = "undef" if st.cc is None else f"{st.cc:8.4f}"
        lines.append(f"{metric:10s}  {st.n:3d}  {cc:>8s}  {st.bias:10.4f}  "
                     f"{st.loa[0]:10.4f}  {st.loa[1]:10.4f}")
    if report.flagged:
        lines.append("")
        lines.append(f"flagged results (empty mask, Hausdorff = inf): {report.flagged}")
    if report.degenerate:
        lines.append(f"degenerate studies excluded from clinical stats: {', '.join(report.degenerate)}")
    return "\n".join(lines) + "\n"


def render_report_lines(report: EvaluationReport) -> str:
    """Machine-readable rows: per-study results then cohort clinical stats."""
    lines = ["study_id,structure,phase,dice,hausdorff_mm,flags"]
    for r in report.per_study:
        hd = "inf" if np.isinf(r.hausdorff_mm) else f"{r.hausdorff_mm:.6f}"
        lines.append(f"{r.study_id},{r.structure},{r.phase},{r.dice:.6f},{hd},{r.flags}")
    lines.append("metric,cc,bias,loa_lo,loa_hi")
    for metric in ("LV_EF", "RV_EF", "MYO_mass"):
        st = report.clinical.get(metric)
        if st is None:
            continue
        cc = "undef" if st.cc is None else f"{st.cc:.6f}"
        lines.append(f"{metric},{cc},{st.bias:.6f},{st.loa[0]:.6f},{st.loa[1]:.6f}")
    return "\n".join(lines) + "\n"
