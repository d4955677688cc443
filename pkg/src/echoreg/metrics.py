"""Evaluation metrics: MSE, Dice, boundary distance, thickness uniformity, EF.

All distances are physical (mm), converted from pixel units via the mask's
spacing. A perceptual metric can be plugged in via register_perceptual; none
is bundled.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .core import LV, MYO, VALID_LABELS, Image2D, LabelMask
from .errors import LabelError, ShapeMismatchError, UndefinedMetricError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

REPORT_COLUMNS = [
    "case_id", "frame_pair", "dsc_bg", "dsc_myo", "dsc_lv", "dsc_mean",
    "hd_bg_mm", "hd_myo_mm", "hd_lv_mm", "hd_mean_mm",
    "tu_var_mm2", "tu_sqrt_mm", "mse", "perceptual", "wall_lines_used",
]


def _pixels(obj):
    return obj.pixels if isinstance(obj, Image2D) else np.asarray(obj)


def _labels(obj):
    return obj.labels if isinstance(obj, LabelMask) else np.asarray(obj)


def mse(fixed, warped) -> float:
    """Mean squared intensity difference."""
    a, b = _pixels(fixed), _pixels(warped)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def dsc(fixed, warped, classes=VALID_LABELS):
    """Hard Dice per class and the unweighted class mean.

    A class empty in both masks counts as 1 (identical); the classes default
    covers background, MYO, and LV so the mean matches the reporting
    convention of averaging all three.
    """
    a, b = _labels(fixed), _labels(warped)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"dsc shapes differ: {a.shape} vs {b.shape}")
    per_class = {}
    for cls in classes:
        if cls not in VALID_LABELS:
            raise LabelError(f"unknown class {cls}")
        ra, rb = a == cls, b == cls
        denom = int(ra.sum()) + int(rb.sum())
        per_class[cls] = 1.0 if denom == 0 else 2.0 * int((ra & rb).sum()) / denom
    return per_class, float(np.mean(list(per_class.values())))


def boundary_pixels(labels: np.ndarray, cls: int) -> np.ndarray:
    """(n, 2) row/col coordinates of the 4-connected boundary of a class region.

    A region pixel lies on the boundary if any 4-neighbor (or the image edge)
    is outside the region.
    """
    region = np.asarray(labels) == cls
    inner = ndimage.binary_erosion(region, structure=_CROSS, border_value=0)
    return np.argwhere(region & ~inner)


def boundary_distance(fixed, warped, cls: int, literal_max: bool = False) -> float:
    """Symmetric mean nearest-boundary distance between class contours, in mm.

    With literal_max=True the directed distances use the farthest opposite
    point instead of the nearest (kept for comparison; not the default).
    """
    a, b = _labels(fixed), _labels(warped)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"boundary_distance shapes differ: {a.shape} vs {b.shape}")
    spacing = fixed.spacing if isinstance(fixed, LabelMask) else (1.0, 1.0)
    pa = boundary_pixels(a, cls)
    pb = boundary_pixels(b, cls)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetricError(f"class {cls} empty in one of the masks")
    scale = np.asarray(spacing, dtype=np.float64)
    d = cdist(pa * scale, pb * scale)
    reduce = np.max if literal_max else np.min
    return float(0.5 * (reduce(d, axis=1).mean() + reduce(d, axis=0).mean()))


@dataclass
class TUReport:
    """Thickness-uniformity measurement over horizontal scan lines."""

    lines_used: int
    samples_mm: np.ndarray = field(repr=False)
    tu: float = 0.0            # variance of wall thickness, mm^2
    lines_skipped: int = 0

    @property
    def tu_sqrt(self) -> float:
        return float(np.sqrt(self.tu))


def thickness_uniformity(mask, n_lines: int = 32) -> TUReport:
    """Variance of myocardial wall thickness along horizontal scan lines.

    n_lines rows are spread evenly over the MYO's vertical extent. A row is
    kept only when the MYO crosses it exactly four times (two wall runs); the
    per-row sample is the mean of the left and right run widths in mm, and the
    reported value is the population variance of those samples.
    """
    labels = _labels(mask)
    sx = mask.spacing[1] if isinstance(mask, LabelMask) else 1.0
    myo = labels == MYO
    rows_with_myo = np.flatnonzero(myo.any(axis=1))
    if len(rows_with_myo) == 0:
        raise UndefinedMetricError("mask has no MYO region")
    lines = np.unique(np.rint(
        np.linspace(rows_with_myo[0], rows_with_myo[-1], n_lines)).astype(int))
    samples, skipped = [], 0
    for row in lines:
        padded = np.concatenate([[0], myo[row].astype(np.int8), [0]])
        starts = np.flatnonzero(np.diff(padded) == 1)
        ends = np.flatnonzero(np.diff(padded) == -1)
        if len(starts) != 2:  # need exactly 4 crossings: two wall runs
            skipped += 1
            continue
        left, right = ends - starts  # run widths in px
        samples.append(0.5 * (left + right) * sx)
    if len(samples) < 2:
        raise UndefinedMetricError(
            f"only {len(samples)} valid scan lines; thickness uniformity undefined")
    d = np.asarray(samples, dtype=np.float64)
    tu = float(np.mean(d ** 2) - np.mean(d) ** 2)
    return TUReport(lines_used=len(d), samples_mm=d, tu=tu, lines_skipped=skipped)


@dataclass
class EFEstimate:
    edv_ml: float
    esv_ml: float
    ef: float
    negative: bool = False


def ef_estimate(edv_true: float, esv_true: float,
                pxl_ed_true: float, pxl_es_true: float,
                pxl_ed_pred: float, pxl_es_pred: float) -> EFEstimate:
    """Scale true volumes by predicted/true LV pixel-count ratios and derive EF.

    A physiologically impossible negative EF is returned as-is with the
    `negative` flag set.
    """
    if min(pxl_ed_true, pxl_es_true, pxl_ed_pred, pxl_es_pred) <= 0:
        raise UndefinedMetricError("LV pixel counts must be positive")
    if min(edv_true, esv_true) <= 0:
        raise UndefinedMetricError("true volumes must be positive")
    edv_pred = edv_true * pxl_ed_pred / pxl_ed_true
    esv_pred = esv_true * pxl_es_pred / pxl_es_true
    ef = 1.0 - esv_pred / edv_pred
    return EFEstimate(float(edv_pred), float(esv_pred), float(ef), negative=ef < 0)


# ---------------------------------------------------------------------------
# per-case aggregation
# ---------------------------------------------------------------------------

_perceptual_metric = None


def register_perceptual(fn):
    """Register a callable(img_a, img_b) -> float scored by evaluate_case."""
    global _perceptual_metric
    _perceptual_metric = fn


def unregister_perceptual():
    global _perceptual_metric
    _perceptual_metric = None


@dataclass
class CaseMetrics:
    dsc_per_class: dict
    dsc_mean: float
    hd_per_class: dict          # class -> mm, or None where undefined
    hd_mean: float | None
    tu: TUReport | None
    mse: float
    perceptual: float | None = None


def evaluate_case(fixed_image, fixed_mask, warped_image, warped_mask,
                  n_lines: int = 32) -> CaseMetrics:
    """All metrics for one fixed/warped pair; partial where classes are missing."""
    dice_per_class, dice_mean = dsc(fixed_mask, warped_mask)
    hd_per_class = {}
    for cls in VALID_LABELS:
        try:
            hd_per_class[cls] = boundary_distance(fixed_mask, warped_mask, cls)
        except UndefinedMetricError:
            hd_per_class[cls] = None
    defined = [v for v in hd_per_class.values() if v is not None]
    hd_mean = float(np.mean(defined)) if defined else None
    try:
        tu = thickness_uniformity(warped_mask, n_lines=n_lines)
    except UndefinedMetricError:
        tu = None
    err = mse(fixed_image, warped_image)
    perceptual = None
    if _perceptual_metric is not None:
        perceptual = float(_perceptual_metric(_pixels(fixed_image), _pixels(warped_image)))
    return CaseMetrics(dice_per_class, dice_mean, hd_per_class, hd_mean, tu, err, perceptual)


def metrics_row(case_id: str, frame_pair: str, cm: CaseMetrics) -> dict:
    """Flatten CaseMetrics into one report row (blank cells where undefined)."""
    def fmt(x):
        return "" if x is None else f"{x:.6g}"

    return {
        "case_id": case_id,
        "frame_pair": frame_pair,
        "dsc_bg": fmt(cm.dsc_per_class.get(0)),
        "dsc_myo": fmt(cm.dsc_per_class.get(MYO)),
        "dsc_lv": fmt(cm.dsc_per_class.get(LV)),
        "dsc_mean": fmt(cm.dsc_mean),
        "hd_bg_mm": fmt(cm.hd_per_class.get(0)),
        "hd_myo_mm": fmt(cm.hd_per_class.get(MYO)),
        "hd_lv_mm": fmt(cm.hd_per_class.get(LV)),
        "hd_mean_mm": fmt(cm.hd_mean),
        "tu_var_mm2": fmt(cm.tu.tu if cm.tu else None),
        "tu_sqrt_mm": fmt(cm.tu.tu_sqrt if cm.tu else None),
        "mse": fmt(cm.mse),
        "perceptual": fmt(cm.perceptual),
        "wall_lines_used": fmt(cm.tu.lines_used if cm.tu else None),
    }


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
