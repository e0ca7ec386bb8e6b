"""Overlap and surface-distance metrics plus confidence histograms."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError


@dataclass(frozen=True)
class MetricsReport:
    dice_pct: float
    jaccard_pct: float
    asd_voxels: float
    hd95_voxels: float
    post_processed: bool = False
    distance_defined: bool = True

    def as_row(self, case_id) -> dict:
        return {
            "case_id": case_id,
            "dice": self.dice_pct,
            "jaccard": self.jaccard_pct,
            "asd": self.asd_voxels,
            "hd95": self.hd95_voxels,
            "post_processed": int(self.post_processed),
        }


def _pair(pred, gt):
    pred, gt = np.asarray(pred) > 0, np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def dice_jaccard(pred, gt):
    """Dice and Jaccard in percent; two empty masks score (100, 100)."""
    pred, gt = _pair(pred, gt)
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    total = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt))
    if total == 0:
        return 100.0, 100.0
    return 200.0 * inter / total, 100.0 * inter / union


_SIX = ndimage.generate_binary_structure(3, 1)


def surface(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask or volume."""
    mask = np.asarray(mask) > 0
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def directed_surface_distances(pred, gt, spacing=None):
    """Per-surface-voxel nearest distances pred->gt and gt->pred."""
    sp, sg = surface(pred), surface(gt)
    sampling = None if spacing is None else tuple(float(s) for s in spacing)
    d_pg = ndimage.distance_transform_edt(~sg, sampling=sampling)[sp]
    d_gp = ndimage.distance_transform_edt(~sp, sampling=sampling)[sg]
    return d_pg, d_gp


def surface_distances(pred, gt, spacing=None):
    """``(asd, hd95, defined)``.

    ASD averages the union of both directed distance sets; HD95 is the larger
    of the two directed 95th percentiles (linear interpolation). Returns NaN
    distances with ``defined=False`` when either mask is empty.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return math.nan, math.nan, False
    d_pg, d_gp = directed_surface_distances(pred, gt, spacing)
    asd = float(np.concatenate([d_pg, d_gp]).mean())
    hd95 = float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))
    return asd, hd95, True


def evaluate(pred, gt, post_processed=False, spacing=None) -> MetricsReport:
    dice, jac = dice_jaccard(pred, gt)
    asd, hd95, defined = surface_distances(pred, gt, spacing)
    return MetricsReport(dice, jac, asd, hd95, post_processed, defined)


@dataclass(frozen=True)
class ConfidenceHistogram:
    edges: np.ndarray
    fg_counts: np.ndarray
    bg_counts: np.ndarray

    def rows(self):
        for lo, hi, f, b in zip(self.edges[:-1], self.edges[1:], self.fg_counts, self.bg_counts):
            yield {"bin_lo": float(lo), "bin_hi": float(hi), "fg_count": int(f), "bg_count": int(b)}

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["bin_lo", "bin_hi", "fg_count", "bg_count"])
            w.writeheader()
            w.writerows(self.rows())

    def __add__(self, other):
        if not np.array_equal(self.edges, other.edges):
            raise ShapeError("histograms have different bins")
        return ConfidenceHistogram(self.edges, self.fg_counts + other.fg_counts, self.bg_counts + other.bg_counts)


def confidence_histogram(field, gt, bins: int = 10) -> ConfidenceHistogram:
    """Histogram the foreground probability separately over gt-foreground and
    gt-background voxels. ``field`` is ``(2, H, W, C)`` or a bare foreground
    probability grid."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    field = np.asarray(field)
    p_fg = field[1] if field.ndim == 4 else field
    gt = np.asarray(gt) > 0
    if p_fg.shape != gt.shape:
        raise ShapeError(f"field shape {p_fg.shape} does not match ground truth {gt.shape}")
    edges = np.linspace(0.0, 1.0, bins + 1)
    p = np.clip(p_fg.astype(np.float64), 0.0, 1.0)
    fg, _ = np.histogram(p[gt], bins=edges)
    bg, _ = np.histogram(p[~gt], bins=edges)
    return ConfidenceHistogram(edges, fg.astype(np.int64), bg.astype(np.int64))
