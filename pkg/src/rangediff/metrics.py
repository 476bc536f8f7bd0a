"""Masked reconstruction errors and simple distribution-match statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, project_box_range, rasterize_mask, unwrap_columns
from .errors import EmptyMask, SizeMismatch, TooFewSamples
from .imageops import view_points_in_box
from .rangeview import RangeView


@dataclass(frozen=True)
class MaskedPair:
    reference: np.ndarray
    candidate: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.float64)
        cand = np.asarray(self.candidate, dtype=np.float64)
        m = np.asarray(self.mask).astype(bool)
        if not (ref.shape == cand.shape == m.shape):
            raise SizeMismatch(f"shapes differ: {ref.shape}, {cand.shape}, {m.shape}")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "candidate", cand)
        object.__setattr__(self, "mask", m)

    def masked_diff(self) -> np.ndarray:
        if not self.mask.any():
            raise EmptyMask("evaluation mask selects no pixels")
        return self.reference[self.mask] - self.candidate[self.mask]


def median_depth_error(p: MaskedPair) -> float:
    """Median absolute depth error over the mask; the lower median for even counts."""
    err = np.sort(np.abs(p.masked_diff()))
    return float(err[(err.size - 1) // 2])


def intensity_mse(p: MaskedPair) -> float:
    """Mean squared intensity error over the mask, intensities on the [0, 255] scale."""
    d = p.masked_diff()
    return float(np.mean(d * d))


def moment_match(a, b, min_samples: int = 100) -> tuple[float, float]:
    """(||mean_a - mean_b||, ||cov_a - cov_b||_F) for two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < min_samples or len(b) < min_samples:
        raise TooFewSamples(f"need >= {min_samples} samples per set, got {len(a)} and {len(b)}")
    mean_gap = float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))
    cov_gap = float(np.linalg.norm(np.cov(a, rowvar=False) - np.cov(b, rowvar=False)))
    return mean_gap, cov_gap


def edit_mask_for_view(box: Box3D, view: RangeView) -> np.ndarray:
    """Hull of the box's projected corners rasterised on the full range-view grid."""
    proj = project_box_range(box, W=view.W)
    H, W = view.shape
    # unwrapped columns may run past W; rasterise on a doubled strip and fold it back
    cols = unwrap_columns(proj.cols, W)
    wide = rasterize_mask(np.column_stack([cols, proj.rows]), (H, 2 * W)).astype(bool)
    return wide[:, :W] | wide[:, W:]


def reconstruction_report(reference: RangeView, candidate: RangeView, box: Box3D) -> dict:
    """Depth median error and intensity MSE on object points and on the edit mask.

    Pixels outside the reference occupancy carry no measurement and are left
    out of both regions.  Entries are NaN when a region is empty.
    """
    regions = {
        "object": view_points_in_box(reference, box),
        "mask": edit_mask_for_view(box, reference) & reference.occupancy,
    }
    report = {}
    for name, m in regions.items():
        report[f"{name}_pixels"] = int(m.sum())
        if m.any():
            report[f"{name}_depth_median"] = median_depth_error(
                MaskedPair(reference.depth, candidate.depth, m))
            report[f"{name}_intensity_mse"] = intensity_mse(
                MaskedPair(reference.intensity, candidate.intensity, m))
        else:
            report[f"{name}_depth_median"] = float("nan")
            report[f"{name}_intensity_mse"] = float("nan")
    return report
