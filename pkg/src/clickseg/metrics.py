"""Slice-wise segmentation quality metrics: Dice, Hausdorff distance, and
mean absolute (surface) distance in physical units, plus box-plot style
aggregation across slices and structures."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import BinaryMask, Spacing


class SurfaceDistanceError(ValueError):
    """Raised for empty masks, where boundary distances are undefined."""


@dataclass(frozen=True)
class SliceMetrics:
    dice: float
    hd: Optional[float]  # mm; None when a mask was empty (slice excluded from hd/mad)
    mad: Optional[float]  # mm
    structure_id: int
    case_id: str = ""
    slice_index: int = -1


def dice_binary(a: BinaryMask, b: BinaryMask) -> float:
    """Binary Dice overlap. Both empty -> 1.0 (perfect agreement on nothing);
    exactly one empty -> 0.0."""
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"dimension mismatch: {a.bits.shape} vs {b.bits.shape}")
    na, nb = a.area, b.area
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a.bits & b.bits).sum())
    return 2.0 * inter / (na + nb)


def boundary_pixels(mask: BinaryMask) -> np.ndarray:
    """Mask pixels 4-adjacent to a background pixel or to the image edge.
    Returns an (N, 2) array of (y, x) coordinates in row-major order."""
    bits = mask.bits
    h, w = bits.shape
    interior = np.zeros_like(bits)
    if h > 2 and w > 2:
        interior[1:-1, 1:-1] = (
            bits[1:-1, 1:-1]
            & bits[:-2, 1:-1]
            & bits[2:, 1:-1]
            & bits[1:-1, :-2]
            & bits[1:-1, 2:]
        )
    edge = bits & ~interior
    return np.argwhere(edge)


def surface_distances(a: BinaryMask, b: BinaryMask, spacing: Spacing = (1.0, 1.0)) -> tuple[float, float]:
    """Hausdorff and mean absolute boundary distance between two masks, in mm.

    Boundaries are mask pixels 4-adjacent to background (the image edge counts
    as background). hd is the max over both directed max distances; mad pools
    both directed distance sets and averages.
    """
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"dimension mismatch: {a.bits.shape} vs {b.bits.shape}")
    if a.is_empty() or b.is_empty():
        raise SurfaceDistanceError("undefined surface distance: empty mask")
    pa = boundary_pixels(a).astype(np.float64)
    pb = boundary_pixels(b).astype(np.float64)
    sx, sy = spacing
    pa *= (sy, sx)  # rows scale by y-spacing, cols by x-spacing
    pb *= (sy, sx)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    d_ab = np.sqrt(d2.min(axis=1))  # each boundary pixel of a -> nearest of b
    d_ba = np.sqrt(d2.min(axis=0))
    hd = float(max(d_ab.max(), d_ba.max()))
    mad = float(np.concatenate([d_ab, d_ba]).mean())
    return hd, mad


def _stats(values: np.ndarray) -> dict:
    p25, p75 = np.percentile(values, [25, 75])
    iqr = p75 - p25
    lo, hi = p25 - 1.5 * iqr, p75 + 1.5 * iqr
    outliers = values[(values < lo) | (values > hi)]
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "p25": float(p25),
        "p75": float(p75),
        "min": float(values.min()),
        "max": float(values.max()),
        "n": int(values.size),
        "outliers": [float(v) for v in outliers],
    }


def aggregate(slices: Sequence[SliceMetrics]) -> dict:
    """Per-structure and overall summary stats (mean/median/quartiles/extremes
    plus >1.5 IQR outliers) for dice, hd, and mad."""
    if not slices:
        raise ValueError("cannot aggregate an empty metrics list")
    result: dict = {"per_structure": {}, "overall": {}}
    by_structure: dict[int, list[SliceMetrics]] = {}
    for m in slices:
        by_structure.setdefault(m.structure_id, []).append(m)

    def summarize(group: Sequence[SliceMetrics]) -> dict:
        out = {"dice": _stats(np.array([m.dice for m in group], dtype=np.float64))}
        surf = [(m.hd, m.mad) for m in group if m.hd is not None]
        out["n_slices"] = len(group)
        out["n_surface_excluded"] = len(group) - len(surf)
        if surf:
            out["hd_mm"] = _stats(np.array([h for h, _ in surf], dtype=np.float64))
            out["mad_mm"] = _stats(np.array([m for _, m in surf], dtype=np.float64))
        return out

    for sid, group in sorted(by_structure.items()):
        result["per_structure"][str(sid)] = summarize(group)
    result["overall"] = summarize(list(slices))
    return result
