"""Dense 2D field primitives.

Coordinate convention used across the package: ``x`` indexes columns,
``y`` indexes rows, arrays are laid out row-major with shape ``(height,
width)``, so pixel ``(x, y)`` is ``array[y, x]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Spacing = tuple[float, float]


@dataclass(frozen=True)
class Grid2D:
    """A dense scalar field with physical pixel spacing (mm per step in x, y)."""

    values: np.ndarray
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"Grid2D needs a 2D array with positive dims, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("Grid2D values must be finite")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def at(self, x: int, y: int) -> float:
        return float(self.values[y, x])


@dataclass(frozen=True)
class BinaryMask:
    """One bit per pixel, row-major."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        b = np.asarray(self.bits)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise ValueError(f"BinaryMask needs a 2D array with positive dims, got shape {b.shape}")
        if b.dtype != np.bool_:
            uniq = np.unique(b)
            if not np.all(np.isin(uniq, (0, 1))):
                raise ValueError("BinaryMask values must be 0/1")
            b = b.astype(bool)
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not bool(self.bits.any())

    @staticmethod
    def empty(width: int, height: int) -> "BinaryMask":
        return BinaryMask(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class DisparityPair:
    """False negatives (d_plus) and false positives (d_minus) of a prediction."""

    d_plus: BinaryMask
    d_minus: BinaryMask

    def __post_init__(self) -> None:
        if self.d_plus.bits.shape != self.d_minus.bits.shape:
            raise ValueError("d_plus/d_minus dims differ")
        if bool((self.d_plus.bits & self.d_minus.bits).any()):
            raise ValueError("a pixel cannot be both a false negative and a false positive")


def disparity(gt: BinaryMask, pred: BinaryMask) -> DisparityPair:
    """Split gt-vs-pred disagreement into false negatives and false positives."""
    if gt.bits.shape != pred.bits.shape:
        raise ValueError(f"dimension mismatch: gt {gt.bits.shape} vs pred {pred.bits.shape}")
    return DisparityPair(
        d_plus=BinaryMask(gt.bits & ~pred.bits),
        d_minus=BinaryMask(pred.bits & ~gt.bits),
    )


def distance_transform_sq(bits: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance, in pixel units, from each marked pixel
    to the nearest unmarked pixel. Everything outside the image counts as
    unmarked, so a full-foreground mask still yields finite values.

    Two-pass separable algorithm: per-row 1D nearest-zero distances, then a
    per-column min over row distances plus squared vertical offsets. Exact in
    integer arithmetic.
    """
    bits = np.asarray(bits, dtype=bool)
    h, w = bits.shape
    if not bits.any():
        return np.zeros((h, w), dtype=np.int64)

    cols = np.arange(w, dtype=np.int64)
    zero = ~bits
    # nearest zero to the left (inclusive), virtual border zero at x = -1
    left = np.where(zero, cols[None, :], np.int64(-1))
    np.maximum.accumulate(left, axis=1, out=left)
    d_left = cols[None, :] - left
    # nearest zero to the right (inclusive), virtual border zero at x = w
    right = np.where(zero, cols[None, :], np.int64(w))
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]
    d_right = right - cols[None, :]
    g2 = np.minimum(d_left, d_right) ** 2  # (h, w) squared row distances

    rows = np.arange(h, dtype=np.int64)
    offs2 = (rows[:, None] - rows[None, :]) ** 2  # (h, h)
    border2 = np.minimum(rows + 1, h - rows) ** 2  # virtual zeros at y = -1 and y = h

    out = np.empty((h, w), dtype=np.int64)
    # chunk columns so the (h, h, chunk) broadcast stays small
    chunk = max(1, int(4_000_000 // max(1, h * h)))
    for x0 in range(0, w, chunk):
        block = g2[None, :, x0 : x0 + chunk] + offs2[:, :, None]
        out[:, x0 : x0 + chunk] = block.min(axis=1)
    out = np.minimum(out, border2[:, None])
    out[zero] = 0
    return out


def distance_transform(
    mask: BinaryMask,
    spacing: Spacing = (1.0, 1.0),
    physical_units: bool = False,
) -> Grid2D:
    """Euclidean distance field of a mask: distance from each marked pixel to
    the nearest unmarked pixel (0 on unmarked pixels).

    Distances are in pixel units unless ``physical_units`` is set, in which
    case the per-axis spacing scales the metric (anisotropic).
    """
    if not physical_units or spacing[0] == spacing[1]:
        d = np.sqrt(distance_transform_sq(mask.bits).astype(np.float64))
        if physical_units:
            d *= spacing[0]
        return Grid2D(d, spacing=spacing)
    return Grid2D(_distance_transform_aniso(mask.bits, spacing), spacing=spacing)


def _distance_transform_aniso(bits: np.ndarray, spacing: Spacing) -> np.ndarray:
    # same two-pass scheme, squared terms scaled per axis (float path)
    bits = np.asarray(bits, dtype=bool)
    h, w = bits.shape
    sx2, sy2 = spacing[0] ** 2, spacing[1] ** 2
    if not bits.any():
        return np.zeros((h, w), dtype=np.float64)
    cols = np.arange(w, dtype=np.int64)
    zero = ~bits
    left = np.where(zero, cols[None, :], np.int64(-1))
    np.maximum.accumulate(left, axis=1, out=left)
    right = np.where(zero, cols[None, :], np.int64(w))
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]
    g2 = (np.minimum(cols[None, :] - left, right - cols[None, :]) ** 2) * sx2

    rows = np.arange(h, dtype=np.int64)
    offs2 = ((rows[:, None] - rows[None, :]) ** 2) * sy2
    border2 = (np.minimum(rows + 1, h - rows) ** 2) * sy2
    out = np.empty((h, w), dtype=np.float64)
    chunk = max(1, int(4_000_000 // max(1, h * h)))
    for x0 in range(0, w, chunk):
        block = g2[None, :, x0 : x0 + chunk] + offs2[:, :, None]
        out[:, x0 : x0 + chunk] = block.min(axis=1)
    out = np.minimum(out, border2[:, None])
    out[zero] = 0.0
    return np.sqrt(out)


# Gaussian stamps are cut off at radius 4*sigma; the largest dropped
# contribution is exp(-8) ~= 3.4e-4.
STAMP_TRUNCATION_SIGMAS = 4.0


def stamp_guidance(clicks, width: int, height: int, sigma: float) -> Grid2D:
    """Render clicks of one polarity as a [0, 1] guidance map.

    Each click contributes a unit-peak Gaussian exp(-((x-cx)^2+(y-cy)^2)/(2 sigma^2));
    overlapping clicks combine by per-pixel maximum, so the field stays in
    [0, 1] with value exactly 1 at every click pixel.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    out = np.zeros((height, width), dtype=np.float32)
    radius = int(math.ceil(STAMP_TRUNCATION_SIGMAS * sigma))
    trunc_sq = (STAMP_TRUNCATION_SIGMAS * sigma) ** 2
    for c in clicks:
        cx, cy = (c.x, c.y) if hasattr(c, "x") else (int(c[0]), int(c[1]))
        if not (0 <= cx < width and 0 <= cy < height):
            raise ValueError(f"click ({cx},{cy}) outside {width}x{height} image")
        x0, x1 = max(0, cx - radius), min(width, cx + radius + 1)
        y0, y1 = max(0, cy - radius), min(height, cy + radius + 1)
        dx = np.arange(x0, x1, dtype=np.float64) - cx
        dy = np.arange(y0, y1, dtype=np.float64) - cy
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > trunc_sq] = 0.0
        np.maximum(out[y0:y1, x0:x1], g.astype(np.float32), out=out[y0:y1, x0:x1])
    return Grid2D(out)
