"""Simulated user: picks click polarity and location from the disparity
between a prediction and the ground truth.

Foreground clicks land inside false-negative regions, background clicks
inside false-positive regions. The click-type rule compares error areas:
background only when the false-positive area is strictly larger. Within the
chosen region, locations favour the innermost pixels of the error via
weights exp(distance) - 1 on the region's distance field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .grid import BinaryMask, Grid2D, disparity, distance_transform

Polarity = Literal["foreground", "background"]
FOREGROUND: Polarity = "foreground"
BACKGROUND: Polarity = "background"

# exp() of raw pixel distances overflows on large error regions; distances are
# clamped so the deepest pixels become equi-probable instead.
DEFAULT_EXPONENT_CAP = 60.0


@dataclass(frozen=True)
class Click:
    """One user interaction. ``id`` must be unique within a session/rollout."""

    id: int
    polarity: Polarity
    x: int
    y: int


@dataclass(frozen=True)
class OracleConfig:
    mode: Literal["sample", "argmax"] = "sample"
    rng_seed: int = 4242
    exponent_cap: float = DEFAULT_EXPONENT_CAP

    def __post_init__(self) -> None:
        if self.mode not in ("sample", "argmax"):
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if self.exponent_cap <= 0:
            raise ValueError("exponent_cap must be > 0")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def click_probability_field(dd: Grid2D, cap: float = DEFAULT_EXPONENT_CAP) -> Grid2D:
    """Unnormalized click weights w = exp(min(dd, cap)) - 1.

    Callers normalize by the total when sampling; an all-zero distance field
    yields all-zero weights (no admissible click).
    """
    w = np.expm1(np.minimum(dd.values.astype(np.float64), cap))
    return Grid2D(w, spacing=dd.spacing)


def _pick_location(
    region: BinaryMask, cfg: OracleConfig, rng: np.random.Generator
) -> tuple[int, int]:
    dd = distance_transform(region)
    flat = dd.values.ravel()
    w = region.width
    if cfg.mode == "argmax":
        # first flat index attaining the max = lexicographically smallest
        # (y, x) in row-major order
        idx = int(np.argmax(flat))
    else:
        weights = np.expm1(np.minimum(flat, cfg.exponent_cap))
        total = weights.sum()
        idx = int(rng.choice(flat.size, p=weights / total))
    return idx % w, idx // w


def next_click(
    gt: BinaryMask,
    pred: BinaryMask,
    cfg: OracleConfig,
    rng: np.random.Generator,
    click_id: int = 0,
) -> Optional[Click]:
    """Simulate one corrective click, or None when the prediction is perfect.

    Polarity is background iff the false-positive area strictly exceeds the
    false-negative area (ties go to foreground). The location is drawn inside
    the chosen error region: sampled proportionally to exp(distance)-1 in
    ``sample`` mode, or at the deepest pixel in ``argmax`` mode.
    """
    dp = disparity(gt, pred)
    n_fn, n_fp = dp.d_plus.area, dp.d_minus.area
    if n_fn == 0 and n_fp == 0:
        return None
    if n_fp > n_fn:
        polarity, region = BACKGROUND, dp.d_minus
    else:
        polarity, region = FOREGROUND, dp.d_plus
    x, y = _pick_location(region, cfg, rng)
    return Click(id=click_id, polarity=polarity, x=x, y=y)


def initial_click(
    gt: BinaryMask,
    cfg: OracleConfig,
    rng: np.random.Generator,
    click_id: int = 0,
) -> Click:
    """First click of a session: always foreground, placed as if the current
    prediction were zero everywhere (so the error region is gt itself)."""
    if gt.is_empty():
        raise ValueError("empty ground truth: slice has no foreground, caller must skip")
    click = next_click(gt, BinaryMask.empty(gt.width, gt.height), cfg, rng, click_id)
    assert click is not None and click.polarity == FOREGROUND
    return click
