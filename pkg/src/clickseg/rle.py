"""Binary mask run-length codec shared by the session engine and the wire
protocol: alternating run lengths of 0s and 1s over the row-major pixel
stream, always starting with a 0-run (which may be length 0)."""

from __future__ import annotations

import numpy as np

from .grid import BinaryMask


def encode(mask: BinaryMask) -> list[int]:
    flat = mask.bits.ravel()
    n = flat.size
    changes = np.flatnonzero(np.diff(flat))
    bounds = np.concatenate(([0], changes + 1, [n]))
    runs = np.diff(bounds).tolist()
    if flat[0]:  # stream must start with a 0-run
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode(runs: list[int], width: int, height: int) -> BinaryMask:
    total = sum(runs)
    if total != width * height:
        raise ValueError(f"run lengths sum to {total}, expected {width * height}")
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    value = False
    for r in runs:
        if value:
            flat[pos : pos + r] = True
        pos += r
        value = not value
    return BinaryMask(flat.reshape(height, width))
