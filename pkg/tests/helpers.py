"""Independent oracles shared by the unit and acceptance suites: brute-force
distance transforms, all-pairs surface distances, and the finite-difference
gradient checker."""

import math

import numpy as np
import torch

from clickseg.model import dice_loss, forward_batch


def brute_force_edt_sq(bits: np.ndarray) -> np.ndarray:
    """All-pairs nearest-zero search; zeros include a 1-pixel ring outside the
    image (any farther outside pixel is dominated by the ring)."""
    h, w = bits.shape
    ys, xs = np.mgrid[-1 : h + 1, -1 : w + 1]
    inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    padded = np.pad(bits, 1, constant_values=False)
    is_zero = ~inside | ~padded[(ys + 1).clip(0, h + 1), (xs + 1).clip(0, w + 1)]
    zy, zx = ys[is_zero], xs[is_zero]
    out = np.zeros((h, w), dtype=np.int64)
    my, mx = np.nonzero(bits)
    if my.size:
        d2 = (my[:, None] - zy[None, :]) ** 2 + (mx[:, None] - zx[None, :]) ** 2
        out[my, mx] = d2.min(axis=1)
    return out


def brute_force_surface(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0)):
    """Pure-python all-pairs boundary computation (4-connectivity, image edge
    counts as background)."""

    def boundary(bits):
        h, w = bits.shape
        out = []
        for y in range(h):
            for x in range(w):
                if not bits[y, x]:
                    continue
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ny, nx = y + dy, x + dx
                    if not (0 <= ny < h and 0 <= nx < w) or not bits[ny, nx]:
                        out.append((y, x))
                        break
        return out

    sx, sy = spacing
    pa, pb = boundary(a), boundary(b)
    d_ab = [min(math.hypot((y1 - y2) * sy, (x1 - x2) * sx) for y2, x2 in pb) for y1, x1 in pa]
    d_ba = [min(math.hypot((y1 - y2) * sy, (x1 - x2) * sx) for y1, x1 in pa) for y2, x2 in pb]
    hd = max(max(d_ab), max(d_ba))
    mad = sum(d_ab + d_ba) / (len(d_ab) + len(d_ba))
    return hd, mad


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / denom


def finite_difference_check(state, x, g, steps=(1e-3, 1e-4, 1e-5, 3e-6, 1e-6), param_stride=1):
    """Central finite differences of the dice loss w.r.t. model parameters.

    The primary step is 1e-3. The loss of a ReLU/max-pool net is piecewise
    smooth; when the stencil straddles a kink the difference quotient is off
    even though the gradient is right, so a coordinate passes as soon as some
    refinement step agrees. A genuinely wrong analytic gradient disagrees at
    every step. Returns (per-coordinate relative errors, count checked).
    """

    def loss_value() -> float:
        with torch.no_grad():
            preds = state.net.train()(x)
            return float(dice_loss(preds, g))

    preds = forward_batch(state, x, "train")
    loss = dice_loss(preds, g)
    state.net.zero_grad()
    loss.backward()

    errors = []
    for p in state.net.parameters():
        grad = p.grad.detach().numpy().ravel()
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), param_stride):
            orig = float(flat[i])
            best = np.inf
            for h in steps:
                flat[i] = orig + h
                up = loss_value()
                flat[i] = orig - h
                down = loss_value()
                flat[i] = orig
                best = min(best, relative_error(grad[i], (up - down) / (2 * h)))
                if best < 1e-3:
                    break
            errors.append(best)
    return np.array(errors), len(errors)
