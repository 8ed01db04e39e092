"""Interactive session state machine: owns one image, the live click list,
and the latest prediction; supports add, move (drag), delete, undo, reset.

Convention: an empty click list means an empty mask and no model pass (the
minimum interaction is one foreground click). Every acknowledged event
leaves ``latest_mask`` equal to the thresholded prediction for the current
click list. Arbitrary image sizes are handled by reflect-padding up to the
next multiple the architecture can consume and cropping outputs back.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch

from .data import normalize_intensities
from .grid import BinaryMask, Grid2D, stamp_guidance
from .model import ModelState, forward_batch
from .oracle import BACKGROUND, FOREGROUND, Click, Polarity
from . import rle

PREDICTION_THRESHOLD = 0.5
DEFAULT_HISTORY_BOUND = 64


class EngineError(ValueError):
    pass


class UnknownClickIdError(EngineError):
    pass


class OutOfBoundsError(EngineError):
    pass


class ForegroundRequiredError(EngineError):
    """A click set with background clicks but no foreground click is rejected."""


class EmptyHistoryError(EngineError):
    pass


@dataclass(frozen=True)
class AddClick:
    polarity: Polarity
    x: int
    y: int


@dataclass(frozen=True)
class MoveClick:
    click_id: int
    x: int
    y: int


@dataclass(frozen=True)
class DeleteClick:
    click_id: int


@dataclass(frozen=True)
class Undo:
    pass


@dataclass(frozen=True)
class Reset:
    pass


Event = Union[AddClick, MoveClick, DeleteClick, Undo, Reset]


@dataclass
class Session:
    session_id: str
    raw_image: Grid2D  # original intensities (display copy source)
    image: Grid2D  # normalized, model input
    model: ModelState
    click_sigma: float = 2.0
    history_bound: int = DEFAULT_HISTORY_BOUND
    clicks: list[Click] = field(default_factory=list)
    history: list[list[Click]] = field(default_factory=list)
    latest_mask: BinaryMask = None  # type: ignore[assignment]
    latest_probs: Optional[Grid2D] = None
    last_latency_ms: float = 0.0
    next_click_id: int = 0

    @property
    def width(self) -> int:
        return self.image.width

    @property
    def height(self) -> int:
        return self.image.height


def begin_session(
    image: Grid2D,
    model: ModelState,
    session_id: str = "local",
    click_sigma: float = 2.0,
    history_bound: int = DEFAULT_HISTORY_BOUND,
) -> Session:
    """Start a session: empty click list, empty mask, no prediction run."""
    session = Session(
        session_id=session_id,
        raw_image=image,
        image=normalize_intensities(image),
        model=model,
        click_sigma=click_sigma,
        history_bound=history_bound,
    )
    session.latest_mask = BinaryMask.empty(image.width, image.height)
    return session


def _pad_to_divisor(arr: np.ndarray, divisor: int) -> np.ndarray:
    h, w = arr.shape
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, ph), (0, pw)), mode="reflect")


def _predict(session: Session) -> None:
    t0 = time.perf_counter()
    w, h = session.width, session.height
    if not session.clicks:
        session.latest_mask = BinaryMask.empty(w, h)
        session.latest_probs = None
        session.last_latency_ms = (time.perf_counter() - t0) * 1000.0
        return
    fg = stamp_guidance([c for c in session.clicks if c.polarity == FOREGROUND], w, h, session.click_sigma)
    bg = stamp_guidance([c for c in session.clicks if c.polarity == BACKGROUND], w, h, session.click_sigma)
    divisor = session.model.arch.divisor
    channels = [
        _pad_to_divisor(session.image.values.astype(np.float32), divisor),
        _pad_to_divisor(fg.values, divisor),
        _pad_to_divisor(bg.values, divisor),
    ]
    x = torch.from_numpy(np.stack(channels)).unsqueeze(0).to(session.model.dtype)
    probs = forward_batch(session.model, x, "infer").numpy()[0, 0, :h, :w]
    session.latest_probs = Grid2D(probs.astype(np.float32), spacing=session.image.spacing)
    session.latest_mask = BinaryMask(probs >= PREDICTION_THRESHOLD)
    session.last_latency_ms = (time.perf_counter() - t0) * 1000.0


def _check_bounds(session: Session, x: int, y: int) -> None:
    if not (0 <= x < session.width and 0 <= y < session.height):
        raise OutOfBoundsError(f"click ({x},{y}) outside {session.width}x{session.height} image")


def _find(session: Session, click_id: int) -> int:
    for i, c in enumerate(session.clicks):
        if c.id == click_id:
            return i
    raise UnknownClickIdError(f"unknown click id {click_id}")


def _push_history(session: Session) -> None:
    session.history.append(list(session.clicks))
    if len(session.history) > session.history_bound:
        session.history.pop(0)


def apply_event(session: Session, event: Event) -> BinaryMask:
    """Apply one event, run one prediction, return the new thresholded mask.

    add/move/delete/reset push an undo snapshot; undo restores the previous
    click list exactly. Dragging is a stream of move events; each call here
    reflects one completed prediction (coalescing lives in the caller).
    """
    if isinstance(event, AddClick):
        if event.polarity not in (FOREGROUND, BACKGROUND):
            raise EngineError(f"unknown polarity {event.polarity!r}")
        _check_bounds(session, event.x, event.y)
        if event.polarity == BACKGROUND and not any(
            c.polarity == FOREGROUND for c in session.clicks
        ):
            raise ForegroundRequiredError("background click with no foreground click present")
        _push_history(session)
        session.clicks.append(Click(session.next_click_id, event.polarity, event.x, event.y))
        session.next_click_id += 1
    elif isinstance(event, MoveClick):
        idx = _find(session, event.click_id)
        _check_bounds(session, event.x, event.y)
        _push_history(session)
        old = session.clicks[idx]
        session.clicks[idx] = Click(old.id, old.polarity, event.x, event.y)
    elif isinstance(event, DeleteClick):
        idx = _find(session, event.click_id)
        doomed = session.clicks[idx]
        remaining = [c for c in session.clicks if c.id != event.click_id]
        if doomed.polarity == FOREGROUND and remaining and not any(
            c.polarity == FOREGROUND for c in remaining
        ):
            raise ForegroundRequiredError(
                "deleting the last foreground click would leave background-only clicks"
            )
        _push_history(session)
        session.clicks.pop(idx)
    elif isinstance(event, Undo):
        if not session.history:
            raise EmptyHistoryError("undo on empty history")
        session.clicks = session.history.pop()
    elif isinstance(event, Reset):
        _push_history(session)
        session.clicks = []
    else:
        raise EngineError(f"unknown event {event!r}")
    _predict(session)
    return session.latest_mask


def session_report(session: Session) -> dict:
    """Consistent snapshot: clicks, mask RLE, probability stats, last latency."""
    probs = session.latest_probs
    return {
        "session_id": session.session_id,
        "width": session.width,
        "height": session.height,
        "clicks": [
            {"id": c.id, "polarity": c.polarity, "x": c.x, "y": c.y} for c in session.clicks
        ],
        "mask_rle": rle.encode(session.latest_mask),
        "probs_stats": None
        if probs is None
        else {
            "min": float(probs.values.min()),
            "max": float(probs.values.max()),
            "mean": float(probs.values.mean()),
        },
        "last_latency_ms": session.last_latency_ms,
    }
