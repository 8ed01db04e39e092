import numpy as np
import pytest
import torch

from clickseg import rle
from clickseg.engine import (
    AddClick,
    DeleteClick,
    EmptyHistoryError,
    ForegroundRequiredError,
    MoveClick,
    OutOfBoundsError,
    Reset,
    Undo,
    UnknownClickIdError,
    apply_event,
    begin_session,
    session_report,
)
from clickseg.grid import Grid2D
from clickseg.model import ArchConfig, make_state

TINY = ArchConfig(base_width=4, depth=2)


@pytest.fixture(scope="module")
def model_state():
    return make_state(TINY, seed=3)


def make_image(size=(48, 48), seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=size).astype(np.float32)
    vals[10:30, 12:34] += 2.0
    return Grid2D(vals)


class TestBeginSession:
    def test_fresh_session_is_empty(self, model_state):
        s = begin_session(make_image(), model_state)
        assert s.clicks == []
        assert s.latest_mask.is_empty()
        assert s.latest_probs is None

    def test_sessions_are_independent(self, model_state):
        img = make_image()
        s1 = begin_session(img, model_state, "a")
        s2 = begin_session(img, model_state, "b")
        apply_event(s1, AddClick("foreground", 20, 20))
        assert s2.clicks == [] and s2.latest_mask.is_empty()

    def test_non_divisible_image_padded_and_cropped(self, model_state):
        img = make_image((50, 45), seed=4)
        s = begin_session(img, model_state)
        mask = apply_event(s, AddClick("foreground", 22, 25))
        assert mask.bits.shape == (50, 45)
        assert s.latest_probs.values.shape == (50, 45)


class TestApplyEvent:
    def test_add_then_undo_restores_empty(self, model_state):
        s = begin_session(make_image(), model_state)
        m1 = apply_event(s, AddClick("foreground", 20, 20))
        assert m1.bits.shape == (48, 48)
        m2 = apply_event(s, Undo())
        assert m2.is_empty() and s.clicks == []

    def test_undo_is_exact_inverse_of_last_event(self, model_state):
        s = begin_session(make_image(), model_state)
        apply_event(s, AddClick("foreground", 20, 20))
        mask_before = s.latest_mask
        clicks_before = [c for c in s.clicks]
        apply_event(s, AddClick("background", 40, 40))
        apply_event(s, Undo())
        assert [c for c in s.clicks] == clicks_before
        assert np.array_equal(s.latest_mask.bits, mask_before.bits)

    def test_move_equals_delete_plus_add(self, model_state):
        img = make_image(seed=2)
        s1 = begin_session(img, model_state, "m")
        apply_event(s1, AddClick("foreground", 15, 18))
        apply_event(s1, AddClick("background", 40, 44))
        moved = apply_event(s1, MoveClick(1, 36, 8))

        s2 = begin_session(img, model_state, "d")
        apply_event(s2, AddClick("foreground", 15, 18))
        apply_event(s2, AddClick("background", 40, 44))
        apply_event(s2, DeleteClick(1))
        recreated = apply_event(s2, AddClick("background", 36, 8))
        assert np.array_equal(moved.bits, recreated.bits)

    def test_move_preserves_identity_and_polarity(self, model_state):
        s = begin_session(make_image(), model_state)
        apply_event(s, AddClick("foreground", 10, 10))
        apply_event(s, MoveClick(0, 30, 31))
        assert len(s.clicks) == 1
        c = s.clicks[0]
        assert (c.id, c.polarity, c.x, c.y) == (0, "foreground", 30, 31)

    def test_reset_clears_and_is_undoable(self, model_state):
        s = begin_session(make_image(), model_state)
        apply_event(s, AddClick("foreground", 20, 20))
        m = apply_event(s, Reset())
        assert m.is_empty() and s.clicks == []
        apply_event(s, Undo())
        assert len(s.clicks) == 1

    def test_background_first_rejected(self, model_state):
        s = begin_session(make_image(), model_state)
        with pytest.raises(ForegroundRequiredError):
            apply_event(s, AddClick("background", 5, 5))

    def test_deleting_last_foreground_with_background_rejected(self, model_state):
        s = begin_session(make_image(), model_state)
        apply_event(s, AddClick("foreground", 20, 20))
        apply_event(s, AddClick("background", 40, 40))
        with pytest.raises(ForegroundRequiredError):
            apply_event(s, DeleteClick(0))

    def test_unknown_id_rejected(self, model_state):
        s = begin_session(make_image(), model_state)
        apply_event(s, AddClick("foreground", 20, 20))
        with pytest.raises(UnknownClickIdError):
            apply_event(s, MoveClick(99, 5, 5))
        with pytest.raises(UnknownClickIdError):
            apply_event(s, DeleteClick(99))

    def test_out_of_bounds_rejected(self, model_state):
        s = begin_session(make_image(), model_state)
        with pytest.raises(OutOfBoundsError):
            apply_event(s, AddClick("foreground", 48, 0))

    def test_undo_on_empty_history_rejected(self, model_state):
        s = begin_session(make_image(), model_state)
        with pytest.raises(EmptyHistoryError):
            apply_event(s, Undo())

    def test_history_bound_drops_oldest(self, model_state):
        s = begin_session(make_image(), model_state, history_bound=3)
        apply_event(s, AddClick("foreground", 20, 20))
        for i in range(5):
            apply_event(s, MoveClick(0, 20 + i, 20))
        assert len(s.history) == 3

    def test_mask_never_stale(self, model_state):
        # the returned mask always equals a fresh prediction for the click list
        img = make_image(seed=5)
        s = begin_session(img, model_state)
        apply_event(s, AddClick("foreground", 20, 20))
        apply_event(s, AddClick("foreground", 25, 22))
        mask = apply_event(s, MoveClick(1, 26, 23))
        fresh = begin_session(img, model_state, "fresh")
        apply_event(fresh, AddClick("foreground", 20, 20))
        m2 = apply_event(fresh, AddClick("foreground", 26, 23))
        assert np.array_equal(mask.bits, m2.bits)


class TestReplayDeterminism:
    def test_event_log_replay_reproduces_mask(self, model_state):
        events = [
            AddClick("foreground", 20, 20),
            AddClick("background", 40, 40),
            MoveClick(0, 22, 21),
            AddClick("foreground", 18, 24),
            DeleteClick(1),
            Undo(),
        ]
        img = make_image(seed=6)

        def run():
            s = begin_session(img, model_state)
            last = None
            for e in events:
                last = apply_event(s, e)
            return last

        a, b = run(), run()
        assert np.array_equal(a.bits, b.bits)


class TestSessionReport:
    def test_fresh_report(self, model_state):
        s = begin_session(make_image(), model_state)
        rep = session_report(s)
        assert rep["clicks"] == []
        assert rle.decode(rep["mask_rle"], 48, 48).is_empty()
        assert rep["probs_stats"] is None

    def test_report_rle_decodes_to_mask(self, model_state):
        s = begin_session(make_image(), model_state)
        apply_event(s, AddClick("foreground", 20, 20))
        rep = session_report(s)
        assert np.array_equal(
            rle.decode(rep["mask_rle"], rep["width"], rep["height"]).bits, s.latest_mask.bits
        )
        assert rep["last_latency_ms"] > 0.0
        assert rep["probs_stats"]["max"] <= 1.0
