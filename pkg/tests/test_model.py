import json
import struct
import zlib

import numpy as np
import pytest
import torch

from clickseg.grid import BinaryMask, Grid2D
from clickseg.model import (
    CHECKPOINT_MAGIC,
    ArchConfig,
    ArchConflictError,
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
    InputStack,
    NonFiniteLossError,
    checkpoint_load,
    checkpoint_save,
    dice_loss,
    dice_score,
    forward,
    forward_batch,
    make_state,
    stack_to_tensor,
    train_step,
)

TINY = ArchConfig(base_width=2, depth=2)


def random_stack(rng, size=32):
    img = Grid2D(rng.normal(size=(size, size)).astype(np.float32))
    fg = Grid2D(rng.uniform(0, 1, (size, size)).astype(np.float32))
    bg = Grid2D(rng.uniform(0, 1, (size, size)).astype(np.float32))
    return InputStack(image=img, fg_guidance=fg, bg_guidance=bg)


def blob_mask(size, cx, cy, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return BinaryMask((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r)


class TestForward:
    def test_shape_and_range(self):
        state = make_state(TINY, seed=0)
        rng = np.random.default_rng(0)
        for size in (32, 64, 96, 128):
            out = forward(state, random_stack(rng, size), "infer")
            assert out.values.shape == (size, size)
            assert out.values.min() > 0.0 and out.values.max() < 1.0

    def test_indivisible_dims_rejected(self):
        state = make_state(ArchConfig(base_width=2, depth=4), seed=0)
        with pytest.raises(ValueError, match="divisible"):
            forward_batch(state, torch.zeros(1, 3, 40, 40), "infer")

    def test_infer_is_deterministic(self):
        state = make_state(TINY, seed=1)
        x = torch.randn(2, 3, 32, 32)
        assert torch.equal(forward_batch(state, x, "infer"), forward_batch(state, x, "infer"))

    def test_same_seed_same_weights(self):
        a = make_state(TINY, seed=5)
        b = make_state(TINY, seed=5)
        for p1, p2 in zip(a.net.parameters(), b.net.parameters()):
            assert torch.equal(p1, p2)

    def test_guidance_range_enforced(self):
        img = Grid2D(np.zeros((16, 16), dtype=np.float32))
        bad = Grid2D(np.full((16, 16), 1.5, dtype=np.float32))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            InputStack(image=img, fg_guidance=bad, bg_guidance=img)


class TestDiceScore:
    def test_identical_binary(self):
        bits = np.eye(6, dtype=bool)
        assert dice_score(bits.astype(float), BinaryMask(bits)) == pytest.approx(1.0)

    def test_disjoint_binary(self):
        a = np.zeros((4, 4))
        a[0, 0] = 1.0
        b = np.zeros((4, 4), dtype=bool)
        b[3, 3] = True
        assert dice_score(a, BinaryMask(b)) == 0.0

    def test_soft_example(self):
        pred = np.array([[0.5, 0.5]])
        gt = np.array([[1, 0]], dtype=bool)
        assert dice_score(pred, BinaryMask(gt)) == pytest.approx(2 * 0.5 / 1.5)

    def test_both_empty_rejected(self):
        with pytest.raises(ValueError, match="both empty"):
            dice_score(np.zeros((3, 3)), BinaryMask.empty(3, 3))


class TestDiceLoss:
    def test_perfect_prediction_zero_loss(self):
        g = torch.zeros(2, 1, 4, 4)
        g[:, :, 1:3, 1:3] = 1.0
        assert float(dice_loss(g.clone(), g)) == pytest.approx(0.0)

    def test_batch_average(self):
        # slice 1: dice 1.0, slice 2: dice 2*1/(1+3) = 0.5 -> loss 0.25
        g = torch.zeros(2, 1, 1, 4)
        g[0, 0, 0, 0] = 1.0
        g[1, 0, 0, 0] = 1.0
        p = g.clone()
        p[1, 0, 0, :3] = 1.0
        assert float(dice_loss(p, g)) == pytest.approx(0.25, abs=1e-6)

    def test_empty_gt_slice_rejected(self):
        p = torch.rand(2, 1, 4, 4)
        g = torch.zeros(2, 1, 4, 4)
        g[0, 0, 0, 0] = 1.0
        with pytest.raises(ValueError, match="empty ground truth"):
            dice_loss(p, g)


from helpers import finite_difference_check, relative_error


class TestGradients:
    def test_finite_difference_subset(self):
        torch.manual_seed(0)
        state = make_state(TINY, seed=3, dtype=torch.float64)
        rng = np.random.default_rng(4)
        x = torch.from_numpy(rng.normal(size=(1, 3, 8, 8))).to(torch.float64)
        bits = np.zeros((8, 8), dtype=np.float64)
        bits[2:6, 2:6] = 1.0
        g = torch.from_numpy(bits[None, None]).to(torch.float64)
        errors, n = finite_difference_check(state, x, g, param_stride=17)
        assert n > 50
        assert errors.max() < 1e-3, f"worst rel err {errors.max()} over {n} params"

    def test_detects_a_wrong_gradient(self):
        # the refinement ladder must not mask a real gradient bug: corrupt the
        # analytic gradient and confirm the check fails at every step
        torch.manual_seed(0)
        state = make_state(TINY, seed=3, dtype=torch.float64)
        rng = np.random.default_rng(4)
        x = torch.from_numpy(rng.normal(size=(1, 3, 8, 8))).to(torch.float64)
        bits = np.zeros((8, 8), dtype=np.float64)
        bits[2:6, 2:6] = 1.0
        g = torch.from_numpy(bits[None, None]).to(torch.float64)

        def loss_value() -> float:
            with torch.no_grad():
                return float(dice_loss(state.net.train()(x), g))

        preds = forward_batch(state, x, "train")
        loss = dice_loss(preds, g)
        state.net.zero_grad()
        loss.backward()
        p = state.net.head.weight
        wrong = float(p.grad.view(-1)[0]) * 3.0 + 1.0
        flat = p.data.view(-1)
        orig = float(flat[0])
        best = np.inf
        for h in (1e-3, 1e-4, 1e-5):
            flat[0] = orig + h
            up = loss_value()
            flat[0] = orig - h
            down = loss_value()
            flat[0] = orig
            best = min(best, relative_error(wrong, (up - down) / (2 * h)))
        assert best > 1e-3


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self):
        state = make_state(TINY, seed=2, learning_rate=0.0)
        rng = np.random.default_rng(0)
        stack = random_stack(rng, 32)
        gt = blob_mask(32, 16, 16, 6)
        before = [p.detach().clone() for p in state.net.parameters()]
        bn_before = state.net.enc[0].bn1.running_mean.clone()
        train_step(state, [(stack, gt)])
        for p0, p1 in zip(before, state.net.parameters()):
            assert torch.equal(p0, p1)
        assert not torch.equal(bn_before, state.net.enc[0].bn1.running_mean)
        assert state.step_count == 1

    def test_overfits_single_sample(self):
        state = make_state(ArchConfig(base_width=8, depth=3), seed=7, learning_rate=1e-3)
        rng = np.random.default_rng(7)
        size = 64
        gt = blob_mask(size, 30, 34, 11)
        img = Grid2D(
            (gt.bits.astype(np.float32) * 1.0 + rng.normal(0, 0.1, (size, size))).astype(
                np.float32
            )
        )
        from clickseg.grid import stamp_guidance

        fg = stamp_guidance([(30, 34)], size, size, 2.0)
        bg = Grid2D(np.zeros((size, size), dtype=np.float32))
        stack = InputStack(image=img, fg_guidance=fg, bg_guidance=bg)
        x = stack_to_tensor(stack).unsqueeze(0)
        g = torch.from_numpy(gt.bits[None, None].astype(np.float32))
        loss = 1.0
        for step in range(200):
            loss = train_step(state, (x, g))
            if loss < 0.05:
                break
        assert loss < 0.05, f"loss stuck at {loss}"

    def test_determinism_across_runs(self):
        def run():
            torch.set_num_threads(1)
            state = make_state(TINY, seed=9, learning_rate=1e-3)
            rng = np.random.default_rng(1)
            x = torch.from_numpy(rng.normal(size=(2, 3, 16, 16))).float()
            g = torch.zeros(2, 1, 16, 16)
            g[:, :, 4:12, 4:12] = 1.0
            return [train_step(state, (x, g)) for _ in range(5)]

        assert run() == run()

    def test_non_finite_loss_raises(self):
        state = make_state(TINY, seed=0)
        with torch.no_grad():
            state.net.head.weight.fill_(float("nan"))
        x = torch.randn(1, 3, 16, 16)
        g = torch.zeros(1, 1, 16, 16)
        g[0, 0, 4:8, 4:8] = 1.0
        with pytest.raises(NonFiniteLossError):
            train_step(state, (x, g))


def _repack(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def _split_checkpoint(raw: bytes):
    off = len(CHECKPOINT_MAGIC)
    version = struct.unpack_from("<I", raw, off)[0]
    off += 4
    hlen = struct.unpack_from("<Q", raw, off)[0]
    off += 8
    header = json.loads(raw[off : off + hlen])
    blobs = raw[off + hlen : -4]
    return version, header, blobs


class TestCheckpoint:
    def _state(self, tmp_path, arch=TINY):
        state = make_state(arch, seed=4, learning_rate=1e-3)
        x = torch.randn(2, 3, 16, 16)
        g = torch.zeros(2, 1, 16, 16)
        g[:, :, 2:10, 3:9] = 1.0
        train_step(state, (x, g))  # populate optimizer moments and BN stats
        path = tmp_path / "model.ckpt"
        checkpoint_save(state, path)
        return state, path

    def test_roundtrip_bitwise(self, tmp_path):
        state, path = self._state(tmp_path)
        loaded = checkpoint_load(path)
        x = torch.randn(1, 3, 32, 32)
        assert torch.equal(forward_batch(state, x, "infer"), forward_batch(loaded, x, "infer"))
        assert loaded.step_count == state.step_count
        for (n1, t1), (n2, t2) in zip(
            state.net.state_dict().items(), loaded.net.state_dict().items()
        ):
            assert n1 == n2 and torch.equal(t1, t2), n1

    def test_optimizer_moments_roundtrip(self, tmp_path):
        state, path = self._state(tmp_path)
        loaded = checkpoint_load(path)
        x = torch.randn(2, 3, 16, 16)
        g = torch.zeros(2, 1, 16, 16)
        g[:, :, 2:10, 3:9] = 1.0
        l1 = train_step(state, (x.clone(), g.clone()))
        l2 = train_step(loaded, (x.clone(), g.clone()))
        assert l1 == l2
        for p1, p2 in zip(state.net.parameters(), loaded.net.parameters()):
            assert torch.equal(p1, p2)

    def test_truncated_file_is_corrupt(self, tmp_path):
        _, path = self._state(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CorruptCheckpointError, match="corrupt checkpoint"):
            checkpoint_load(path)

    def test_bad_magic_is_corrupt(self, tmp_path):
        _, path = self._state(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError):
            checkpoint_load(path)

    def test_version_mismatch_distinct_error(self, tmp_path):
        _, path = self._state(tmp_path)
        raw = bytearray(path.read_bytes()[:-4])
        struct.pack_into("<I", raw, len(CHECKPOINT_MAGIC), 99)
        path.write_bytes(_repack(bytes(raw)))
        with pytest.raises(CheckpointVersionError, match="version"):
            checkpoint_load(path)

    def test_shape_mismatch_distinct_error(self, tmp_path):
        _, path = self._state(tmp_path)
        raw = path.read_bytes()
        version, header, blobs = _split_checkpoint(raw)
        # swell the declared arch so tensor shapes in the file no longer match
        header["arch"]["base_width"] = 4
        hj = json.dumps(header, sort_keys=True).encode()
        payload = CHECKPOINT_MAGIC + struct.pack("<I", version) + struct.pack("<Q", len(hj)) + hj + blobs
        path.write_bytes(_repack(payload))
        with pytest.raises((CheckpointShapeError, CorruptCheckpointError)):
            checkpoint_load(path)

    def test_arch_override_rejected(self, tmp_path):
        _, path = self._state(tmp_path)
        with pytest.raises(ArchConflictError, match="authoritative"):
            checkpoint_load(path, expect_arch=ArchConfig(base_width=32, depth=2))
        loaded = checkpoint_load(path, expect_arch=TINY)
        assert loaded.arch == TINY
