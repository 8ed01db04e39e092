"""Iterated-interaction training and the click-budget evaluation sweep.

Each training batch is first rolled out in prediction-only mode: round 1
supplies the initial foreground click with certainty, and each later round
k applies one more simulated click with probability p(k) = 1 - (k-1)/K,
derived from the model's current thresholded prediction. No parameters are
updated during the rollout; the single supervised Dice-loss step runs on
the final guidance tuples.

Every random draw is keyed by (seed, epoch, batch index, image index), so
any guidance stack is reproducible from those coordinates alone and
training can resume from a checkpoint bit-identically.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import BinarySample, explode_dataset, load_dataset
from .grid import BinaryMask, Grid2D, stamp_guidance
from .metrics import SliceMetrics, SurfaceDistanceError, dice_binary, surface_distances
from .model import (
    ArchConfig,
    InputStack,
    ModelState,
    NonFiniteLossError,
    checkpoint_load,
    checkpoint_save,
    forward_batch,
    make_state,
    train_step,
)
from .oracle import Click, OracleConfig, initial_click, next_click

log = logging.getLogger(__name__)

PREDICTION_THRESHOLD = 0.5
_EVAL_TAG = 0x5EED


@dataclass(frozen=True)
class TrainConfig:
    max_interactions: int = 5  # K
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 20
    seed: int = 4242
    oracle_mode: str = "sample"
    dataset_root: Optional[str] = None
    fold: Optional[int] = None
    checkpoint_every: int = 5  # epochs
    base_width: int = 16
    depth: int = 4
    click_sigma: float = 2.0
    out_dir: str = "runs/default"
    num_threads: Optional[int] = None
    epoch_eval_slices: int = 64
    exponent_cap: float = 60.0
    resume: Optional[str] = None

    def __post_init__(self) -> None:
        if self.max_interactions < 1:
            raise ValueError("max_interactions must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(base_width=self.base_width, depth=self.depth)

    def oracle_config(self) -> OracleConfig:
        return OracleConfig(
            mode=self.oracle_mode, rng_seed=self.seed, exponent_cap=self.exponent_cap
        )


def interaction_probability(k: int, max_interactions: int) -> float:
    """Linearly decaying chance that round k adds a click; round 1 is certain."""
    if k <= 1:
        return 1.0
    return 1.0 - (k - 1) / max_interactions


@dataclass
class RolloutItem:
    """Final per-image rollout state: ordered clicks, latest thresholded
    prediction (None until the model ran), realized interaction count t."""

    stack: InputStack
    gt: BinaryMask
    t: int
    clicks: list[Click]
    latest_pred: Optional[BinaryMask]


class _ImageRollout:
    __slots__ = ("sample", "rng", "fg", "bg", "clicks", "t", "pred_bits", "pred_at", "done")

    def __init__(self, sample: BinarySample, rng: np.random.Generator):
        self.sample = sample
        self.rng = rng
        h, w = sample.gt.bits.shape
        self.fg = np.zeros((h, w), dtype=np.float32)
        self.bg = np.zeros((h, w), dtype=np.float32)
        self.clicks: list[Click] = []
        self.t = 0
        self.pred_bits: Optional[np.ndarray] = None
        self.pred_at = -1  # click count when pred_bits was computed
        self.done = False  # oracle saw a perfect prediction; clicks stopped

    def add_click(self, click: Click, sigma: float) -> None:
        target = self.fg if click.polarity == "foreground" else self.bg
        h, w = target.shape
        bump = stamp_guidance([click], w, h, sigma).values
        np.maximum(target, bump, out=target)
        self.clicks.append(click)
        self.t += 1

    def input_array(self) -> np.ndarray:
        return np.stack([self.sample.image.values.astype(np.float32), self.fg, self.bg])


def _predict_bits(state: ModelState, arrays: list[np.ndarray]) -> list[np.ndarray]:
    x = torch.from_numpy(np.stack(arrays)).to(state.dtype)
    probs = forward_batch(state, x, "infer").numpy()
    return [p[0] >= PREDICTION_THRESHOLD for p in probs]


def rollout(
    batch: Sequence[BinarySample],
    state: ModelState,
    max_interactions: int,
    oracle_cfg: OracleConfig,
    seed_seq: np.random.SeedSequence,
    click_sigma: float = 2.0,
) -> list[RolloutItem]:
    """Prediction-only click accumulation for one batch; no parameter updates."""
    children = seed_seq.spawn(len(batch))
    images = [_ImageRollout(s, np.random.default_rng(c)) for s, c in zip(batch, children)]

    for img in images:  # round 1: the initial foreground click, probability 1
        img.add_click(initial_click(img.sample.gt, oracle_cfg, img.rng, click_id=0), click_sigma)

    for k in range(2, max_interactions + 1):
        p = interaction_probability(k, max_interactions)
        fired = [img for img in images if img.rng.random() < p and not img.done]
        needs_pred = [img for img in fired if img.pred_at != len(img.clicks)]
        if needs_pred:
            preds = _predict_bits(state, [img.input_array() for img in needs_pred])
            for img, bits in zip(needs_pred, preds):
                img.pred_bits = bits
                img.pred_at = len(img.clicks)
        for img in fired:
            click = next_click(
                img.sample.gt,
                BinaryMask(img.pred_bits),
                oracle_cfg,
                img.rng,
                click_id=img.t,
            )
            if click is None:
                img.done = True
            else:
                img.add_click(click, click_sigma)

    items = []
    for img in images:
        stack = InputStack(
            image=img.sample.image,
            fg_guidance=Grid2D(img.fg, spacing=img.sample.image.spacing),
            bg_guidance=Grid2D(img.bg, spacing=img.sample.image.spacing),
        )
        pred = BinaryMask(img.pred_bits) if img.pred_bits is not None else None
        items.append(
            RolloutItem(stack=stack, gt=img.sample.gt, t=img.t, clicks=img.clicks, latest_pred=pred)
        )
    return items


def _batch_tensors(items: list[RolloutItem], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(
        np.stack(
            [
                np.stack(
                    [
                        it.stack.image.values.astype(np.float32),
                        it.stack.fg_guidance.values.astype(np.float32),
                        it.stack.bg_guidance.values.astype(np.float32),
                    ]
                )
                for it in items
            ]
        )
    ).to(dtype)
    g = torch.from_numpy(
        np.stack([it.gt.bits[None].astype(np.float32) for it in items])
    ).to(dtype)
    return x, g


def _mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train(
    cfg: TrainConfig,
    train_samples: Optional[list[BinarySample]] = None,
    val_samples: Optional[list[BinarySample]] = None,
) -> tuple[Path, Path]:
    """Full training run; returns (final checkpoint path, train log path)."""
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))

    if train_samples is None or val_samples is None:
        if cfg.dataset_root is None:
            raise ValueError("dataset_root required when samples are not supplied")
        train_raw = load_dataset(cfg.dataset_root, split="train", fold=cfg.fold)
        val_raw = load_dataset(cfg.dataset_root, split="val", fold=cfg.fold)
        train_samples, n_skip_tr = explode_dataset(train_raw)
        val_samples, n_skip_val = explode_dataset(val_raw)
        log.info(
            "dataset: %d train / %d val binary slices (%d/%d empty skipped)",
            len(train_samples), len(val_samples), n_skip_tr, n_skip_val,
        )
    if not train_samples:
        raise ValueError("no non-empty training slices")

    if cfg.resume:
        state = checkpoint_load(cfg.resume, expect_arch=cfg.arch)
    else:
        state = make_state(cfg.arch, seed=cfg.seed, learning_rate=cfg.learning_rate)

    ckpt_path = out_dir / "checkpoint_final.ckpt"
    last_good = out_dir / "checkpoint_last.ckpt"
    log_path = out_dir / "train_log.jsonl"
    ocfg = cfg.oracle_config()
    n = len(train_samples)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size

    with open(log_path, "a") as log_fh:
        for epoch in range(state.epochs_done, cfg.epochs):
            t0 = time.perf_counter()
            perm = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch, 0x5FF])
            ).permutation(n)
            losses = []
            for b in range(batches_per_epoch):
                idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = [train_samples[i] for i in idx]
                items = rollout(
                    batch,
                    state,
                    cfg.max_interactions,
                    ocfg,
                    np.random.SeedSequence([cfg.seed, epoch, b]),
                    click_sigma=cfg.click_sigma,
                )
                x, g = _batch_tensors(items, state.dtype)
                try:
                    losses.append(train_step(state, (x, g)))
                except NonFiniteLossError:
                    log.error("non-finite loss; last good checkpoint: %s", last_good)
                    raise
            state.epochs_done = epoch + 1

            dice_first, dice_full = _epoch_val_dice(state, val_samples, cfg, epoch)
            record = {
                "epoch": epoch + 1,
                "loss": round(float(np.mean(losses)), 6),
                "dice@1": dice_first,
                "dice@K": dice_full,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 1),
            }
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
            log.info("epoch %d: %s", epoch + 1, record)

            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                checkpoint_save(state, last_good)

    checkpoint_save(state, ckpt_path)
    return ckpt_path, log_path


def _epoch_val_dice(
    state: ModelState, val_samples: Optional[list[BinarySample]], cfg: TrainConfig, epoch: int
) -> tuple[Optional[float], Optional[float]]:
    if not val_samples:
        return None, None
    subset = val_samples[: cfg.epoch_eval_slices]
    report = evaluate(
        state,
        subset,
        budgets=[1, cfg.max_interactions],
        oracle_cfg=cfg.oracle_config(),
        seed=_mix_seed(cfg.seed, epoch, _EVAL_TAG),
        click_sigma=cfg.click_sigma,
    )
    overall = report["overall"]
    d1 = overall[str(1)]["dice"]
    dk = overall[str(cfg.max_interactions)]["dice"]
    return round(d1, 6), round(dk, 6)


class _EvalSlice:
    __slots__ = ("sample", "rng", "fg", "bg", "pred_bits", "clicks_done", "stopped")

    def __init__(self, sample: BinarySample, rng: np.random.Generator):
        self.sample = sample
        self.rng = rng
        h, w = sample.gt.bits.shape
        self.fg = np.zeros((h, w), dtype=np.float32)
        self.bg = np.zeros((h, w), dtype=np.float32)
        self.pred_bits: Optional[np.ndarray] = None
        self.clicks_done = 0
        self.stopped = False  # disparity became empty; no further clicks

    def input_array(self) -> np.ndarray:
        return np.stack([self.sample.image.values.astype(np.float32), self.fg, self.bg])


def evaluate(
    state: ModelState,
    samples: Sequence[BinarySample],
    budgets: Sequence[int],
    oracle_cfg: OracleConfig,
    seed: int,
    click_sigma: float = 2.0,
    chunk: int = 16,
    collect_slices: bool = False,
) -> dict:
    """Interaction-budget sweep: per slice, an initial click then corrective
    oracle clicks, one infer-mode prediction after each; metrics of the final
    thresholded mask are recorded at every budget boundary.

    Budgets share click prefixes (the clicks for budget b are the first b
    clicks of the largest budget), so the sweep runs incrementally.
    """
    budgets = sorted(set(int(b) for b in budgets))
    if not budgets or budgets[0] < 1:
        raise ValueError("budgets must be >= 1")
    max_budget = budgets[-1]
    slices = [
        _EvalSlice(s, np.random.default_rng(np.random.SeedSequence([seed, i])))
        for i, s in enumerate(samples)
    ]

    per_budget: dict[int, list[SliceMetrics]] = {b: [] for b in budgets}
    for rnd in range(1, max_budget + 1):
        for sl in slices:
            if sl.stopped:
                continue
            if rnd == 1:
                click = initial_click(sl.sample.gt, oracle_cfg, sl.rng, click_id=0)
            else:
                click = next_click(
                    sl.sample.gt, BinaryMask(sl.pred_bits), oracle_cfg, sl.rng, click_id=sl.clicks_done
                )
            if click is None:
                sl.stopped = True
                continue
            target = sl.fg if click.polarity == "foreground" else sl.bg
            h, w = target.shape
            np.maximum(target, stamp_guidance([click], w, h, click_sigma).values, out=target)
            sl.clicks_done += 1
        pending = [sl for sl in slices if not sl.stopped and sl.clicks_done == rnd]
        for i in range(0, len(pending), chunk):
            group = pending[i : i + chunk]
            for sl, bits in zip(group, _predict_bits(state, [s.input_array() for s in group])):
                sl.pred_bits = bits
        if rnd in per_budget:
            for sl in slices:
                per_budget[rnd].append(_slice_metrics(sl))

    report: dict = {
        "seed": seed,
        "budgets": budgets,
        "oracle_mode": oracle_cfg.mode,
        "n_slices": len(slices),
        "per_structure": {},
        "overall": {},
    }
    structure_ids = sorted({sl.sample.structure_id for sl in slices})
    for sid in structure_ids:
        report["per_structure"][str(sid)] = {
            str(b): _mean_row([m for m in per_budget[b] if m.structure_id == sid])
            for b in budgets
        }
    report["overall"] = {str(b): _mean_row(per_budget[b]) for b in budgets}
    if collect_slices:
        report["slices"] = {
            str(b): [
                {
                    "case_id": m.case_id,
                    "slice_index": m.slice_index,
                    "structure_id": m.structure_id,
                    "dice": m.dice,
                    "hd_mm": m.hd,
                    "mad_mm": m.mad,
                }
                for m in per_budget[b]
            ]
            for b in budgets
        }
    return report


def _slice_metrics(sl: _EvalSlice) -> SliceMetrics:
    pred = BinaryMask(sl.pred_bits)
    gt = sl.sample.gt
    dice = dice_binary(pred, gt)
    try:
        hd, mad = surface_distances(pred, gt, spacing=sl.sample.image.spacing)
    except SurfaceDistanceError:
        hd = mad = None
    return SliceMetrics(
        dice=dice,
        hd=hd,
        mad=mad,
        structure_id=sl.sample.structure_id,
        case_id=sl.sample.case_id,
        slice_index=sl.sample.slice_index,
    )


def _mean_row(group: list[SliceMetrics]) -> dict:
    surf = [(m.hd, m.mad) for m in group if m.hd is not None]
    return {
        "dice": float(np.mean([m.dice for m in group])) if group else None,
        "hd_mm": float(np.mean([h for h, _ in surf])) if surf else None,
        "mad_mm": float(np.mean([m for _, m in surf])) if surf else None,
        "n_slices": len(group),
        "n_surface_excluded": len(group) - len(surf),
    }
