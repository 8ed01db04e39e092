"""Desk-scale experiment drivers: the interaction-budget trend run and the
unseen-structure generalization run. Used by the scripts in scripts/ and by
the acceptance suite, so both exercise identical configurations.
"""

from __future__ import annotations

import json
import shutil
import time
from pathlib import Path
from typing import Optional

from .data import BinarySample, SyntheticConfig, explode_dataset, generate_synthetic
from .model import checkpoint_load
from .oracle import OracleConfig
from .trainer import TrainConfig, evaluate, train

TREND_BUDGETS = [1, 2, 5]
UNSEEN_CLASS_ID = 2  # rim_organ (crescent) held out as the unknown structure


def _binary_pool(cfg: SyntheticConfig, n_slices: int) -> list[BinarySample]:
    """Generate enough multi-label samples to cover n_slices binary items."""
    count = cfg.count
    while True:
        samples = generate_synthetic(
            SyntheticConfig(**{**cfg.__dict__, "count": count})
        )
        binary, _ = explode_dataset(samples)
        if len(binary) >= n_slices:
            return binary[:n_slices]
        count = int(count * 1.3) + 8


def run_trend(
    workdir,
    seed: int = 4242,
    epochs: int = 20,
    n_train: int = 2000,
    n_val: int = 200,
    size: int = 96,
    base_width: int = 16,
    max_interactions: int = 5,
    num_threads: Optional[int] = None,
    fresh: bool = True,
) -> dict:
    """Train with K=5 rollouts on synthetic slices of all three structure
    classes, then sweep evaluation budgets 1/2/5 on held-out slices."""
    workdir = Path(workdir)
    if fresh and workdir.exists():
        shutil.rmtree(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    gen = SyntheticConfig(size=size, seed=seed, count=max(8, n_train // 2))
    train_slices = _binary_pool(gen, n_train)
    val_gen = SyntheticConfig(size=size, seed=seed + 1_000_003, count=max(4, n_val // 2))
    val_slices = _binary_pool(val_gen, n_val)

    cfg = TrainConfig(
        max_interactions=max_interactions,
        batch_size=16,
        learning_rate=1e-4,
        epochs=epochs,
        seed=seed,
        base_width=base_width,
        out_dir=str(workdir / "train"),
        epoch_eval_slices=48,
        checkpoint_every=5,
        num_threads=num_threads,
    )
    t0 = time.perf_counter()
    ckpt, log_path = train(cfg, train_samples=train_slices, val_samples=val_slices)
    train_wall_s = time.perf_counter() - t0

    state = checkpoint_load(ckpt)
    t0 = time.perf_counter()
    report = evaluate(
        state,
        val_slices,
        budgets=TREND_BUDGETS,
        oracle_cfg=OracleConfig(mode="sample", rng_seed=seed),
        seed=seed + 7,
    )
    eval_wall_s = time.perf_counter() - t0
    dice = {b: report["overall"][str(b)]["dice"] for b in TREND_BUDGETS}
    result = {
        "checkpoint": str(ckpt),
        "log": str(log_path),
        "report": report,
        "dice": dice,
        "train_wall_s": train_wall_s,
        "eval_wall_s": eval_wall_s,
        "n_train": len(train_slices),
        "n_val": len(val_slices),
    }
    (workdir / "summary.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def run_unseen(
    workdir,
    seed: int = 1111,
    epochs: int = 12,
    n_train: int = 1400,
    n_eval: int = 150,
    size: int = 96,
    base_width: int = 16,
    max_interactions: int = 5,
    num_threads: Optional[int] = None,
    fresh: bool = True,
) -> dict:
    """Train on two structure classes only (ellipse organ + lobulated lesion)
    and evaluate on the held-out crescent class the model never saw."""
    workdir = Path(workdir)
    if fresh and workdir.exists():
        shutil.rmtree(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    gen = SyntheticConfig(
        size=size,
        seed=seed,
        count=max(8, n_train),
        classes=("organ", "lesion"),
        class_priors=(1.0, 1.0),
        max_structures=2,
    )
    train_slices = _binary_pool(gen, n_train)
    seen_val = train_slices[-60:]
    train_slices = train_slices[:-60]

    eval_gen = SyntheticConfig(size=size, seed=seed + 999_331, count=n_eval)
    eval_pool, _ = explode_dataset(generate_synthetic(eval_gen))
    unseen = [b for b in eval_pool if b.structure_id == UNSEEN_CLASS_ID]
    while len(unseen) < n_eval:
        eval_gen = SyntheticConfig(**{**eval_gen.__dict__, "count": int(eval_gen.count * 1.4) + 8})
        eval_pool, _ = explode_dataset(generate_synthetic(eval_gen))
        unseen = [b for b in eval_pool if b.structure_id == UNSEEN_CLASS_ID]
    unseen = unseen[:n_eval]

    cfg = TrainConfig(
        max_interactions=max_interactions,
        batch_size=16,
        learning_rate=1e-4,
        epochs=epochs,
        seed=seed,
        base_width=base_width,
        out_dir=str(workdir / "train"),
        epoch_eval_slices=30,
        checkpoint_every=4,
        num_threads=num_threads,
    )
    t0 = time.perf_counter()
    ckpt, log_path = train(cfg, train_samples=train_slices, val_samples=seen_val)
    train_wall_s = time.perf_counter() - t0

    state = checkpoint_load(ckpt)
    report = evaluate(
        state,
        unseen,
        budgets=[1, 2, 5],
        oracle_cfg=OracleConfig(mode="sample", rng_seed=seed),
        seed=seed + 7,
    )
    dice = {b: report["overall"][str(b)]["dice"] for b in (1, 2, 5)}
    result = {
        "checkpoint": str(ckpt),
        "log": str(log_path),
        "report": report,
        "dice": dice,
        "train_wall_s": train_wall_s,
        "n_train": len(train_slices),
        "n_unseen": len(unseen),
        "unseen_class_id": UNSEEN_CLASS_ID,
    }
    (workdir / "summary.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result
