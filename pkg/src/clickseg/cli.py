"""Operator entry points.

Subcommands: gen-data, train, eval, simulate, serve, export-report.
Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure. Every
subcommand prints an effective-config banner (one JSON line) so a run can
be reproduced from its output alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

INTERACTION_CHOICES = (1, 2, 5, 10, 15)


def _banner(name: str, cfg: dict) -> None:
    print(f"config[{name}]: {json.dumps(cfg, sort_keys=True, default=str)}", flush=True)


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error: {kind}: {message}", file=sys.stderr, flush=True)
    return code


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {path} not found")
    return json.loads(p.read_text())


def _merge(file_cfg: dict, overrides: dict) -> dict:
    merged = dict(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _parse_budgets(text: str) -> list[int]:
    try:
        budgets = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ValueError(f"bad --clicks list {text!r}") from e
    if not budgets or min(budgets) < 1:
        raise ValueError("--clicks budgets must be >= 1")
    return budgets


def cmd_gen_data(args) -> int:
    from .data import SyntheticConfig, generate_synthetic, write_dataset

    file_cfg = _load_config_file(args.config)
    cfg_keys = {f.name for f in dataclasses.fields(SyntheticConfig)}
    merged = _merge(
        {k: v for k, v in file_cfg.items() if k in cfg_keys},
        {"count": args.count, "size": args.size, "seed": args.seed},
    )
    cfg = SyntheticConfig(**merged)
    val_fraction = args.val_fraction if args.val_fraction is not None else file_cfg.get("val_fraction", 0.1)
    _banner("gen-data", {**dataclasses.asdict(cfg), "out": args.out, "val_fraction": val_fraction})
    samples = generate_synthetic(cfg)
    root = write_dataset(samples, args.out, val_fraction=val_fraction, seed=cfg.seed)
    print(f"wrote {len(samples)} slices to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    file_cfg = _load_config_file(args.config)
    cfg_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    merged = _merge(
        {k: v for k, v in file_cfg.items() if k in cfg_keys},
        {
            "dataset_root": args.dataset,
            "out_dir": args.out,
            "seed": args.seed,
            "max_interactions": args.max_interactions,
            "fold": args.fold,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "learning_rate": args.lr,
            "base_width": args.base_width,
            "oracle_mode": args.mode,
            "num_threads": args.threads,
            "resume": args.resume,
        },
    )
    cfg = TrainConfig(**merged)
    _banner("train", dataclasses.asdict(cfg))
    ckpt, log_path = train(cfg)
    print(f"checkpoint: {ckpt}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import explode_dataset, load_dataset
    from .model import checkpoint_load
    from .oracle import OracleConfig
    from .trainer import evaluate

    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    budgets = _parse_budgets(args.clicks)
    _banner(
        "eval",
        {
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "split": args.split,
            "fold": args.fold,
            "clicks": budgets,
            "seed": args.seed,
            "mode": args.mode,
            "out": args.out,
        },
    )
    state = checkpoint_load(args.checkpoint)
    samples = load_dataset(args.dataset, split=args.split, fold=args.fold)
    binary, skipped = explode_dataset(samples)
    if not binary:
        raise FileNotFoundError(f"no non-empty slices in {args.dataset} split={args.split}")
    report = evaluate(
        state,
        binary,
        budgets=budgets,
        oracle_cfg=OracleConfig(mode=args.mode, rng_seed=args.seed),
        seed=args.seed,
        collect_slices=args.per_slice,
    )
    report["n_slices_skipped_empty_gt"] = skipped
    report["checkpoint"] = args.checkpoint
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        print(f"report: {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .data import explode_multilabel, load_dataset, load_manifest, read_sample
    from .grid import BinaryMask, stamp_guidance
    from .metrics import SurfaceDistanceError, dice_binary, surface_distances
    from .model import checkpoint_load
    from .oracle import OracleConfig, initial_click, next_click
    from .trainer import PREDICTION_THRESHOLD, _predict_bits

    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    _banner(
        "simulate",
        {
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "slice": args.slice,
            "structure": args.structure,
            "clicks": args.clicks,
            "mode": args.mode,
            "seed": args.seed,
        },
    )
    state = checkpoint_load(args.checkpoint)
    case_id, _, slice_name = args.slice.partition("/")
    stem = Path(args.dataset) / case_id / slice_name
    sample = read_sample(stem)
    binaries = explode_multilabel(sample)
    matching = [b for b in binaries if args.structure in (None, b.structure_id)]
    if not matching:
        raise FileNotFoundError(
            f"slice {args.slice} has no structure {args.structure} (found {[b.structure_id for b in binaries]})"
        )
    target = matching[0]
    ocfg = OracleConfig(mode=args.mode, rng_seed=args.seed)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0]))
    h, w = target.gt.bits.shape
    fg = np.zeros((h, w), dtype=np.float32)
    bg = np.zeros((h, w), dtype=np.float32)
    pred = None
    for k in range(1, args.clicks + 1):
        if k == 1:
            click = initial_click(target.gt, ocfg, rng, click_id=0)
        else:
            click = next_click(target.gt, BinaryMask(pred), ocfg, rng, click_id=k - 1)
        if click is None:
            print(json.dumps({"k": k, "event": "oracle_stop", "reason": "empty disparity"}))
            break
        buf = fg if click.polarity == "foreground" else bg
        np.maximum(buf, stamp_guidance([click], w, h, args.sigma).values, out=buf)
        pred = _predict_bits(
            state, [np.stack([target.image.values.astype(np.float32), fg, bg])]
        )[0]
        mask = BinaryMask(pred)
        dice = dice_binary(mask, target.gt)
        try:
            hd, mad = surface_distances(mask, target.gt, spacing=target.image.spacing)
        except SurfaceDistanceError:
            hd = mad = None
        print(
            json.dumps(
                {
                    "k": k,
                    "polarity": click.polarity,
                    "x": click.x,
                    "y": click.y,
                    "dice": round(dice, 6),
                    "hd_mm": None if hd is None else round(hd, 6),
                    "mad_mm": None if mad is None else round(mad, 6),
                },
                sort_keys=True,
            )
        )
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import ServeConfig, apply_env_overrides, serve

    cfg = apply_env_overrides(ServeConfig())
    overrides = {
        "host": args.host,
        "port": args.port,
        "checkpoint": args.checkpoint,
        "dataset_root": args.dataset,
        "max_sessions": args.max_sessions,
        "export_dir": args.export_dir,
        "num_threads": args.threads,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if not cfg.checkpoint or not cfg.dataset_root:
        raise ValueError("serve requires --checkpoint and --dataset (or CLICKSEG_* env)")
    _banner("serve", dataclasses.asdict(cfg))
    serve(cfg)
    return EXIT_OK


def cmd_export_report(args) -> int:
    report = json.loads(Path(args.report).read_text())
    _banner("export-report", {"report": args.report, "out": args.out, "format": args.format})
    rows = [("structure", "budget", "dice", "hd_mm", "mad_mm", "n_slices")]
    sections = dict(report.get("per_structure", {}))
    sections["overall"] = report.get("overall", {})
    for sid, by_budget in sections.items():
        for budget in sorted(by_budget, key=lambda b: int(b)):
            row = by_budget[budget]
            rows.append(
                (
                    sid,
                    budget,
                    _fmt(row.get("dice")),
                    _fmt(row.get("hd_mm")),
                    _fmt(row.get("mad_mm")),
                    str(row.get("n_slices")),
                )
            )
    if args.format == "csv":
        text = "\n".join(",".join(r) for r in rows) + "\n"
    else:
        header, body = rows[0], rows[1:]
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clickseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON config mirroring SyntheticConfig keys")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--val-fraction", type=float, dest="val_fraction")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="iterated-interaction training")
    t.add_argument("--config", help="JSON config mirroring TrainConfig keys")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-interactions", type=int, choices=INTERACTION_CHOICES)
    t.add_argument("--fold", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--base-width", type=int)
    t.add_argument("--mode", choices=("sample", "argmax"))
    t.add_argument("--threads", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="interaction-budget evaluation sweep")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--fold", type=int)
    e.add_argument("--clicks", default="1,2,5", help="comma-separated budgets")
    e.add_argument("--seed", type=int, default=4242)
    e.add_argument("--mode", choices=("sample", "argmax"), default="sample")
    e.add_argument("--out")
    e.add_argument("--per-slice", action="store_true", dest="per_slice")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="single-slice oracle replay with click trace")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--slice", required=True, help="case_id/slice_stem, e.g. case0001/0003")
    s.add_argument("--structure", type=int)
    s.add_argument("--clicks", type=int, default=5)
    s.add_argument("--mode", choices=("sample", "argmax"), default="sample")
    s.add_argument("--seed", type=int, default=4242)
    s.add_argument("--sigma", type=float, default=2.0)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("serve", help="HTTP+WebSocket annotation service")
    v.add_argument("--host")
    v.add_argument("--port", type=int)
    v.add_argument("--checkpoint")
    v.add_argument("--dataset")
    v.add_argument("--max-sessions", type=int)
    v.add_argument("--export-dir")
    v.add_argument("--threads", type=int)
    v.set_defaults(func=cmd_serve)

    x = sub.add_parser("export-report", help="flatten an eval report to CSV/markdown")
    x.add_argument("--report", required=True)
    x.add_argument("--out")
    x.add_argument("--format", choices=("csv", "md"), default="csv")
    x.set_defaults(func=cmd_export_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    from .model import CheckpointError, NonFiniteLossError

    try:
        return args.func(args)
    except NonFiniteLossError as e:
        return _fail("numeric", str(e), EXIT_NUMERIC)
    except (FileNotFoundError, CheckpointError) as e:
        return _fail("data", str(e), EXIT_DATA)
    except ValueError as e:
        return _fail("data", str(e), EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
