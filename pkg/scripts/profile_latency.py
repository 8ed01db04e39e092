#!/usr/bin/env python3
"""Micro-benchmark: single-core infer-mode forward at 96x96 (base width 16)
and the full session event -> mask round trip."""

import argparse
import time

import numpy as np
import torch

from clickseg.engine import AddClick, apply_event, begin_session
from clickseg.grid import Grid2D
from clickseg.model import ArchConfig, forward_batch, make_state


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--reps", type=int, default=30)
    args = p.parse_args()

    torch.set_num_threads(args.threads)
    state = make_state(ArchConfig(base_width=args.base_width), seed=0)
    x = torch.randn(1, 3, args.size, args.size)
    for _ in range(5):
        forward_batch(state, x, "infer")
    times = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        forward_batch(state, x, "infer")
        times.append((time.perf_counter() - t0) * 1000)
    times.sort()
    print(f"forward {args.size}x{args.size} bw{args.base_width} ({args.threads} threads): "
          f"median {times[len(times)//2]:.1f} ms, min {times[0]:.1f} ms")

    rng = np.random.default_rng(0)
    img = Grid2D(rng.normal(size=(args.size, args.size)).astype(np.float32))
    session = begin_session(img, state)
    apply_event(session, AddClick("foreground", args.size // 2, args.size // 2))
    times = []
    for i in range(args.reps):
        t0 = time.perf_counter()
        apply_event(session, AddClick("foreground", 2 + i % (args.size - 4), 2 + i % (args.size - 4)))
        times.append((time.perf_counter() - t0) * 1000)
    times.sort()
    print(f"session event->mask: median {times[len(times)//2]:.1f} ms, max {times[-1]:.1f} ms")


if __name__ == "__main__":
    main()
