#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy twins.

Also times one training epoch end to end with each kernel set (the epoch
run re-imports the package in a subprocess with APGNN_DISABLE_NUMBA set).

Usage:
    python3 benchmarks/bench_kernels.py [--repeat N] [--skip-epoch]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from apgnn import _accel


def best_of(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    # shapes roughly what one batch of 100 instances produces at d=100
    idx = rng.integers(0, 2000, size=20_000)
    src = rng.standard_normal((20_000, 100))
    yield "scatter_add_rows", (lambda f: f(np.zeros((2000, 100)), idx, src))

    lens = rng.integers(2, 20, size=3000)
    offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    flat = rng.integers(0, 300, size=offsets[-1]).astype(np.int64)
    yield "count_transitions", (lambda f: f(flat, offsets, 300))

    x = rng.standard_normal((5000, 20, 100))
    mask = rng.random((5000, 20)) < 0.7
    yield "masked_max", (lambda f: f(x, mask))

    scores = rng.standard_normal((512, 20_000)).astype(np.float32)
    labels = rng.integers(0, 20_000, size=512)
    yield "label_ranks", (lambda f: f(scores, labels))


EPOCH_SNIPPET = """
import time
from apgnn import _accel, data, synthetic
from apgnn.trainer import TrainConfig, Trainer
c = synthetic.markov_corpus()
inst = data.make_instances(c, 10, 20)
t = Trainer(TrainConfig(d=32, d_user=16, M=10), c.n_items, c.n_users)
t.fit(inst[:200], epochs=1)
t0 = time.perf_counter()
t.fit(inst, epochs=1)
print(_accel.NUMBA_ENABLED, time.perf_counter() - t0)
"""


def epoch_time(disable: bool) -> tuple[str, float]:
    env = dict(os.environ, APGNN_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
    flag, secs = out.stdout.split()
    return flag, float(secs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call in cases(rng):
        t_np = best_of(lambda: call(getattr(_accel, name + "_numpy")), args.repeat)
        t_nb = best_of(lambda: call(getattr(_accel, name + "_numba")), args.repeat)
        print(f"{name:<20s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x")

    if not args.skip_epoch:
        _, t_nb = epoch_time(disable=False)
        _, t_np = epoch_time(disable=True)
        print(f"{'train epoch (markov)':<20s} {1e3 * t_np:10.1f} {1e3 * t_nb:10.1f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
