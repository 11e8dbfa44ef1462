#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times the fused per-batch forward+backward at several layer shapes, the
sign-alignment count, and a small end-to-end simulated run per backend.

Run: python3 benchmarks/bench_backends.py [--repeats 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fedsim.backends import numpy_backend

try:
    from fedsim.backends import _core as compiled
except ImportError:
    compiled = None

from fedsim.model import ModelSpec, dropout_masks, init_params

SHAPES = [
    # (input_dim, hidden_dims, batch)
    (16, (32, 16), 32),
    (20, (64, 32), 64),
    (20, (256, 128, 64), 64),
    (49, (256, 128, 64), 1024),
]


def time_fn(fn, repeats):
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'shape':<28} {'batch':>6} {'numpy':>12} {'compiled':>12} {'speedup':>8}")
    print("-" * 72)
    for input_dim, hidden, batch in SHAPES:
        spec = ModelSpec(input_dim=input_dim, hidden_dims=hidden, dropout_rate=0.3)
        params = init_params(spec, seed=1)
        x = np.ascontiguousarray(rng.normal(size=(batch, input_dim)))
        y = rng.integers(0, 2, batch).astype(np.float64)
        masks = dropout_masks(spec, batch, 7)

        t_np = time_fn(
            lambda: numpy_backend.loss_and_grad(params.values, spec.dims, x, y, masks),
            repeats,
        )
        label = f"{input_dim}->{'x'.join(map(str, hidden))}->1"
        if compiled is None:
            print(f"{label:<28} {batch:>6} {t_np*1e6:>10.1f}us {'n/a':>12} {'':>8}")
            continue
        t_c = time_fn(
            lambda: compiled.loss_and_grad(params.values, spec.dims, x, y, masks),
            repeats,
        )
        print(
            f"{label:<28} {batch:>6} {t_np*1e6:>10.1f}us {t_c*1e6:>10.1f}us "
            f"{t_np/t_c:>7.2f}x"
        )


def bench_sign_align(repeats):
    rng = np.random.default_rng(1)
    a = rng.normal(size=100_000)
    b = rng.normal(size=100_000)
    t_np = time_fn(lambda: numpy_backend.sign_align_count(a, b), repeats)
    line = f"{'sign_align (100k)':<28} {'':>6} {t_np*1e6:>10.1f}us"
    if compiled is not None:
        t_c = time_fn(lambda: compiled.sign_align_count(a, b), repeats)
        line += f" {t_c*1e6:>10.1f}us {t_np/t_c:>7.2f}x"
    print(line)


def bench_end_to_end():
    import os

    from fedsim.config import ExperimentConfig
    from fedsim.experiment import run_experiment

    cfg = ExperimentConfig.from_dict(
        {
            "dataset": {"n": 6000, "d": 20, "separation": 4.0},
            "num_clients": 10,
            "rounds": 3,
            "epochs": 3,
            "model": {"hidden_dims": [64, 32]},
            "mode": "async_filtered",
            "seed": 5,
        }
    )
    print()
    print("end-to-end (10 clients x 3 rounds x 3 epochs, hidden 64x32):")
    active = os.environ.get("FEDSIM_BACKEND", "auto")
    result = run_experiment(cfg)
    from fedsim.backends import backend_name

    print(
        f"  backend={backend_name()} (FEDSIM_BACKEND={active}): "
        f"{result.wall_clock_s:.2f}s wall, acc={result.final_accuracy:.3f}"
    )
    print("  (set FEDSIM_BACKEND=python / compiled and rerun to compare)")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()
    if compiled is None:
        print("compiled backend not built; showing numpy fallback only\n")
    bench_kernels(args.repeats)
    bench_sign_align(args.repeats)
    bench_end_to_end()


if __name__ == "__main__":
    main()
