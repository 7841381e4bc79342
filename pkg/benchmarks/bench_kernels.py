"""Numba vs numpy timings for the hot kernels, plus a short training run per backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--train-steps 30]

Kernel timings call both implementations in-process (the numba path is
warmed up first so compilation is not counted). The training comparison
launches one subprocess per backend with CLUSTERMASK_NUMBA set accordingly.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from clustermask import _kernels as K

TRAIN_SNIPPET = """
import time
from clustermask import data as D, model as M, _kernels
samples = D.generate_dataset(8, 0)
t0 = time.perf_counter()
M.train(samples, M.ModelConfig(), M.TrainConfig(iterations={steps}, warmup=1))
print(_kernels.backend(), time.perf_counter() - t0)
"""


def kernel_cases(rng: np.random.Generator):
    cost = rng.normal(size=(48, 64))
    small = rng.normal(size=(5, 8))
    a = rng.integers(0, 9, size=64 * 64)
    b = rng.integers(0, 9, size=64 * 64)
    return [
        ("assign_rows 48x64", K.assign_rows_numpy, K.assign_rows_numba, (cost,)),
        ("assign_rows 5x8", K.assign_rows_numpy, K.assign_rows_numba, (small,)),
        ("pair_counts 4096 px", K.pair_counts_numpy, K.pair_counts_numba, (a, b, 9, 9)),
        ("splitmix_uniform 12288", K.splitmix_uniform_numpy, K.splitmix_uniform_numba, (7, 64 * 64 * 3)),
    ]


def time_call(fn, args, repeat: int) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def train_seconds(flag: str, steps: int) -> tuple[str, float]:
    env = dict(os.environ, CLUSTERMASK_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-steps", type=int, default=30, help="0 skips the training comparison")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    print("kernel\tnumpy_us\tnumba_us\tspeedup")
    for name, slow, fast, inputs in kernel_cases(rng):
        assert np.array_equal(slow(*inputs), fast(*inputs)), name
        fast(*inputs)
        t_np, t_nb = time_call(slow, inputs, args.repeat), time_call(fast, inputs, args.repeat)
        print(f"{name}\t{t_np * 1e6:.1f}\t{t_nb * 1e6:.1f}\t{t_np / t_nb:.1f}x")

    if args.train_steps:
        print(f"\ntrain {args.train_steps} steps\tseconds")
        for flag in ("0", "1"):
            backend, secs = train_seconds(flag, args.train_steps)
            print(f"{backend}\t{secs:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
