"""Numba vs numpy LSTM recurrence kernels.

Times one forward and one backward pass of a single LSTM layer over a batch
of windows with each backend and checks that both give the same numbers.

    python3 benchmarks/bench_kernels.py [--steps 150] [--batch 192] [--hidden 64]
"""

import argparse
import time

import numpy as np

from biofuse import _accel
from biofuse.kernels import lstm_backward, lstm_forward


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(steps, batch, channels, hidden, repeat=5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((steps, batch, channels))
    W = 0.3 * rng.standard_normal((4 * hidden, channels))
    U = 0.3 * rng.standard_normal((4 * hidden, hidden))
    b = np.zeros(4 * hidden)
    mask = (rng.random((batch, hidden)) > 0.2) / 0.8
    dh = rng.standard_normal((steps, batch, hidden))

    rows = {}
    outs = {}
    for name, flag in (("numpy", False), ("numba", True)):
        if flag and not _accel.HAS_NUMBA:
            continue
        fwd = lstm_forward(x, W, U, b, mask, use_numba=flag)  # also compiles
        bwd = lstm_backward(x, W, U, mask, *fwd, dh, use_numba=flag)
        outs[name] = (fwd[0], bwd[0])
        tf = _best_of(lambda: lstm_forward(x, W, U, b, mask, use_numba=flag), repeat)
        tb = _best_of(lambda: lstm_backward(x, W, U, mask, *fwd, dh, use_numba=flag), repeat)
        rows[name] = (tf, tb)

    print(f"T={steps} B={batch} C={channels} H={hidden}, best of {repeat}")
    print(f"{'backend':8s} {'forward ms':>11s} {'backward ms':>12s}")
    for name, (tf, tb) in rows.items():
        print(f"{name:8s} {1e3 * tf:11.2f} {1e3 * tb:12.2f}")
    if len(rows) == 2:
        (f_np, b_np), (f_nb, b_nb) = rows["numpy"], rows["numba"]
        print(f"speedup  {f_np / f_nb:11.2f}x {b_np / b_nb:11.2f}x")
        diff = max(np.max(np.abs(outs["numpy"][0] - outs["numba"][0])),
                   np.max(np.abs(outs["numpy"][1] - outs["numba"][1])))
        print(f"max |numpy - numba| = {diff:.2e}")
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--batch", type=int, default=192)
    p.add_argument("--channels", type=int, default=12)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    a = p.parse_args()
    bench(a.steps, a.batch, a.channels, a.hidden, a.repeat)


if __name__ == "__main__":
    main()
