"""Time the numba kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes follow one training batch of the reduced and the full LASAN encoder
(32 records x 8 leads run through the shared per-lead conv stack).
"""
import argparse
import time

import numpy as np

from lasan import _accel
from lasan.numerics import kernels


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    n = 256
    for c_in, c_out, length in ((1, 4, 2500), (4, 8, 1250), (8, 16, 625), (1, 32, 2500), (32, 64, 1250)):
        x = rng.normal(size=(n, c_in, length)).astype(np.float32)
        w = rng.normal(size=(c_out, c_in, 15)).astype(np.float32)
        b = np.zeros(c_out, np.float32)
        y = kernels.conv1d_forward(x, w, b, 1, 7, use_numba=False)
        g = np.ones_like(y)

        def fwd(flag, x=x, w=w, b=b):
            return kernels.conv1d_forward(x, w, b, 1, 7, use_numba=flag)

        def bwd(flag, x=x, w=w, g=g):
            return kernels.conv1d_backward(x, w, g, 1, 7, True, use_numba=flag)

        yield f"conv1d fwd {c_in}->{c_out} L={length}", fwd
        yield f"conv1d bwd {c_in}->{c_out} L={length}", bwd
    x = rng.normal(size=(n, 16, 1250)).astype(np.float32)
    yield "maxpool2 fwd 16 x 1250", lambda flag: kernels.maxpool2_forward(x, use_numba=flag)
    yield "batchnorm stats 16 x 1250", lambda flag: kernels.batchnorm_stats(x, use_numba=flag)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba not importable; only the numpy path can run")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng):
        t_np = best_of(lambda: fn(False), args.repeat)
        if _accel.HAVE_NUMBA:
            t_nb = best_of(lambda: fn(True), args.repeat)
            print(f"{name:36s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}")
        else:
            print(f"{name:36s} {t_np * 1e3:10.2f} {'-':>10s}")


if __name__ == "__main__":
    main()
