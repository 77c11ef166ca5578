"""Selective-scan forward+backward: numba kernels vs the pure-numpy fallback.

Usage::

    python benchmarks/bench_scan.py            # default shape sweep
    python benchmarks/bench_scan.py --repeat 20 --dtype float64

Each row times one forward and one backward call per repeat (best of
``--repeat``) after a warm-up call, so numba's compile time is excluded.
The two backends are also checked against each other on every shape.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from cmvim import kernels

# (batch, length, d_inner, d_state): toy encoder, toy decoder, full-width encoder
SHAPES = [(4, 32, 64, 16), (4, 64, 64, 16), (8, 129, 64, 16), (2, 256, 384, 16)]


def make_inputs(shape, dtype, seed=0):
    B, L, Di, N = shape
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(B, L, Di))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(B, L, Di)))
    A = -np.tile(np.arange(1, N + 1, dtype=np.float64), (Di, 1))
    Bm = rng.normal(size=(B, L, N))
    C = rng.normal(size=(B, L, N))
    D = np.ones(Di)
    return [np.ascontiguousarray(a, dtype=dtype) for a in (u, delta, A, Bm, C, D)]


def time_backend(backend, args, repeat):
    def once():
        y, hs = kernels.scan_forward(*args, kernels.ZOH, backend=backend)
        grads = kernels.scan_backward(np.ones_like(y), *args, hs, kernels.ZOH, backend=backend)
        return y, grads

    out = once()  # warm-up (compiles the numba kernels on first use)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        once()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'B':>3} {'L':>4} {'Di':>4} {'N':>3}  {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}  {'max rel diff':>12}")
    for shape in SHAPES:
        inputs = make_inputs(shape, args.dtype)
        t_np, (y_np, g_np) = time_backend("numpy", inputs, args.repeat)
        t_nb, (y_nb, g_nb) = time_backend("numba", inputs, args.repeat)
        diff = max(float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-30))
                   for a, b in zip((y_np,) + tuple(g_np), (y_nb,) + tuple(g_nb)))
        print(f"{shape[0]:>3} {shape[1]:>4} {shape[2]:>4} {shape[3]:>3}  {t_np * 1e3:9.2f} {t_nb * 1e3:9.2f} "
              f"{t_np / t_nb:7.1f}x  {diff:12.2e}")


if __name__ == "__main__":
    main()
