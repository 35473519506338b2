"""Time the numba and pure-numpy paths of each hot kernel.

Usage: python benchmarks/bench_kernels.py [--repeat N]
Shapes mirror the default training run: batch 4, 48 channels, 64 frames,
n_fft 1024 / hop 256, and the pitch tracker's 1024-sample frames.
"""
import argparse
import timeit

import numpy as np

from mpvoc import _kernels as K


def cases(rng):
    frames = rng.standard_normal((4, 64, 1024))
    x = rng.standard_normal((4, 48, 64))
    w = rng.standard_normal((48, 7))
    g = rng.standard_normal((4, 48, 64))
    pitch = rng.standard_normal((61, 1024))
    return [
        ("overlap_add", lambda: K.overlap_add_np(frames, 256), lambda: K.overlap_add_nb(frames, 256)),
        ("depthwise_conv1d", lambda: K.depthwise_conv1d_np(x, w, 3), lambda: K.depthwise_conv1d_nb(x, w, 3)),
        ("depthwise_conv1d_grad", lambda: K.depthwise_conv1d_grad_np(x, w, g, 3),
         lambda: K.depthwise_conv1d_grad_nb(x, w, g, 3)),
        ("nccf", lambda: K.nccf_np(pitch, 29, 320), lambda: K.nccf_nb(pitch, 29, 320)),
    ]


def best_ms(fn, repeat):
    fn()  # warm-up (and JIT compile)
    n = 5
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if K.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, np_fn, nb_fn in cases(rng):
        a, b = np_fn(), nb_fn()
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, atol=1e-9)
        t_np, t_nb = best_ms(np_fn, args.repeat), best_ms(nb_fn, args.repeat)
        print(f"{name:24s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
