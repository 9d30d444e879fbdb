"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both variants are imported directly, so the ``LRRNET_NUMBA`` flag does not
matter here. Outputs are compared before timing.
"""
import argparse
import time

import numpy as np

from lrrnet import kernels as K


def best_of(fn, repeat):
    fn()  # warm up (and compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x = rng.standard_normal((8, 32, 34, 34)).astype(np.float32)
    cols = K.im2col_numpy(x, 3, 1, 32, 32)
    mask = rng.uniform(size=(256, 256)) > 0.97
    img = rng.uniform(size=(256, 200))
    d = K.patch_build_numpy(img, 50, 10)
    return [
        ("im2col 8x32x34x34 k3", lambda: K.im2col_numpy(x, 3, 1, 32, 32), lambda: K.im2col_numba(x, 3, 1, 32, 32)),
        ("col2im 8x32x34x34 k3", lambda: K.col2im_numpy(cols, 34, 34, 3, 1, 32, 32), lambda: K.col2im_numba(cols, 34, 34, 3, 1, 32, 32)),
        ("label8 256x256", lambda: K.label8_numpy(mask), lambda: K.label8_numba(mask)),
        ("patch_build 256x200 p50 s10", lambda: K.patch_build_numpy(img, 50, 10), lambda: K.patch_build_numba(img, 50, 10)),
        ("patch_fold 256x200 p50 s10", lambda: K.patch_fold_numpy(d, 256, 200, 50, 10), lambda: K.patch_fold_numba(d, 256, 200, 50, 10)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and np.allclose(a, b, rtol=1e-6, atol=1e-6)
    return a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20, help="timed repetitions per kernel (best is reported)")
    ap.add_argument("--seed", type=int, default=0, help="seed for the random inputs")
    args = ap.parse_args()
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, np_fn, nb_fn in cases(np.random.default_rng(args.seed)):
        if not same(np_fn(), nb_fn()):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = best_of(np_fn, args.repeat)
        t_nb = best_of(nb_fn, args.repeat)
        print(f"{name:32s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
