"""Time the compiled im2col/col2im kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from cdiffset import _fallback

try:
    from cdiffset import _kernels
except ImportError:
    _kernels = None

# shapes seen in a batch-8 denoiser step on 64x64 images (8x8 latents)
CASES = [
    ("enc level 0", (8, 32, 8, 8), 3, 1, 1),
    ("enc level 1", (8, 64, 4, 4), 3, 1, 1),
    ("downsample", (8, 32, 8, 8), 3, 2, 1),
    ("vae stem", (8, 3, 64, 64), 3, 2, 1),
]


def bench(impl, shape, k, stride, pad, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape).astype(np.float32)
    cols = impl.im2col(x, k, stride, pad)
    g = rng.standard_normal(cols.shape)
    fwd = min(timeit.repeat(lambda: impl.im2col(x, k, stride, pad), number=10, repeat=repeat)) / 10
    bwd = min(timeit.repeat(lambda: impl.col2im(g, *shape, k, stride, pad), number=10, repeat=repeat)) / 10
    return fwd, bwd, cols, impl.col2im(g, *shape, k, stride, pad)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'case':<12} {'op':<7} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for name, shape, k, s, p in CASES:
        nf, nb, ncols, nimg = bench(_fallback, shape, k, s, p, args.repeat)
        if _kernels is None:
            print(f"{name:<12} {'im2col':<7} {nf * 1e6:10.1f}")
            print(f"{name:<12} {'col2im':<7} {nb * 1e6:10.1f}")
            continue
        cf, cb, ccols, cimg = bench(_kernels, shape, k, s, p, args.repeat)
        assert np.array_equal(ncols, ccols) and np.array_equal(nimg, cimg), "backends disagree"
        print(f"{name:<12} {'im2col':<7} {nf * 1e6:10.1f} {cf * 1e6:10.1f} {nf / cf:8.2f}")
        print(f"{name:<12} {'col2im':<7} {nb * 1e6:10.1f} {cb * 1e6:10.1f} {nb / cb:8.2f}")


if __name__ == "__main__":
    main()
