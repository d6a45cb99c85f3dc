"""Compare the numba and numpy kernel backends on timing and output agreement.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from segdetect import _kernels
from segdetect.detectors import rbf_kernel


def _best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    """Kernel calls at the shapes of the default network on 64x64 images."""
    out = {}
    for name, (n, cin, cout, k) in {"l1": (8, 3, 16, 3), "l2": (8, 16, 32, 3),
                                    "l2_single": (1, 16, 32, 3), "head": (8, 32, 5, 1)}.items():
        p = k // 2
        xp = rng.normal(size=(n, 64 + 2 * p, 64 + 2 * p, cin))
        w = rng.normal(size=(k, k, cin, cout))
        b = rng.normal(size=cout)
        g = rng.normal(size=(n, 64, 64, cout))
        out[f"conv_forward[{name}]"] = lambda be, xp=xp, w=w, b=b: be.conv_forward(xp, w, b, 1)
        out[f"conv_grad_input[{name}]"] = (lambda be, g=g, w=w, h=64 + 2 * p:
                                           be.conv_backward_input(g, w, 1, h, h))
        out[f"conv_grad_weight[{name}]"] = (lambda be, xp=xp, g=g, k=k:
                                            be.conv_backward_weight(xp, g, 1, k))
    pts = rng.normal(size=(200, 8))
    K = rbf_kernel(pts, pts, 1.0 / 8)
    out["smo_one_class"] = lambda be: be.smo_one_class(K, 20.0, 1e-6, 100000)[0]
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    if _kernels.NUMBA is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>9}{'max |diff|':>13}")
    for name, fn in cases(rng).items():
        t_np = _best_of(lambda: fn(_kernels.NUMPY), args.repeat)
        t_nb = _best_of(lambda: fn(_kernels.NUMBA), args.repeat)
        diff = np.abs(np.asarray(fn(_kernels.NUMPY)) - np.asarray(fn(_kernels.NUMBA))).max()
        print(f"{name:<28}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.2f}{diff:>13.2e}")


if __name__ == "__main__":
    main()
