"""Time the compiled row kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200]
"""

import argparse
import timeit

import numpy as np

from conceptfuse.core import _kernels_py

try:
    from conceptfuse.core import _kernels as _compiled
except ImportError:
    _compiled = None

SHAPES = [(16, 16), (64, 64), (512, 64), (4096, 128)]


def _cases(impl, x, gy, gain, bias):
    y = np.asarray(impl.softmax_rows(x.copy()))
    _, xhat, rstd = impl.layer_norm_forward(x, gain, bias, 1e-5)
    xhat, rstd = np.asarray(xhat), np.asarray(rstd)
    return {
        "softmax": lambda: impl.softmax_rows(x.copy()),
        "softmax_bwd": lambda: impl.softmax_rows_backward(y, gy),
        "layer_norm": lambda: impl.layer_norm_forward(x, gain, bias, 1e-5),
        "layer_norm_bwd": lambda: impl.layer_norm_backward(gy, xhat, rstd, gain),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = parser.parse_args()
    if _compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'shape':>12s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for shape in SHAPES:
        x = rng.standard_normal(shape).astype(args.dtype)
        gy = rng.standard_normal(shape).astype(args.dtype)
        gain = rng.standard_normal(shape[1]).astype(args.dtype)
        bias = rng.standard_normal(shape[1]).astype(args.dtype)
        slow = _cases(_kernels_py, x, gy, gain, bias)
        fast = _cases(_compiled, x, gy, gain, bias)
        for name in slow:
            t_py = min(timeit.repeat(slow[name], number=args.repeat, repeat=3)) / args.repeat * 1e6
            t_cy = min(timeit.repeat(fast[name], number=args.repeat, repeat=3)) / args.repeat * 1e6
            print(f"{name:16s} {str(shape):>12s} {t_py:10.1f} {t_cy:10.1f} {t_py / t_cy:7.2f}x")


if __name__ == "__main__":
    main()
