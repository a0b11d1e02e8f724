"""Time the compiled kernels against the numpy fallback (and the FFT route).

    python3 benchmarks/bench_kernels.py [--size 64] [--filters 24] [--ksize 5] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from unrollcam import _kernels_py, tensor_ops

try:
    from unrollcam import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--filters", type=int, default=24)
    p.add_argument("--ksize", type=int, default=5)
    p.add_argument("--rates", type=int, default=64 * 64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=10)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.channels, args.size, args.size))
    f = rng.standard_normal((args.filters, args.ksize, args.ksize))
    g = rng.standard_normal((args.channels, args.filters, args.size, args.size))
    rates = rng.uniform(0, 30, args.rates)
    u = rng.uniform(size=args.rates)
    kh = kw = args.ksize

    cases = {
        "bank_forward": (lambda k: k.bank_forward(x, f), lambda: tensor_ops.bank_forward(x, f, "fft")),
        "bank_adjoint": (lambda k: k.bank_adjoint(g, f), lambda: tensor_ops.bank_adjoint(g, f, "fft")),
        "bank_filter_grad": (lambda k: k.bank_filter_grad(x, g, kh, kw),
                             lambda: tensor_ops.bank_filter_grad(x, g, (kh, kw), "fft")),
        "poisson_inverse_cdf": (lambda k: k.poisson_inverse_cdf(rates, u), None),
    }
    print(f"image {args.channels}x{args.size}x{args.size}, {args.filters} filters {kh}x{kw}, {args.rates} rates")
    if _kernels is None:
        print("compiled extension not built; showing the fallback only")
    print(f"{'kernel':<20} {'native ms':>10} {'numpy ms':>10} {'fft ms':>8} {'speedup':>8}")
    for name, (call, fft) in cases.items():
        py = best_of(lambda: call(_kernels_py), args.repeat, args.number) * 1e3
        nat = best_of(lambda: call(_kernels), args.repeat, args.number) * 1e3 if _kernels else float("nan")
        ff = best_of(fft, args.repeat, args.number) * 1e3 if fft else float("nan")
        print(f"{name:<20} {nat:10.3f} {py:10.3f} {ff:8.3f} {py / nat:7.1f}x")


if __name__ == "__main__":
    main()
