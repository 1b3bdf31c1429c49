"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--minutes 43200]

Both backends are imported directly, so the ``UNCALIB_PURE_PYTHON`` switch
does not matter here.  Outputs are compared bit for bit before timing.
"""
import argparse
import timeit

import numpy as np

from uncalib import _kernels_py
from uncalib.preprocess import savgol_coefficients

try:
    from uncalib import _kernels as _kernels_cy
except ImportError:
    _kernels_cy = None


def scan_inputs(minutes, sensors, window, seed=0):
    rng = np.random.default_rng(seed)
    # regimes of three windows, each with its own rejection rate
    span = 3 * window
    rate = np.repeat(rng.random((minutes // span + 1, sensors)) ** 2, span, axis=0)[:minutes]
    u = rng.random((minutes, sensors))
    codes = np.where(u < rate, 1, np.where(u > 1 - rate / 4, -1, 0)).astype(np.int8)
    errors = rng.normal(size=(minutes, sensors))
    stamps = np.arange(minutes, dtype=np.int64)
    return codes, errors, stamps, np.full(sensors, 0.8), window


def run_scan(mod, codes, errors, stamps, thresholds, window):
    n = codes.shape[1]
    state = [np.zeros((n, window), np.uint8), np.zeros((n, window), np.uint8), np.zeros((n, window)),
             np.zeros(n, np.int64), np.zeros(n, np.int64), np.zeros(n, np.int64), np.zeros(n, np.int64),
             np.zeros(n, np.uint8)]
    upper = np.empty(codes.shape)
    lower = np.empty(codes.shape)
    t = pos = filled = 0
    fired = []
    while t < len(stamps):
        t, pos, filled, f = mod.scan(codes, errors, stamps, *state, thresholds, window, pos, filled, t,
                                     upper, lower)
        fired += f
    return upper, lower, fired


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--minutes", type=int, default=43200, help="stream length (default 30 days)")
    parser.add_argument("--sensors", type=int, default=17)
    parser.add_argument("--window", type=int, default=1440)
    args = parser.parse_args()

    if _kernels_cy is None:
        print("compiled kernels not built; run `python setup.py build_ext --inplace` first")
        return

    rng = np.random.default_rng(1)
    x = np.cumsum(rng.normal(size=args.minutes * args.sensors))
    coeffs = savgol_coefficients(31, 3)
    scan_args = scan_inputs(args.minutes, args.sensors, args.window)

    a = _kernels_py.sg_centered(x, coeffs)
    b = _kernels_cy.sg_centered(x, coeffs)
    assert a.tobytes() == b.tobytes(), "sg_centered outputs differ"
    ra, rb = run_scan(_kernels_py, *scan_args), run_scan(_kernels_cy, *scan_args)
    assert ra[2] == rb[2] and all(p.tobytes() == q.tobytes() for p, q in zip(ra[:2], rb[:2])), "scan outputs differ"

    print(f"{'kernel':<14}{'size':>22}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    cases = [
        ("sg_centered", f"{len(x)} x {len(coeffs)}",
         lambda: _kernels_py.sg_centered(x, coeffs), lambda: _kernels_cy.sg_centered(x, coeffs)),
        ("scan", f"{args.minutes} x {args.sensors}",
         lambda: run_scan(_kernels_py, *scan_args), lambda: run_scan(_kernels_cy, *scan_args)),
    ]
    for name, size, py, cy in cases:
        tp, tc = best_of(py, args.repeat), best_of(cy, args.repeat)
        print(f"{name:<14}{size:>22}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x")
    print(f"events fired during scan: {len(ra[2])}")


if __name__ == "__main__":
    main()
