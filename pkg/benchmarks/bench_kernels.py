"""Compare the compiled and numpy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Sizes follow the planner's defaults: 400 map samples, a DE generation of
30 candidates evaluated against the map, and 2000 x 2000 separation tests.
"""

import argparse
import timeit

import numpy as np

from hybrid_pomdp import _kernels_py

try:
    from hybrid_pomdp import _kernels as _compiled
except ImportError:
    _compiled = None


def _cases(rng):
    samples = rng.uniform(-6, 15, size=(400, 2))
    weights = rng.standard_normal(400)
    population = rng.uniform(-6, 15, size=(30, 2))
    grid = rng.uniform(-6, 15, size=(40_000, 2))
    a = rng.uniform(-6, 15, size=(2000, 2))
    b = rng.uniform(-6, 15, size=(2000, 2))
    return {
        "rbf matrix 400x400": lambda k: k.multiquadric_matrix(samples, samples, 1.3),
        "rbf eval 30 pts": lambda k: k.multiquadric_eval(population, samples, weights, 1.3),
        "rbf eval 40k pts": lambda k: k.multiquadric_eval(grid, samples, weights, 1.3),
        "min distance 2000x2000": lambda k: k.min_cross_distance(a, b),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = [("python", _kernels_py)]
    if _compiled is not None:
        backends.append(("cython", _compiled))
    else:
        print("compiled kernels not built; timing the numpy backend only")
    cases = _cases(np.random.default_rng(0))
    print(f"{'case':<26}" + "".join(f"{name:>12}" for name, _ in backends) + "    speedup")
    for label, fn in cases.items():
        times = []
        for _, impl in backends:
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(impl), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
            times.append(best)
        row = f"{label:<26}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:>8.2f}x"
        print(row)


if __name__ == "__main__":
    main()
