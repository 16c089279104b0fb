"""Time the numba and numpy ranking kernels on evaluation-sized inputs.

    python3 benchmarks/bench_kernels.py [--queries 500] [--gallery 320] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from uncertain_retrieval import kernels


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--queries", type=int, default=500)
    parser.add_argument("--gallery", type=int, default=320)
    parser.add_argument("--width", type=int, default=4, help="valid ids per query for best_ranks")
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    sim = rng.uniform(-1, 1, size=(args.queries, args.gallery))
    targets = rng.integers(0, args.gallery, size=args.queries)
    valid = rng.integers(0, args.gallery, size=(args.queries, args.width))

    cases = [("target_ranks", (sim, targets)), ("best_ranks", (sim, valid))]
    print(f"{args.queries} queries x {args.gallery} gallery, best of {args.repeat}")
    for name, call_args in cases:
        row = [f"{name:>13}"]
        results = []
        for impl in ("numpy", "numba"):
            fn = getattr(kernels, f"{name}_{impl}")
            if fn is None:
                row.append(f"{impl}: unavailable")
                continue
            results.append(fn(*call_args))  # first call also compiles
            best = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
            row.append(f"{impl}: {best * 1e3:8.3f} ms")
        if len(results) == 2:
            assert np.array_equal(results[0], results[1])
        print("  ".join(row))


if __name__ == "__main__":
    main()
