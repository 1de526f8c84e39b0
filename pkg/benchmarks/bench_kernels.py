"""Compiled vs numpy top-k selection on the shapes the pipeline uses.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Shapes: kNN over a 10k-reference store (batch of queries), top-500 of 1200
attention values, and 5-NN rows of a 500x500 similarity matrix.
"""

import argparse
import json
import statistics
import time

import numpy as np

from placerank import kernels

CASES = {
    "knn_64x10000_k100": ((64, 10_000), 100),
    "select_1x1200_k500": ((1, 1200), 500),
    "pairs_500x500_k5": ((500, 500), 5),
    "pairs_1000x1000_k5": ((1000, 1000), 5),
}


def median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if kernels._compiled is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    report = {}
    for name, (shape, k) in CASES.items():
        scores = rng.normal(size=shape).astype(np.float32)
        a = kernels.topk_rows(scores, k, backend="cython")
        b = kernels.topk_rows(scores, k, backend="python")
        assert np.array_equal(a, b), name
        cy = median_ms(lambda: kernels.topk_rows(scores, k, backend="cython"), args.repeats)
        py = median_ms(lambda: kernels.topk_rows(scores, k, backend="python"), args.repeats)
        report[name] = {"cython_ms": round(cy, 4), "numpy_ms": round(py, 4), "speedup": round(py / cy, 2)}
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
