"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--repeat 200]

Set CLUSTERBAL_DISABLE_NUMBA=1 to confirm the fallback path is the one being
imported by the package itself; this script always times both explicitly.
"""

import argparse
import time

import numpy as np

from clusterbal import _kernels
from clusterbal.core import enumerate_patterns


def timeit(fn, args, repeat):
    fn(*args)  # warm-up / JIT
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    bits15 = np.ascontiguousarray(enumerate_patterns(15))
    probs15 = rng.uniform(0.05, 0.95, 15)
    probs_batch = rng.uniform(0.05, 0.95, (4000, 5))
    deps = np.array([3, 11, 7, 0, 14], dtype=np.int64)
    slots = rng.integers(0, 32, size=bits15.shape[0])
    weights = rng.standard_normal(bits15.shape[0])

    cases = {
        "pb_pmf (k=15)": (("pb_pmf",), (probs15,)),
        "pb_pmf_batch (4000x5)": (("pb_pmf_batch",), (probs_batch,)),
        "pattern_masses (2^15 x 15)": (("pattern_masses",), (bits15, probs15)),
        "slot_indices (2^15, 5 deps)": (("slot_indices",), (bits15, deps)),
        "count_slots (2^15, 5 deps)": (("count_slots",), (bits15, deps)),
        "weighted_slot_sums (2^15 -> 32)": (("weighted_slot_sums",), (slots, weights, 32)),
    }

    print(f"active backend: {_kernels.active_backend()}")
    header = f"{'kernel':34s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for label, ((name,), call_args) in cases.items():
        t_np = timeit(_kernels.IMPLS["numpy"][name], call_args, args.repeat)
        if "numba" in _kernels.IMPLS:
            t_nb = timeit(_kernels.IMPLS["numba"][name], call_args, args.repeat)
            print(f"{label:34s} {t_np*1e6:10.1f}us {t_nb*1e6:10.1f}us {t_np/t_nb:8.2f}x")
        else:
            print(f"{label:34s} {t_np*1e6:10.1f}us {'n/a':>12s} {'n/a':>9s}")


if __name__ == "__main__":
    main()
