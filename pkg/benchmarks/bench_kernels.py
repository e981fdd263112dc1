"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same inputs under both backends; outputs are
checked for equality before timing.
"""
import argparse
import timeit

import numpy as np

from qedg import kernels


def workloads(rng):
    a = rng.integers(0, 10, 200_000)
    b = rng.integers(0, 10, 200_000)
    votes = rng.integers(0, 10, (20_000, 49))
    thetas = rng.uniform(size=500)
    flips = rng.random((500, 5, 49)) < 0.1
    images = rng.random((512, 28, 28)).astype(np.float32)
    angles = rng.uniform(-15, 15, 512)
    return {
        "confusion_matrix": (a, b, 10),
        "majority_vote_rows": (votes, 10),
        "noisy_threshold_search": (thetas, flips),
        "rotate_nearest": (images, angles),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; only the NumPy backend is available")
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<24}" + "".join(f"{name + ' ms':>14}" for name in impls) + f"{'speedup':>10}")
    for name, call_args in workloads(np.random.default_rng(0)).items():
        outs = [impls[b][name](*call_args) for b in impls]
        assert all(np.array_equal(outs[0], o) for o in outs[1:]), f"{name}: backends disagree"
        ms = {
            b: 1e3 * min(timeit.repeat(lambda: impls[b][name](*call_args), number=1, repeat=args.repeat))
            for b in impls
        }
        speed = f"{ms['python'] / ms['cython']:.1f}x" if "cython" in ms else "-"
        print(f"{name:<24}" + "".join(f"{ms[b]:>14.2f}" for b in impls) + f"{speed:>10}")


if __name__ == "__main__":
    main()
