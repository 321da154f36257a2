"""Compare the compiled and NumPy kernel backends on representative sizes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints the median time per call for each kernel and backend and the speed-up
of the compiled one, after checking that both return identical arrays.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from scpo import _pykernels

try:
    from scpo import _ckernels
except ImportError:  # not built
    _ckernels = None


def chain_ball(n_states: int, radius: int):
    """CSR balls of a 1-D chain where each state sees ``radius`` cells either side."""
    indptr, indices = [0], []
    for s in range(n_states):
        members = range(max(0, s - radius), min(n_states, s + radius + 1))
        indices.extend(members)
        indptr.append(len(indices))
    return np.array(indptr, dtype=np.intp), np.array(indices, dtype=np.intp)


def median_time(fn, args, repeat: int) -> float:
    fn(*args)  # warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    for n, radius in ((200, 2), (2000, 5), (20000, 10)):
        indptr, indices = chain_ball(n, radius)
        yield f"ball_min S={n} r={radius}", "ball_min", (rng.normal(size=n), indptr, indices)
    for n, n_lam in ((50, 200), (100, 1000), (200, 2000)):
        grid = np.arange(n, dtype=np.float64)
        penalty = np.abs(grid[:, None] - grid[None, :])
        yield f"lagrangian_min S={n} L={n_lam}", "lagrangian_min", (rng.normal(size=n), penalty,
                                                                     np.linspace(0.0, 10.0, n_lam))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; only the NumPy backend is available", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'case':34s} {'cython_ms':>10s} {'python_ms':>10s} {'speedup':>8s}")
    for label, name, kargs in cases(rng):
        fast, slow = getattr(_ckernels, name), getattr(_pykernels, name)
        if not np.array_equal(fast(*kargs), slow(*kargs)):
            print(f"{label}: backends disagree", file=sys.stderr)
            return 1
        tc, tp = median_time(fast, kargs, args.repeat), median_time(slow, kargs, args.repeat)
        print(f"{label:34s} {tc * 1e3:10.3f} {tp * 1e3:10.3f} {tp / tc:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
