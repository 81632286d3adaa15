"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from geomalloc import _kernels_py

try:
    from geomalloc import _ckernels
except ImportError:
    _ckernels = None


def cases():
    rng = np.random.default_rng(0)
    for bits in (12, 16, 20):
        # long free runs and scattered holes, like a fragmented heap
        occ = (rng.random(1 << bits) < 0.3).astype(np.uint8)
        occ[: 1 << (bits - 2)] = 0
        yield f"canonical_niches n={bits}", "canonical_niches", (occ, bits, 0)
    for k in (0, 3):
        yield f"ledge_totals 2^20 k={k}", "ledge_totals", (1 << 20, 2, k)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = [("numpy", _kernels_py)]
    if _ckernels is not None:
        backends.append(("cython", _ckernels))
    else:
        print("compiled extension not built; timing the fallback only")
    print(f"{'case':32} " + " ".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for label, func, fargs in cases():
        times = []
        results = []
        for _, module in backends:
            fn = getattr(module, func)
            results.append(fn(*fargs))
            times.append(min(timeit.repeat(lambda: fn(*fargs), number=1, repeat=args.repeat)))
        if len(results) == 2:
            a, b = results
            same = sorted(a) == sorted(b) if isinstance(a, list) else np.array_equal(a, b)
            if not same:
                raise SystemExit(f"{label}: backends disagree")
        row = " ".join(f"{t * 1e3:10.2f}ms" for t in times)
        speed = f"{times[0] / times[1]:8.1f}x" if len(times) == 2 else ""
        print(f"{label:32} {row} {speed}")


if __name__ == "__main__":
    main()
