"""Time the compiled kernels against the numpy/scipy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from renalparse import _fallback, segmetrics
from renalparse.phantom import PhantomSpec, generate_phantom

try:
    from renalparse import _kernels
except ImportError:
    _kernels = None

def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)

def workloads():
    _, labels = generate_phantom(PhantomSpec(shape=(64, 64, 64), seed=0))
    kidney = np.ascontiguousarray(labels.data == 1, dtype=np.uint8)
    rng = np.random.default_rng(0)
    noisy = np.ascontiguousarray(rng.random((64, 64, 64)) < 0.3, dtype=np.uint8)
    _, shifted = generate_phantom(PhantomSpec(shape=(64, 64, 64), seed=1))
    a = np.ascontiguousarray(segmetrics.extract_surface(labels.data == 1, labels.spacing), dtype=np.float64)
    b = np.ascontiguousarray(segmetrics.extract_surface(shifted.data == 1, labels.spacing), dtype=np.float64)
    return [
        ("label_components kidney 64^3 c26", lambda m: m.label_components(kidney, 26)),
        ("label_components noise 64^3 c6", lambda m: m.label_components(noisy, 6)),
        ("label_components noise 64^3 c26", lambda m: m.label_components(noisy, 26)),
        (f"min_distances {len(a)}x{len(b)} pts", lambda m: m.min_distances(a, b)),
    ]

def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("python", _fallback)] + ([("cython", _kernels)] if _kernels is not None else [])
    if _kernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'workload':40s}" + "".join(f"{name:>12s}" for name, _ in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in workloads():
        ts = [best_of(lambda: fn(mod), args.repeat) for _, mod in backends]
        row = f"{name:40s}" + "".join(f"{t * 1e3:10.2f}ms" for t in ts)
        if len(ts) > 1:
            row += f"{ts[0] / ts[1]:11.2f}x"
        print(row)

if __name__ == "__main__":
    main()
