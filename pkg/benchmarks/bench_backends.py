"""Compare the numba and pure-numpy kernel backends.

    python benchmarks/bench_backends.py [--n 16384] [--repeat 3]

Each kernel is warmed up once (so numba compilation is excluded) and the best
of ``--repeat`` runs is reported along with the max difference between the
two backends' outputs.
"""

import argparse
import time

import numpy as np

from anchorpc import _backend
from anchorpc.anchors import deterministic_fps, select_anchors
from anchorpc.cloud import PointCloud
from anchorpc.codec import decode, dmcd, encode


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=16384, help="points per cloud / rows per matrix")
    ap.add_argument("--k-fps", type=int, default=2048, help="FPS sample size")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    P = PointCloud(rng.uniform(size=(args.n, 3)))
    A = select_anchors(P, 8, "fps")
    D = encode(P, A)
    noisy = D.values + rng.normal(0, 0.01, D.values.shape).clip(-D.values, None)
    D2 = encode(PointCloud(rng.uniform(size=(args.n // 4, 3))), A)

    cases = {
        "fps": lambda: deterministic_fps(P, args.k_fps),
        "decode": lambda: decode(type(D)(noisy, A), workers=args.workers).cloud.points,
        "dmcd": lambda: dmcd(D, D2),
    }
    backends = ["numba", "numpy"] if _backend.HAS_NUMBA else ["numpy"]
    results = {}
    for name in backends:
        _backend.set_backend(name)
        for case, fn in cases.items():
            results[name, case] = best_of(fn, args.repeat)

    print(f"n={args.n} k_fps={args.k_fps} repeat={args.repeat} workers={args.workers}")
    print(f"{'kernel':<8}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}{'max_diff':>12}")
    for case in cases:
        row = f"{case:<8}" + "".join(f"{results[b, case][0]:>11.4f}s" for b in backends)
        if len(backends) == 2:
            t_nb, out_nb = results["numba", case]
            t_np, out_np = results["numpy", case]
            diff = float(np.max(np.abs(np.asarray(out_nb, float) - np.asarray(out_np, float))))
            row += f"{t_np / t_nb:>9.1f}x{diff:>12.2g}"
        print(row)


if __name__ == "__main__":
    main()
