"""Compare the compiled and pure-Python kernels on nearest-vertex and containment queries.

    python benchmarks/bench_kernels.py [--points 20000] [--queries 5000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from artihoi.geometry import Mesh, MeshContainment, NearestIndex
from artihoi.shapes import icosphere


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--queries", type=int, default=5000)
    ap.add_argument("--subdivisions", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    ref = rng.uniform(-1, 1, (args.points, 3))
    small = ref[:1000]
    query = rng.uniform(-1.2, 1.2, (args.queries, 3))
    v, f = icosphere(args.subdivisions, 1.0)
    mesh = Mesh(v, f, np.zeros(len(v), dtype=np.int64))

    cases = {
        f"nearest grid ({args.points} ref)": lambda b: NearestIndex(ref, b).query(query)[0],
        "nearest brute (1000 ref)": lambda b: NearestIndex(small, b).query(query)[0],
        f"contains ({len(f)} faces)": lambda b: MeshContainment(mesh, backend=b).contains(query),
    }
    print(f"{'case':32s} {'cython (s)':>11s} {'python (s)':>11s} {'speedup':>8s}")
    for name, fn in cases.items():
        tc, oc = best_of(lambda: fn("cython"), args.repeat)
        tp, op = best_of(lambda: fn("python"), args.repeat)
        assert np.array_equal(oc, op), f"backends disagree on {name}"
        print(f"{name:32s} {tc:11.4f} {tp:11.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
