"""Time the compiled graph kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 10 20 40] [--repeat 5]

Each row reports the best-of-``repeat`` wall time per call for both
backends, their ratio, and whether the outputs are identical.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from roadpriv import _pykernels
from roadpriv.kernels import compiled_backend
from roadpriv.roadnet import grid_graph, prune_by_speed


def best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def cases(n: int):
    g = grid_graph(n, n, cell_km=0.1)
    ip, ix, w = g.indptr, g.indices, g.weights[0]
    mid = (n // 2) * n + n // 2
    ball = prune_by_speed(g, mid, 30.0)
    mask = np.zeros(g.n_nodes, dtype=np.uint8)
    mask[ball] = 1
    rng = np.random.default_rng(0)
    starts = np.tile(np.arange(g.n_nodes, dtype=np.int64), 2)
    uniforms = rng.random((len(starts), 19))
    yield "dijkstra full", lambda k: k.dijkstra(ip, ix, w, 0)
    yield "dijkstra ball 30 s", lambda k: k.dijkstra(ip, ix, w, mid, mask, 30.0)
    yield "node2vec walks", lambda k: k.node2vec_walks(ip, ix, starts, 20, 0.5, 2.0, uniforms)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[10, 20, 40], help="grid side lengths")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if compiled_backend is None:
        print("compiled extension not built; only the Python backend is available")
    print(f"{'grid':>6} {'kernel':<20} {'python ms':>10} {'compiled ms':>12} {'speedup':>8} {'identical':>9}")
    for n in args.sizes:
        for name, call in cases(n):
            t_py = best_of(lambda: call(_pykernels), args.repeat) * 1e3
            if compiled_backend is None:
                print(f"{n:>3}x{n:<2} {name:<20} {t_py:>10.3f} {'-':>12} {'-':>8} {'-':>9}")
                continue
            t_c = best_of(lambda: call(compiled_backend), args.repeat) * 1e3
            ok = same(call(_pykernels), call(compiled_backend))
            print(f"{n:>3}x{n:<2} {name:<20} {t_py:>10.3f} {t_c:>12.3f} {t_py / t_c:>7.1f}x {str(ok):>9}")


if __name__ == "__main__":
    main()
