"""Compare the compiled and numpy simplex kernels on random balance problems.

    python3 benchmarks/bench_solver.py --rows 100 --donors 49 --repeat 50
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mosynth import _afw_py, simplex
from mosynth.simplex import QpProblem


def _kernels():
    out = {"python": _afw_py}
    try:
        from mosynth import _afw

        out["compiled"] = _afw
    except ImportError:
        pass
    return out


def _time(problems, repeat: int) -> tuple[float, list]:
    sols = []
    start = time.perf_counter()
    for _ in range(repeat):
        sols = [simplex.solve(p) for p in problems]
    return (time.perf_counter() - start) / (repeat * len(problems)), sols


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=100)
    ap.add_argument("--donors", type=int, default=49)
    ap.add_argument("--problems", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    problems = [
        QpProblem(rng.normal(size=(args.rows, args.donors)), rng.normal(size=args.rows))
        for _ in range(args.problems)
    ]
    results = {}
    original = simplex._kernel
    for name, kernel in _kernels().items():
        simplex._kernel = kernel
        try:
            per_solve, sols = _time(problems, args.repeat)
        finally:
            simplex._kernel = original
        results[name] = (per_solve, sols)
        iters = np.mean([s.iterations for s in sols])
        print(f"{name:>9}: {per_solve * 1e3:8.3f} ms/solve  mean iterations {iters:.0f}")
    if len(results) == 2:
        (tp, sp), (tc, sc) = results["python"], results["compiled"]
        diff = max(abs(a.objective - b.objective) for a, b in zip(sp, sc))
        print(f"  speedup: {tp / tc:.1f}x  max objective difference {diff:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
