#!/usr/bin/env python3
"""Timing comparison of the compiled and pure-Python sweep kernels.

Runs the hot operations (extremal sweep, first/second-order variational
sweeps, replay, determinant probe) on representative problems and prints a
table of per-call times and speedups.

Usage: python benchmarks/bench_backends.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from conjpt import available_backends
from conjpt import conjugate as cj
from conjpt import pontryagin as pt
from conjpt import replay as rp
from conjpt.catalog import build


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(repeat: int) -> None:
    cases = []
    for name, z in (("bench1d", np.array([0.3])),
                    ("cov2d", np.array([0.4, -0.7])),
                    ("affine2d", np.array([0.5, -0.3]))):
        spec = build(name)
        v = np.ones(spec.n) / np.sqrt(spec.n)
        traj = {be: pt.solve_extremal(spec, z, steps=400, backend=be)
                for be in available_backends()}
        cases.append((name, spec, z, v, traj))

    ops = {
        "extremal N=400": lambda spec, z, v, traj, be:
            pt.solve_extremal(spec, z, steps=400, backend=be),
        "variational (1st)": lambda spec, z, v, traj, be:
            pt.solve_variational(traj[be], backend=be),
        "variational (2nd)": lambda spec, z, v, traj, be:
            pt.solve_variational(traj[be], direction=v, backend=be),
        "replay": lambda spec, z, v, traj, be:
            rp.replay_cost(spec, z + 0.01 * v, z, steps=400, backend=be),
        "det probe": lambda spec, z, v, traj, be:
            cj.det_xz(spec, z, steps=400, backend=be),
    }

    backends = available_backends()
    print(f"backends available: {', '.join(backends)} (best of {repeat})")
    width = max(len(k) for k in ops)
    for name, spec, z, v, traj in cases:
        print(f"\n== {name} (n={spec.n}, m={spec.m}) ==")
        header = f"{'operation':{width}}  " + "  ".join(f"{be:>12}" for be in backends)
        if len(backends) == 2:
            header += f"  {'speedup':>9}"
        print(header)
        for label, op in ops.items():
            times = {}
            for be in backends:
                times[be] = _best_of(lambda: op(spec, z, v, traj, be), repeat)
            row = f"{label:{width}}  " + "  ".join(
                f"{times[be] * 1e3:>10.2f}ms" for be in backends)
            if len(backends) == 2:
                row += f"  {times['python'] / times['compiled']:>8.1f}x"
            print(row)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    bench(args.repeat)


if __name__ == "__main__":
    main()
