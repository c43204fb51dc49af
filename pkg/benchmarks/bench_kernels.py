#!/usr/bin/env python3
"""Time the proxy-cost DP kernels with numba and with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are timed in one process through the ``backend=`` argument
(the numba run is warmed up first so compilation is not counted) and their
policy tables are checked for bit-identity. Running under
CLC_LQR_DISABLE_NUMBA=1 times the numpy kernel only.
"""
import argparse
import time

import numpy as np

from clc_lqr import _accel
from clc_lqr.clc_dp import GridSpec, build_policy_table, candidate_policy
from clc_lqr.model import CostSchedule

CASES = [
    ("paper grid, T=2", CostSchedule((0.0, 1.0, 1.0), (1.0, 1.0)), GridSpec.paper_default()),
    ("coarse grid, T=3", CostSchedule((0.0, 1.0, 1.0, 1.0), (1.0, 1.0, 1.0)),
     GridSpec(-2, 2, -3, 3, -2, 2, 41, 121, 21)),
]


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])
    print(f"numba available: {_accel.HAS_NUMBA}")
    for name, cost, g in CASES:
        beta = (-1.5,) * (cost.horizon - 1) + (-1.0,)
        tables = {}
        for be in backends:
            if be == "numba":
                build_policy_table(1.0, 1.0, cost, beta, GridSpec(-1, 1, -1, 1, -1, 1, 5, 5, 3), backend=be)
            dt, tables[be] = _time(lambda: build_policy_table(1.0, 1.0, cost, beta, g, backend=be), args.repeat)
            pts = tables[be].candidate(tables[be].n_candidates // 3).points
            dc, _ = _time(lambda: candidate_policy(tables[be], pts, backend=be), 10 * args.repeat)
            print(f"{name:18s} {be:6s} table {dt * 1e3:9.1f} ms   single candidate {dc * 1e3:7.2f} ms")
        if len(tables) == 2:
            same = all(np.array_equal(a, b) for a, b in zip(tables["numpy"].stage_index, tables["numba"].stage_index))
            print(f"{name:18s} tables identical: {same}")


if __name__ == "__main__":
    main()
