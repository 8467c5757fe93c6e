"""Time the compiled and numpy simulation kernels on the same workload.

    python3 benchmarks/bench_kernels.py [--obs 500] [--paths 40] [--repeat 3]
"""
import argparse
import time

import numpy as np

from orthoddc import backend, dgp, valuesim


def workload(n_obs, n_paths):
    model = dgp.default_model()
    table = dgp.OracleTable(model, dgp.default_truth())
    panel = dgp.simulate_panel(model, dgp.default_truth(), n_obs, 1, table=table)
    nuis = valuesim.oracle_tables(model, table, panel.x)
    sim = valuesim.SimConfig(n_paths=n_paths)
    reqs = [valuesim.Request(p) for p in (valuesim.OPTIMAL_POLICY,) + valuesim.default_deviations()]
    reqs.append(valuesim.Request(valuesim.OPTIMAL_POLICY, first_action=1, score=True))
    return model, nuis, sim, panel.s, reqs


def time_kernels(kern, model, nuis, sim, s0, reqs, repeat):
    simr = valuesim.Simulator(model, nuis, sim, kernels=kern)
    n = s0.size
    rows = np.arange(n)
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = simr.run(s0, rows, rows, reqs)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--obs", type=int, default=500)
    ap.add_argument("--paths", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    work = workload(args.obs, args.paths)
    kerns = [("python", backend.python)]
    if backend.compiled is not None:
        kerns.insert(0, ("cython", backend.compiled))
    res = {}
    for name, k in kerns:
        res[name] = time_kernels(k, *work, args.repeat)
        print(f"{name:>7}: {res[name][0]:.3f}s for {args.obs} starts x {args.paths} paths x {len(work[-1])} rollouts")
    if len(res) == 2:
        a, b = res["cython"][1], res["python"][1]
        diff = max(float(np.max(np.abs(x.mean - y.mean))) for x, y in zip(a, b))
        print(f"speedup {res['python'][0] / res['cython'][0]:.1f}x, max |mean diff| {diff:.1e}")


if __name__ == "__main__":
    main()
