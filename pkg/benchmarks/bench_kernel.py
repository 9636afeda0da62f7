"""Time the compiled simulator kernel against the pure-Python twin.

    python3 benchmarks/bench_kernel.py [--trials 200] [--repeat 3] [--json out.json]

Each case runs both backends on the same seeded configuration, checks that
their per-trial arrays are bit-identical and prints the best-of-``repeat``
wall time with the speedup.
"""

import argparse
import json
import sys
import time

import numpy as np

from spotsgd import bidding, preemptible
from spotsgd.price_model import make_truncated_gaussian, make_uniform
from spotsgd.runtime import RuntimeModel
from spotsgd.simulator import SimConfig, available_backends, simulate


def cases(trials):
    rt = RuntimeModel.exponential(1.0)
    uni = make_uniform(0.2, 1.0)
    gauss = make_truncated_gaussian(0.6, 0.175, 0.2, 1.0)
    yield "one bid, uniform, J=1000", SimConfig(
        bidding.bid_plan(1000, 4, 4, 0.6, 0.6, uni, rt), rt, price=uni,
        redraw_interval="matched", trials=trials, seed=1)
    yield "two bids, Gaussian, mid-iteration redraw, J=500", SimConfig(
        bidding.bid_plan(500, 2, 4, 0.7, 0.5, gauss, rt), rt, price=gauss, trials=trials,
        seed=2, price_fixed_within_iteration=False, redraw_interval=1.0)
    yield "preemptible, geometric n0=2 eta=1.02, J=200", SimConfig(
        preemptible.ProvisionPlan(preemptible.WorkerSchedule.geometric(2, 1.02, 200), 0.3), rt,
        redraw_interval=1.0, trials=trials, seed=3)


def best_time(config, backend, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = simulate(config, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", metavar="FILE")
    args = ap.parse_args(argv)

    if "compiled" not in available_backends():
        print("compiled kernel is not built; only the Python backend is available",
              file=sys.stderr)
        return 1
    rows = []
    print(f"{'case':<50} {'compiled s':>11} {'python s':>10} {'speedup':>8}  parity")
    for name, config in cases(args.trials):
        tc, oc = best_time(config, "compiled", args.repeat)
        tp, op = best_time(config, "python", args.repeat)
        same = all(np.array_equal(getattr(oc, f), getattr(op, f))
                   for f in ("cost", "completion", "iterations", "idle"))
        rows.append({"case": name, "trials": args.trials, "compiled_s": tc, "python_s": tp,
                     "speedup": tp / tc, "identical": same})
        print(f"{name:<50} {tc:>11.4f} {tp:>10.4f} {tp / tc:>7.1f}x  {'ok' if same else 'DIFF'}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
