"""Command-line front end: ``spotsgd <command> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 deadline infeasible, 4 error
target below the reachable floor, 5 Q(eps) outside the two-bid range,
6 price trace ended before the job, 7 a validation check failed.

Every command writes a manifest sidecar (resolved options, seed, version,
input digests, outputs) unless ``--no-manifest`` is given.  Outputs carry no
timestamps, so reruns with the same manifest are byte-identical.
"""

import argparse
import csv
import hashlib
import json
import math
import os
import sys

from spotsgd import __version__, bidding, preemptible
from spotsgd.convergence import SgdConstants, read_flat_config
from spotsgd.errors import SpotSgdError
from spotsgd.price_model import (fit_empirical, load_trace, make_truncated_gaussian, make_uniform,
                                 model_from_dict)
from spotsgd.runtime import FAMILIES, RuntimeModel

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 2, 7
SEED_ENV = "SPOTSGD_SEED"
CONFIG_KEYS = ("L", "c", "mu", "mu_G", "M", "M_V", "alpha", "G0",
               "runtime_family", "rate", "shift", "fixed_time", "overhead")


class UsageError(Exception):
    pass


# -- shared option groups --------------------------------------------------------------

def _add_price(p, required=True):
    g = p.add_argument_group("price model")
    g.add_argument("--price-model", metavar="JSON", help="model file written by fit-prices")
    g.add_argument("--uniform", nargs=2, type=float, metavar=("LOW", "HIGH"))
    g.add_argument("--gaussian", nargs=4, type=float, metavar=("MEAN", "VAR", "LOW", "HIGH"),
                   help="Gaussian truncated to [LOW, HIGH]; VAR is a variance")
    g.add_argument("--as-std", action="store_true", help="read VAR of --gaussian as a std dev")
    g.add_argument("--trace", metavar="CSV", help="timestamp,price trace")


def _add_constants(p):
    g = p.add_argument_group("SGD constants (a --config file overrides these)")
    for key, default in (("L", 1.0), ("c", 0.5), ("mu", 1.0), ("mu_G", 1.0), ("M", 1.0),
                         ("M_V", 0.0), ("alpha", 0.2), ("G0", 1.0)):
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float, default=default)


def _add_runtime(p):
    g = p.add_argument_group("runtime model (a --config file overrides these)")
    g.add_argument("--runtime-family", dest="runtime_family", choices=FAMILIES,
                   default="exponential")
    g.add_argument("--rate", type=float, default=1.0, help="per-worker gradient rate, 1/s")
    g.add_argument("--shift", type=float, default=0.0)
    g.add_argument("--fixed-time", dest="fixed_time", type=float, default=1.0)
    g.add_argument("--overhead", type=float, default=0.0, help="server overhead per iteration, s")


def _add_common(p):
    p.add_argument("--config", metavar="FILE", help="flat key = value file; overrides flags")
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    p.add_argument("--out", metavar="FILE", help="write the JSON result here as well as stdout")
    p.add_argument("--manifest", metavar="FILE", help="manifest path (default: next to --out, "
                   "or <command>.manifest.json)")
    p.add_argument("--no-manifest", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="spotsgd", description=(
        "Bidding and provisioning plans for synchronous SGD on spot and preemptible instances."))
    ap.add_argument("--version", action="version", version=f"spotsgd {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-prices", help="fit or describe a price model")
    _add_price(p)
    _add_common(p)
    p.add_argument("--model-out", metavar="JSON", help="write the serialized model here")

    p = sub.add_parser("optimal-bid", help="cheapest single bid meeting eps and the deadline")
    _add_price(p)
    _add_constants(p)
    _add_runtime(p)
    _add_common(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--deadline", type=float, required=True, help="seconds")
    p.add_argument("--n", type=int, required=True)

    p = sub.add_parser("optimal-two-bids", help="two-group bids for fixed or searched n1 and J")
    _add_price(p)
    _add_constants(p)
    _add_runtime(p)
    _add_common(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--deadline", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--n1", type=int)
    p.add_argument("--J", type=int)
    p.add_argument("--search", choices=("none", "group-size", "iterations"), default="none",
                   help="co-optimize n1 (needs --J) or J (needs --n1)")

    p = sub.add_parser("optimize-workers", help="joint worker count and iterations under preemption")
    _add_constants(p)
    _add_common(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--deadline", type=float, required=True)
    p.add_argument("--iteration-rate", type=float,
                   help="iterations per second; default (1 - q^n-ref)/iteration-time")
    p.add_argument("--q", type=float, default=0.0)
    p.add_argument("--iteration-time", type=float, default=1.0)
    p.add_argument("--n-ref", type=int, default=1, help="worker count used to compute the rate")
    p.add_argument("--d", default="1", help="inverse-moment coefficient, or 'auto' to fit "
                   "it to the binomial preemption law")

    p = sub.add_parser("optimize-eta", help="geometric worker-growth rate")
    _add_constants(p)
    _add_runtime(p)
    _add_common(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--deadline", type=float, required=True)
    p.add_argument("--n0", type=int, default=1)
    p.add_argument("--q", type=float, default=0.0)
    p.add_argument("--chi", type=float, default=1.0)
    p.add_argument("--d", default="1", help="coefficient in E[1/y] <= d/n^chi, or 'auto' to "
                   "fit it to the binomial preemption law with --q and --chi")
    p.add_argument("--J", type=int, help="fixed iteration count; omit to search J as well")
    p.add_argument("--iteration-time", type=float, default=1.0)
    p.add_argument("--straggler", action="store_true",
                   help="per-iteration time (log n0 + (j-1) log eta)/rate + overhead")
    p.add_argument("--max-workers", type=float, default=1e6)
    p.add_argument("--max-iterations", type=int, default=100_000)

    p = sub.add_parser("simulate", help="Monte Carlo run of a plan")
    _add_price(p)
    _add_constants(p)
    _add_runtime(p)
    _add_common(p)
    p.add_argument("--plan", metavar="JSON", help="plan written by optimal-bid/optimal-two-bids")
    p.add_argument("--b1", type=float)
    p.add_argument("--b2", type=float)
    p.add_argument("--n1", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--J", type=int)
    p.add_argument("--baseline", action="store_true", help="bid the maximum price (never paused)")
    p.add_argument("--q", type=float, help="preemptible mode: per-worker preemption probability")
    p.add_argument("--eta", type=float, help="preemptible mode: geometric growth rate")
    p.add_argument("--unit-price", type=float, default=1.0)
    p.add_argument("--stages", metavar="N1,N,ITERS;...", help="dynamic re-bidding stages")
    p.add_argument("--eps", type=float)
    p.add_argument("--deadline", type=float)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--redraw-interval", default="4",
                   help="idle slot in seconds, or 'matched' (mean running iteration)")
    p.add_argument("--mid-iteration-redraw", action="store_true",
                   help="redraw prices during iterations (interrupted iterations restart)")
    p.add_argument("--trace-start", type=float, default=0.0, help="offset into the trace, s")
    p.add_argument("--trials-csv", metavar="CSV")
    p.add_argument("--trajectory-csv", metavar="CSV")
    p.add_argument("--backend", choices=("compiled", "python"))

    p = sub.add_parser("validate", help="run self-check suites")
    p.add_argument("--suite", choices=("formulas", "bounds", "optimizers", "all"), default="all")
    p.add_argument("--summary-csv", metavar="CSV")
    _add_common(p)
    return ap


# -- argument resolution ---------------------------------------------------------------

def _apply_config(args):
    """Values from --config replace the corresponding flags."""
    if not getattr(args, "config", None):
        return {}
    with open(args.config) as fh:
        values = read_flat_config(fh.read())
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown key {key!r} in {args.config}; allowed: "
                             + ", ".join(CONFIG_KEYS))
        if not hasattr(args, key):
            raise UsageError(f"key {key!r} does not apply to {args.command}")
        if key == "runtime_family":
            if raw.strip() not in FAMILIES:
                raise UsageError(f"runtime_family must be one of {', '.join(FAMILIES)}")
            setattr(args, key, raw.strip())
        else:
            setattr(args, key, float(raw))
    return values


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _price(args, required=True):
    chosen = [name for name in ("price_model", "uniform", "gaussian", "trace")
              if getattr(args, name, None) is not None]
    if len(chosen) > 1 and not (set(chosen) == {"trace", "price_model"}):
        raise UsageError("give only one of --price-model, --uniform, --gaussian, --trace")
    if getattr(args, "price_model", None):
        with open(args.price_model) as fh:
            return model_from_dict(json.load(fh)), None
    if getattr(args, "uniform", None):
        return make_uniform(*args.uniform), None
    if getattr(args, "gaussian", None):
        m, v, lo, hi = args.gaussian
        return make_truncated_gaussian(m, v, lo, hi, as_std=args.as_std), None
    if getattr(args, "trace", None):
        trace = load_trace(args.trace)
        return fit_empirical(trace), trace
    if required:
        raise UsageError("a price model is required (--uniform, --gaussian, --trace or --price-model)")
    return None, None


def _constants(args):
    return SgdConstants(**{k: float(getattr(args, k)) for k in
                           ("L", "c", "mu", "mu_G", "M", "M_V", "alpha", "G0")})


def _runtime(args):
    return RuntimeModel(family=args.runtime_family, rate=args.rate, shift=args.shift,
                        fixed_time=args.fixed_time, overhead=args.overhead)


def _resolve_d(args, chi=1.0):
    if str(args.d).strip().lower() == "auto":
        law = preemptible.PreemptionLaw("binomial", q=args.q, chi=chi)
        return preemptible.fit_bound_coefficient(law, chi)
    try:
        return float(args.d)
    except ValueError:
        raise UsageError("--d must be a number or 'auto'") from None


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _dumps(obj):
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        try:
            obj = obj.item()
        except (ValueError, AttributeError):
            obj = obj.tolist()
            return _clean(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


_NOT_CONFIG = {"manifest", "no_manifest", "out", "threads"}


def _write_manifest(args, outputs):
    if args.no_manifest:
        return None
    path = args.manifest
    if path is None:
        path = (args.out + ".manifest.json") if args.out else f"{args.command}.manifest.json"
    inputs = {}
    for name in ("config", "price_model", "trace", "plan"):
        value = getattr(args, name, None)
        if value:
            inputs[value] = _digest(value)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG}
    manifest = {
        "command": args.command,
        "configuration": resolved,
        "seed": _seed(args),
        "version": __version__,
        "inputs": inputs,
        "outputs": sorted(o for o in outputs if o),
    }
    with open(path, "w") as fh:
        fh.write(_dumps(manifest))
    return path


def _emit(args, result, outputs=()):
    text = _dumps(result)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    _write_manifest(args, [args.out, *outputs])


# -- commands --------------------------------------------------------------------------

def cmd_fit_prices(args):
    model, trace = _price(args)
    summary = model.summary()
    if trace is not None:
        summary["records"] = len(trace)
        summary["span_seconds"] = trace.duration
    if args.model_out:
        with open(args.model_out, "w") as fh:
            fh.write(_dumps(model.to_dict()))
    _emit(args, summary, [args.model_out])
    return EXIT_OK


def cmd_optimal_bid(args):
    price, _ = _price(args)
    plan = bidding.optimal_uniform_bid(bidding.JobRequirements(args.eps, args.deadline), args.n,
                                       _constants(args), price, _runtime(args))
    _emit(args, plan.to_dict())
    return EXIT_OK


def cmd_optimal_two_bids(args):
    price, _ = _price(args)
    k, rt = _constants(args), _runtime(args)
    req = bidding.JobRequirements(args.eps, args.deadline)
    if args.search == "group-size":
        if args.J is None:
            raise UsageError("--search group-size needs --J")
        plan = bidding.co_optimize_group_size(req, args.n, args.J, k, price, rt)
    elif args.search == "iterations":
        if args.n1 is None:
            raise UsageError("--search iterations needs --n1")
        plan = bidding.co_optimize_iterations(req, args.n1, args.n, k, price, rt)
    else:
        if args.n1 is None or args.J is None:
            raise UsageError("--n1 and --J are required unless --search is given")
        plan = bidding.optimal_two_bids(req, args.n1, args.n, args.J, k, price, rt)
    _emit(args, plan.to_dict())
    return EXIT_OK


def cmd_optimize_workers(args):
    k = _constants(args)
    rate = args.iteration_rate
    if rate is None:
        rate = preemptible.iteration_rate(args.n_ref, args.q, args.iteration_time)
    d = _resolve_d(args)
    res = preemptible.co_optimize_workers_iterations(k, args.eps, args.deadline, rate, d)
    out = res.to_dict()
    out["iteration_rate"] = rate
    out["inputs"] = {"eps": args.eps, "deadline": args.deadline, "d": d}
    _emit(args, out)
    return EXIT_OK


def cmd_optimize_eta(args):
    k = _constants(args)
    runtime = _runtime(args) if args.straggler else args.iteration_time
    d = _resolve_d(args, args.chi)
    prob = preemptible.EtaProblem(k, n0=args.n0, q=args.q, chi=args.chi, J=args.J or 1,
                                  runtime=runtime, theta=args.deadline, eps=args.eps, d=d,
                                  max_workers=args.max_workers)
    if args.J is None:
        sol = preemptible.optimize_eta_joint(prob, J_max=args.max_iterations)
    else:
        sol = preemptible.optimize_eta(prob)
    sched = preemptible.WorkerSchedule.geometric(args.n0, sol.eta, sol.J)
    rt = _runtime(args)
    plan = preemptible.provision_plan(sched, args.q, k, rt, inputs={
        "eps": args.eps, "deadline": args.deadline, "chi": args.chi, "d": d})
    out = plan.to_dict()
    out["solver"] = sol.to_dict()
    _emit(args, out)
    return EXIT_OK


def _parse_stages(text):
    from spotsgd.simulator import StageSpec

    stages = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            n1, n, iters = (int(v) for v in part.split(","))
        except ValueError:
            raise UsageError(f"stage {part!r} must be N1,N,ITERATIONS") from None
        stages.append(StageSpec(n1, n, iters))
    if not stages:
        raise UsageError("--stages is empty")
    return stages


def _sim_plan(args, price):
    if args.plan:
        with open(args.plan) as fh:
            data = json.load(fh)
        if "b1" in data:
            return bidding.BidPlan.from_dict(data)
        sched = preemptible.WorkerSchedule(data.get("kind", "static"), data["n0"], data["J"],
                                           data.get("eta", 1.0))
        return preemptible.ProvisionPlan(sched, data["q"], data.get("unit_price", 1.0))
    if args.q is not None:
        if args.n is None or args.J is None:
            raise UsageError("preemptible mode needs --n (initial workers) and --J")
        if args.eta is not None:
            sched = preemptible.WorkerSchedule.geometric(args.n, args.eta, args.J)
        else:
            sched = preemptible.WorkerSchedule.static(args.n, args.J)
        return preemptible.ProvisionPlan(sched, args.q, args.unit_price)
    if args.n is None or args.J is None:
        raise UsageError("give --plan, or --n and --J with bids (or --baseline)")
    if args.baseline:
        return bidding.BidPlan(price.upper, price.upper, args.n, args.n, args.J,
                               strategy="no-interruptions")
    if args.b1 is None:
        raise UsageError("--b1 is required for a bid plan")
    b2 = args.b1 if args.b2 is None else args.b2
    n1 = args.n if args.n1 is None else args.n1
    return bidding.BidPlan(args.b1, b2, n1, args.n, args.J)


def cmd_simulate(args):
    from spotsgd import simulator
    from spotsgd.errors import DeadlineInfeasibleError, TraceTruncationError

    redraw = args.redraw_interval
    if redraw != "matched":
        try:
            redraw = float(redraw)
        except ValueError:
            raise UsageError("--redraw-interval must be a number or 'matched'") from None
    seed = _seed(args)
    rt = _runtime(args)
    if args.stages:
        price, trace = _price(args)
        if trace is not None and not args.price_model:
            raise UsageError("dynamic re-bidding needs an i.i.d. price model, not a trace")
        if args.eps is None or args.deadline is None:
            raise UsageError("--stages needs --eps and --deadline")
        try:
            outcome = simulator.simulate_dynamic_rebid(
                _parse_stages(args.stages), price, rt, _constants(args),
                bidding.JobRequirements(args.eps, args.deadline), seed=seed, trials=args.trials,
                redraw_interval=redraw, backend=args.backend, threads=args.threads)
        except DeadlineInfeasibleError as exc:
            if exc.partial is not None:
                _finish_sim(args, exc.partial, quiet=True)
            raise
        return _finish_sim(args, outcome)
    needs_price = args.q is None and not (args.plan and _plan_is_provision(args.plan))
    price, trace = _price(args, required=needs_price)
    plan = _sim_plan(args, price)
    config = simulator.SimConfig(
        plan, rt, price=price if trace is None else None, trace=trace,
        redraw_interval=redraw, trials=args.trials, seed=seed,
        price_fixed_within_iteration=not args.mid_iteration_redraw,
        trace_start=args.trace_start)
    try:
        outcome = simulator.simulate(config, backend=args.backend, threads=args.threads)
    except TraceTruncationError as exc:
        _finish_sim(args, exc.partial, quiet=True)
        raise
    return _finish_sim(args, outcome)


def _plan_is_provision(path):
    with open(path) as fh:
        return "b1" not in json.load(fh)


def _finish_sim(args, outcome, quiet=False):
    outputs = []
    if args.trials_csv:
        outcome.write_trials_csv(args.trials_csv)
        outputs.append(args.trials_csv)
    if args.trajectory_csv:
        outcome.write_trajectory_csv(args.trajectory_csv)
        outputs.append(args.trajectory_csv)
    result = outcome.to_dict()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(_dumps(result))
    _write_manifest(args, [args.out, *outputs])
    if not quiet:
        se_c = outcome.se_cost if outcome.se_cost is not None else 0.0
        se_t = outcome.se_completion if outcome.se_completion is not None else 0.0
        print(f"trials={outcome.trials} mean_cost={outcome.mean_cost:.6g} (se {se_c:.3g}) "
              f"mean_completion={outcome.mean_completion:.6g} s (se {se_t:.3g})")
    return EXIT_OK


def cmd_validate(args):
    from spotsgd import validation

    checks = validation.run_suite(args.suite, seed=_seed(args))
    rows = [c.row() for c in checks]
    failed = sum(not c.passed for c in checks)
    result = {"suite": args.suite, "checks": rows, "passed": len(rows) - failed,
              "failed": failed}
    outputs = []
    if args.summary_csv or args.suite == "all":
        path = args.summary_csv or "validate-summary.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["suite", "check", "value", "reference", "tolerance", "kind", "passed"])
            for r in rows:
                w.writerow([r["suite"], r["check"], repr(float(r["value"])),
                            repr(float(r["reference"])), repr(float(r["tolerance"])), r["kind"],
                            "pass" if r["passed"] else "FAIL"])
        outputs.append(path)
    _emit(args, result, outputs)
    return EXIT_OK if failed == 0 else EXIT_CHECK


COMMANDS = {
    "fit-prices": cmd_fit_prices,
    "optimal-bid": cmd_optimal_bid,
    "optimal-two-bids": cmd_optimal_two_bids,
    "optimize-workers": cmd_optimize_workers,
    "optimize-eta": cmd_optimize_eta,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args)
        return COMMANDS[args.command](args)
    except SpotSgdError as exc:
        print(f"spotsgd {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"spotsgd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
