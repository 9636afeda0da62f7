"""Discrete-event Monte Carlo simulation of training runs on volatile instances.

Each trial walks the job iteration by iteration.  For a bid plan the price is
drawn (or read from a trace) at every iteration boundary: above b1 the job
idles for one redraw slot at zero cost; otherwise n workers run when the price
is at most b2 and n1 run when it sits between b2 and b1.  For a provisioning
plan every provisioned worker survives an iteration independently with
probability 1 - q; if none survive the slot is idle.

Trials are independent.  Trial i draws from its own PCG64 stream spawned from
``SeedSequence(seed)``, so results do not depend on how trials are batched.
The event loop runs in a compiled kernel when it is available and in a
pure-Python twin otherwise; both produce identical numbers.
"""

import concurrent.futures
import csv
import dataclasses
import math
import os
from typing import Optional, Sequence, Union

import numpy as np

from spotsgd.bidding import BidPlan, JobRequirements
from spotsgd.convergence import SgdConstants, q_epsilon
from spotsgd.errors import (DeadlineInfeasibleError, ErrorFloorError, TraceTruncationError)
from spotsgd.preemptible import ProvisionPlan
from spotsgd.price_model import PriceModel, PriceTrace, fit_empirical
from spotsgd.runtime import RuntimeModel, binomial_active_mean
from spotsgd.simulator import _kernel_py

try:
    from spotsgd.simulator import _kernel as _kernel_c
except ImportError:  # extension not built
    _kernel_c = None

__all__ = [
    "SimConfig", "SimOutcome", "StageSpec", "simulate", "simulate_dynamic_rebid",
    "empirical_inverse_moments", "BACKEND", "available_backends",
]

if _kernel_c is not None and not os.environ.get("SPOTSGD_PURE_PYTHON"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

# trials per kernel call; fixed so results never depend on the thread count
CHUNK = 2048
DEFAULT_REDRAW = 4.0


def available_backends():
    return ["compiled", "python"] if _kernel_c is not None else ["python"]


def _kernel(backend):
    backend = backend or BACKEND
    if backend == "compiled":
        if _kernel_c is None:
            raise RuntimeError("compiled simulator kernel is not available")
        return _kernel_c.run_trials
    if backend == "python":
        return _kernel_py.run_trials
    raise ValueError(f"unknown backend {backend!r}")


@dataclasses.dataclass(frozen=True)
class SimConfig:
    """Everything a simulation run needs.

    ``redraw_interval`` is the idle slot length in seconds, or ``"matched"`` to
    make each idle slot as long as an expected running iteration (the setting
    under which the closed-form completion times are exact).
    """

    plan: Union[BidPlan, ProvisionPlan]
    runtime: RuntimeModel
    price: Optional[PriceModel] = None
    trace: Optional[PriceTrace] = None
    redraw_interval: Union[float, str] = DEFAULT_REDRAW
    trials: int = 1000
    seed: int = 0
    price_fixed_within_iteration: bool = True
    keep_active: bool = False
    trace_start: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.redraw_interval != "matched" and not float(self.redraw_interval) > 0:
            raise ValueError("redraw_interval must be positive or 'matched'")
        if isinstance(self.plan, BidPlan):
            if self.price is None and self.trace is None:
                raise ValueError("a bid plan needs a price model or a trace")
            if self.trace is not None and not self.price_fixed_within_iteration:
                raise ValueError("mid-iteration redraws are only supported for i.i.d. prices")
        elif not isinstance(self.plan, ProvisionPlan):
            raise TypeError("plan must be a BidPlan or a ProvisionPlan")

    @property
    def mode(self):
        return "trace-replay" if self.trace is not None else "iid-redraw"

    def to_dict(self):
        return {
            "plan": self.plan.to_dict(),
            "runtime": self.runtime.to_dict(),
            "price": self.price.to_dict() if self.price is not None else None,
            "trace_records": len(self.trace) if self.trace is not None else None,
            "mode": self.mode,
            "redraw_interval": self.redraw_interval,
            "trials": self.trials,
            "seed": self.seed,
            "price_fixed_within_iteration": self.price_fixed_within_iteration,
            "trace_start": self.trace_start,
        }


@dataclasses.dataclass
class SimOutcome:
    cost: np.ndarray
    completion: np.ndarray
    iterations: np.ndarray
    idle: np.ndarray
    truncated: np.ndarray
    restarts: np.ndarray
    weighted_inverse: np.ndarray
    sum_active: np.ndarray
    sum_inverse: np.ndarray
    sum_inverse_sq: np.ndarray
    sum_cum_cost: np.ndarray
    sum_cum_time: np.ndarray
    count: np.ndarray
    active: Optional[np.ndarray] = None
    config: dict = dataclasses.field(default_factory=dict)
    backend: str = BACKEND
    stages: list = dataclasses.field(default_factory=list)

    @property
    def trials(self):
        return self.cost.size

    @staticmethod
    def _se(x):
        return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else None

    @property
    def mean_cost(self):
        return float(np.mean(self.cost))

    @property
    def se_cost(self):
        return self._se(self.cost)

    @property
    def mean_completion(self):
        return float(np.mean(self.completion))

    @property
    def se_completion(self):
        return self._se(self.completion)

    @property
    def any_truncated(self):
        return bool(np.any(self.truncated))

    def trajectory(self):
        """Per-iteration means over the trials that reached each iteration."""
        with np.errstate(invalid="ignore", divide="ignore"):
            c = self.count.astype(float)
            return {
                "mean_active": self.sum_active / c,
                "mean_inverse_active": self.sum_inverse / c,
                "cum_cost_mean": self.sum_cum_cost / c,
                "cum_time_mean": self.sum_cum_time / c,
            }

    def to_dict(self):
        e = empirical_inverse_moments(self)
        return {
            "trials": self.trials,
            "backend": self.backend,
            "mean_cost": self.mean_cost,
            "se_cost": self.se_cost,
            "mean_completion": self.mean_completion,
            "se_completion": self.se_completion,
            "mean_iterations": float(np.mean(self.iterations)),
            "mean_idle": float(np.mean(self.idle)),
            "mean_restarts": float(np.mean(self.restarts)),
            "truncated_trials": int(np.sum(self.truncated)),
            "mean_inverse_active_overall": float(np.sum(self.sum_inverse) / max(1, np.sum(self.count))),
            "inverse_active_first": float(e[0]) if e.size else None,
            "inverse_active_last": float(e[-1]) if e.size else None,
            "stages": self.stages,
            "config": self.config,
        }

    def write_trials_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "cost", "completion", "iterations", "idle"])
            for i in range(self.trials):
                w.writerow([i, repr(float(self.cost[i])), repr(float(self.completion[i])),
                            int(self.iterations[i]), repr(float(self.idle[i]))])

    def write_trajectory_csv(self, path):
        tr = self.trajectory()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "mean_active", "mean_inverse_active", "cum_cost_mean", "cum_time_mean"])
            for j in range(self.count.size):
                if self.count[j] == 0:
                    break
                w.writerow([j + 1] + [repr(float(tr[key][j])) for key in
                                      ("mean_active", "mean_inverse_active", "cum_cost_mean",
                                       "cum_time_mean")])


def empirical_inverse_moments(outcome: SimOutcome) -> np.ndarray:
    """Per-iteration mean of 1/y_j over the trials that executed iteration j."""
    if outcome.trials < 1:
        raise ValueError("outcome has no trials")
    reached = outcome.count > 0
    return outcome.sum_inverse[reached] / outcome.count[reached]


def inverse_moment_standard_errors(outcome: SimOutcome) -> np.ndarray:
    reached = outcome.count > 1
    c = outcome.count[reached].astype(float)
    m = outcome.sum_inverse[reached] / c
    var = np.maximum(outcome.sum_inverse_sq[reached] / c - m * m, 0.0) * c / (c - 1)
    return np.sqrt(var / c)


# -- config to kernel arguments --------------------------------------------------------

def _bid_slot(plan: BidPlan, model: PriceModel, rt: RuntimeModel):
    F1 = float(model.cdf(plan.b1))
    gamma = min(1.0, float(model.cdf(plan.b2)) / F1) if F1 > 0 else 1.0
    return gamma * rt.expected(plan.n) + (1.0 - gamma) * rt.expected(plan.n1)


def _kernel_cfg(config: SimConfig):
    plan = config.plan
    rt = config.runtime
    empty = np.zeros(1)
    cfg = {
        "price_code": 0, "price_params": np.array([0.0, 1.0]), "samples": empty,
        "use_trace": False, "trace_t": empty, "trace_p": empty,
        "trace_start": 0.0, "b1": 0.0, "b2": 0.0, "n1": 1, "n": 1,
        "workers": np.ones(1, dtype=np.int64), "q": 0.0, "unit_price": 0.0,
        "rt_family": rt.family_code, "rt_rate": float(rt.rate), "rt_shift": float(rt.shift),
        "rt_fixed": float(rt.fixed_time), "rt_overhead": float(rt.overhead),
        "fixed_within": bool(config.price_fixed_within_iteration),
        "run_redraw": DEFAULT_REDRAW if config.redraw_interval == "matched"
        else float(config.redraw_interval),
        "keep_active": bool(config.keep_active), "beta": float(config.beta),
    }
    if isinstance(plan, BidPlan):
        J = plan.J
        cfg.update(mode=0, b1=float(plan.b1), b2=float(plan.b2), n1=int(plan.n1), n=int(plan.n),
                   workers=np.ones(J, dtype=np.int64))
        model = config.price
        if config.trace is not None:
            cfg.update(use_trace=True,
                       trace_t=np.ascontiguousarray(config.trace.timestamps, dtype=float),
                       trace_p=np.ascontiguousarray(config.trace.prices, dtype=float),
                       trace_start=float(config.trace.timestamps[0] + config.trace_start))
            if model is None:
                model = fit_empirical(config.trace)
        else:
            code, params, samples = model.kernel_spec()
            cfg.update(price_code=code, price_params=np.ascontiguousarray(params, dtype=float),
                       samples=np.ascontiguousarray(samples, dtype=float))
        if config.redraw_interval == "matched":
            slots = np.full(J, _bid_slot(plan, model, rt))
        else:
            slots = np.full(J, float(config.redraw_interval))
    else:
        w = plan.schedule.workers()
        J = w.size
        cfg.update(mode=1, workers=np.ascontiguousarray(w, dtype=np.int64), q=float(plan.q),
                   unit_price=float(plan.unit_price))
        if config.redraw_interval == "matched":
            cache = {}
            for n in np.unique(w).tolist():
                cache[n] = rt.expected(max(1.0, binomial_active_mean(n, plan.q)))
            slots = np.array([cache[n] for n in w.tolist()])
        else:
            slots = np.full(J, float(config.redraw_interval))
    cfg["J"] = int(J)
    cfg["idle_slot"] = np.ascontiguousarray(slots, dtype=float)
    if cfg["run_redraw"] <= 0:
        raise ValueError("redraw interval must be positive")
    return cfg


def _bitgens(seed, trials):
    return [np.random.PCG64(s) for s in np.random.SeedSequence(seed).spawn(trials)]


_PER_TRIAL = ("cost", "completion", "iterations", "idle", "truncated", "restarts", "weighted_inverse")
_PER_ITER = ("sum_active", "sum_inverse", "sum_inverse_sq", "sum_cum_cost", "sum_cum_time", "count")


def _merge(parts):
    out = {key: np.concatenate([p[key] for p in parts]) for key in _PER_TRIAL}
    for key in _PER_ITER:
        acc = parts[0][key].copy()
        for p in parts[1:]:
            acc += p[key]
        out[key] = acc
    if parts[0]["active"] is not None:
        out["active"] = np.concatenate([p["active"] for p in parts], axis=0)
    else:
        out["active"] = None
    return out


def _run(bitgens, cfg, backend=None, threads=1):
    run = _kernel(backend)
    chunks = [bitgens[i:i + CHUNK] for i in range(0, len(bitgens), CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: run(c, cfg), chunks))
    else:
        parts = [run(c, cfg) for c in chunks]
    return _merge(parts)


def simulate(config: SimConfig, backend=None, threads=1) -> SimOutcome:
    """Run ``config.trials`` independent trials of the configured plan.

    Trace replay that runs past the end of the trace raises
    ``TraceTruncationError`` whose ``partial`` attribute holds the outcome.
    """
    cfg = _kernel_cfg(config)
    raw = _run(_bitgens(config.seed, config.trials), cfg, backend, threads)
    outcome = SimOutcome(**raw, config=config.to_dict(), backend=backend or BACKEND)
    if outcome.any_truncated:
        raise TraceTruncationError(
            f"price trace ended before the job finished in {int(np.sum(outcome.truncated))} "
            f"of {outcome.trials} trials; partial iterations were charged pro rata",
            partial=outcome)
    return outcome


# -- dynamic re-bidding ----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class StageSpec:
    n1: int
    n: int
    iterations: int

    def __post_init__(self):
        if not 1 <= self.n1 <= self.n or self.iterations < 1:
            raise ValueError("stage needs 1 <= n1 <= n and at least one iteration")


def stage_bids(req: JobRequirements, n1, n, J, k: SgdConstants, price: PriceModel,
               rt: RuntimeModel):
    """Two-bid rule for the remaining job, with gamma clamped to [0, 1].

    Unlike ``optimal_two_bids`` this never raises on Q(eps) outside [1/n, 1/n1]:
    the closest admissible gamma is used and ``error_met`` reports whether the
    error target is still reachable with these group sizes.
    """
    try:
        Q = q_epsilon(k, req.eps, J)
    except ErrorFloorError:
        Q = 0.0
    lo, hi = 1.0 / n, 1.0 / n1
    if n1 == n:
        gamma = 1.0
    else:
        gamma = min(1.0, max(0.0, (hi - Q) / (hi - lo)))
    error_met = Q >= (1.0 / n1 - gamma * (1.0 / n1 - 1.0 / n)) * (1 - 1e-12)
    busy = J * ((rt.expected(n) - rt.expected(n1)) * gamma + rt.expected(n1))
    ratio = busy / req.deadline if req.deadline > 0 else math.inf
    if ratio > 1.0:
        raise DeadlineInfeasibleError(
            f"remaining deadline {req.deadline} is below the uninterrupted runtime {busy} "
            f"of the remaining {J} iterations", min_deadline=busy)
    b1 = float(price.quantile(ratio))
    b2 = min(b1, float(price.quantile(gamma * float(price.cdf(b1)))))
    return b1, b2, gamma, Q, error_met


def simulate_dynamic_rebid(stages: Sequence[StageSpec], price: PriceModel, rt: RuntimeModel,
                           k: SgdConstants, req: JobRequirements, seed=0, trials=1000,
                           redraw_interval: Union[float, str] = DEFAULT_REDRAW,
                           backend=None, threads=1) -> SimOutcome:
    """Run a staged job, re-planning the two bids at each stage boundary.

    Stage s runs its own (n1, n) for its iteration count.  Before it starts,
    each trial recomputes its bids for the remaining iterations against the
    deadline minus its own elapsed time, starting from the error bound its
    realized worker counts have reached so far.
    """
    stages = list(stages)
    if not stages:
        raise ValueError("need at least one stage")
    J_total = sum(s.iterations for s in stages)
    bitgens = _bitgens(seed, trials)
    elapsed = np.zeros(trials)
    gap = np.full(trials, k.G0)
    parts, reports = [], []
    done_iters = 0

    def stage_cfg(b1, b2, st):
        plan = BidPlan(b1, b2, st.n1, st.n, st.iterations)
        return SimConfig(plan, rt, price=price, redraw_interval=redraw_interval, trials=1,
                         seed=seed, beta=k.beta)

    def partial():
        return _assemble(parts, reports, k, req, stages, seed, backend)

    for s_idx, st in enumerate(stages):
        remaining = J_total - done_iters
        bids = np.empty((trials, 2))
        gammas = np.empty(trials)
        met = np.empty(trials, dtype=bool)
        plans = {}
        for t in range(trials):
            key = (elapsed[t], gap[t])
            if key not in plans:
                sub = JobRequirements(req.eps, req.deadline - elapsed[t]) \
                    if req.deadline - elapsed[t] > 0 else None
                if sub is None:
                    raise DeadlineInfeasibleError(
                        f"deadline exhausted before stage {s_idx + 1} in trial {t}",
                        min_deadline=None, partial=partial())
                try:
                    plans[key] = stage_bids(sub, st.n1, st.n, remaining, k.replace(G0=float(gap[t])),
                                            price, rt)
                except DeadlineInfeasibleError as exc:
                    raise DeadlineInfeasibleError(
                        f"stage {s_idx + 1}, trial {t}: {exc}", min_deadline=exc.min_deadline,
                        partial=partial()) from None
            b1, b2, gammas[t], _, met[t] = plans[key]
            bids[t] = (b1, b2)
        # trials sharing bids run in one kernel call (all of them in the first stage)
        groups = {}
        for t in range(trials):
            groups.setdefault((bids[t, 0], bids[t, 1]), []).append(t)
        stage_raw = [None] * trials
        for (b1, b2), idx in groups.items():
            cfg = _kernel_cfg(stage_cfg(b1, b2, st))
            res = _run([bitgens[t] for t in idx], cfg, backend, threads)
            for pos, t in enumerate(idx):
                stage_raw[t] = (res, pos)
        merged = _stage_merge(stage_raw, elapsed, st.iterations)
        parts.append(merged)
        ends = elapsed + merged["completion"]
        gap = k.beta ** st.iterations * gap + k.noise_coeff * merged["weighted_inverse"]
        reports.append({
            "stage": s_idx + 1, "n1": st.n1, "n": st.n, "iterations": st.iterations,
            "remaining_iterations_at_start": remaining,
            "mean_b1": float(np.mean(bids[:, 0])), "mean_b2": float(np.mean(bids[:, 1])),
            "min_b1": float(np.min(bids[:, 0])), "max_b1": float(np.max(bids[:, 0])),
            "mean_gamma": float(np.mean(gammas)), "error_target_reachable": float(np.mean(met)),
            "mean_start_time": float(np.mean(elapsed)), "mean_end_time": float(np.mean(ends)),
            "mean_cost": float(np.mean(merged["cost"])),
            "mean_bound_after": float(np.mean(gap)),
            "_start": elapsed.copy(), "_end": ends.copy(),
        })
        elapsed = ends
        done_iters += st.iterations
    return _assemble(parts, reports, k, req, stages, seed, backend, final_gap=gap)


def _stage_merge(stage_raw, offset, J):
    """Reassemble per-trial results of one stage in trial order."""
    T = len(stage_raw)
    out = {key: np.empty(T, dtype=stage_raw[0][0][key].dtype) for key in _PER_TRIAL}
    for t, (res, pos) in enumerate(stage_raw):
        for key in _PER_TRIAL:
            out[key][t] = res[key][pos]
    # per-iteration sums are rebuilt from the distinct result blocks
    seen = {}
    for res, _ in stage_raw:
        seen[id(res)] = res
    acc = {key: np.zeros(J, dtype=next(iter(seen.values()))[key].dtype) for key in _PER_ITER}
    for res in seen.values():
        for key in _PER_ITER:
            acc[key] += res[key]
    out.update(acc)
    out["offset"] = offset.copy()
    return out


def _assemble(parts, reports, k, req, stages, seed, backend, final_gap=None):
    if not parts:
        return None
    out = {key: sum(p[key] for p in parts) for key in ("cost", "completion", "idle", "restarts")}
    out["iterations"] = sum(p["iterations"] for p in parts)
    out["truncated"] = np.zeros_like(parts[0]["truncated"])
    out["weighted_inverse"] = parts[-1]["weighted_inverse"]
    cost_offset = np.zeros_like(parts[0]["cost"])
    time_offset = np.zeros_like(parts[0]["cost"])
    per_iter = {key: [] for key in _PER_ITER}
    for p in parts:
        for key in ("sum_active", "sum_inverse", "sum_inverse_sq", "count"):
            per_iter[key].append(p[key])
        per_iter["sum_cum_cost"].append(p["sum_cum_cost"] + np.sum(cost_offset))
        per_iter["sum_cum_time"].append(p["sum_cum_time"] + np.sum(time_offset))
        cost_offset = cost_offset + p["cost"]
        time_offset = time_offset + p["completion"]
    for key in _PER_ITER:
        out[key] = np.concatenate(per_iter[key])
    public = [{k_: v for k_, v in r.items() if not k_.startswith("_")} for r in reports]
    outcome = SimOutcome(**out, config={
        "strategy": "dynamic-rebid", "stages": [dataclasses.asdict(s) for s in stages],
        "eps": req.eps, "deadline": req.deadline, "seed": seed,
    }, backend=backend or BACKEND, stages=public)
    outcome.stage_times = [(r["_start"], r["_end"]) for r in reports]
    if final_gap is not None:
        outcome.final_bound = final_gap
    return outcome
