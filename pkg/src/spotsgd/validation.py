"""Self-check suites run by ``spotsgd validate``.

Each check compares a closed form with an independent computation (Monte
Carlo, brute force, enumeration or a recursion) and records the tolerance it
was held to.
"""

import dataclasses
import itertools
import math
from fractions import Fraction
from math import comb

import numpy as np

from spotsgd import bidding, convergence, preemptible, sgd_lab
from spotsgd.convergence import SgdConstants
from spotsgd.price_model import make_truncated_gaussian, make_uniform
from spotsgd.runtime import RuntimeModel, expected_completion_time_preemption
from spotsgd.simulator import SimConfig, simulate

SUITES = ("formulas", "bounds", "optimizers", "all")


@dataclasses.dataclass(frozen=True)
class Check:
    suite: str
    name: str
    value: float
    reference: float
    tolerance: float
    kind: str  # "rel", "abs" or "le" (value <= reference + tolerance)

    @property
    def passed(self):
        if not (math.isfinite(self.value) and math.isfinite(self.reference)):
            return self.value == self.reference
        if self.kind == "rel":
            return abs(self.value - self.reference) <= self.tolerance * abs(self.reference)
        if self.kind == "abs":
            return abs(self.value - self.reference) <= self.tolerance
        return self.value <= self.reference + self.tolerance

    def row(self):
        return {"suite": self.suite, "check": self.name, "value": self.value,
                "reference": self.reference, "tolerance": self.tolerance, "kind": self.kind,
                "passed": self.passed}


def default_constants():
    return SgdConstants(L=1.0, c=0.5, mu=1.0, mu_G=1.0, M=1.0, M_V=0.0, alpha=0.2, G0=1.0)


def formulas(trials=20_000, seed=0):
    """Closed-form completion times and costs against simulation."""
    s = "formulas"
    out = []
    price = make_uniform(0.2, 1.0)
    rt = RuntimeModel.exponential(1.0)
    plan = bidding.bid_plan(1000, 4, 4, 0.6, 0.6, price, rt)
    sim = simulate(SimConfig(plan, rt, price=price, redraw_interval="matched",
                             trials=trials, seed=seed))
    out.append(Check(s, "uniform-bid completion (b=0.6, n=4, J=1000)", sim.mean_completion,
                     plan.expected_completion, 0.02, "rel"))
    out.append(Check(s, "uniform-bid cost (b=0.6, n=4, J=1000)", sim.mean_cost,
                     plan.expected_cost, 0.02, "rel"))
    two = bidding.bid_plan(1000, 2, 4, 0.6, 0.4, price, rt)
    sim = simulate(SimConfig(two, rt, price=price, redraw_interval="matched",
                             trials=trials // 4, seed=seed + 1))
    out.append(Check(s, "two-bid completion (0.6/0.4, n1=2, n=4)", sim.mean_completion,
                     two.expected_completion, 0.02, "rel"))
    out.append(Check(s, "two-bid cost (0.6/0.4, n1=2, n=4)", sim.mean_cost,
                     two.expected_cost, 0.02, "rel"))
    gauss = make_truncated_gaussian(0.6, 0.175, 0.2, 1.0)
    gp = bidding.bid_plan(500, 2, 4, 0.7, 0.5, gauss, rt)
    sim = simulate(SimConfig(gp, rt, price=gauss, redraw_interval="matched",
                             trials=trials // 4, seed=seed + 2))
    out.append(Check(s, "two-bid cost, truncated Gaussian prices", sim.mean_cost,
                     gp.expected_cost, 0.02, "rel"))
    sched = preemptible.WorkerSchedule.static(1, 10)
    k = default_constants()
    det = RuntimeModel.deterministic(1.0)
    pp = preemptible.provision_plan(sched, 0.5, k, det)
    sim = simulate(SimConfig(pp, det, redraw_interval="matched", trials=trials, seed=seed + 3))
    out.append(Check(s, "preemption completion (q=0.5, n=1, R=1, J=10)", sim.mean_completion,
                     expected_completion_time_preemption(10, 1, 0.5, det), 0.02, "rel"))
    pp2 = preemptible.provision_plan(preemptible.WorkerSchedule.static(2, 200), 0.5, k, rt)
    sim = simulate(SimConfig(pp2, rt, redraw_interval="matched", trials=trials // 10,
                             seed=seed + 4))
    emp = float(np.sum(sim.sum_inverse) / np.sum(sim.count))
    out.append(Check(s, "active-worker inverse moment (q=0.5, n=2)", emp,
                     preemptible.inverse_moment_binomial(2, 0.5), 0.01, "abs"))
    rng = np.random.default_rng(seed)
    for m in (1, 2, 4, 16):
        mc = float(np.mean(rt.sample(m, rng, size=100_000)))
        out.append(Check(s, f"expected iteration runtime m={m}", mc, rt.expected(m), 0.01, "rel"))
    return out


def bounds(seed=0):
    s = "bounds"
    out = []
    k = default_constants()
    for n in (1, 4, 16):
        e = np.full(50, 1.0 / n)
        closed = k.beta ** 50 * k.G0 + k.floor_coeff / n * (1 - k.beta ** 50)
        out.append(Check(s, f"geometric closed form, constant 1/{n}",
                         convergence.error_bound(k, e), closed, 1e-12, "rel"))
    for J, target in ((5, 0.3), (20, 0.55), (80, 0.9)):
        eps = k.G0 * k.beta ** J + k.floor_coeff * target * (1 - k.beta ** J)
        Q = convergence.q_epsilon(k, eps, J)
        out.append(Check(s, f"Q(eps) round trip, J={J}", convergence.error_bound(k, [Q] * J),
                         eps, 1e-10, "rel"))
    for n in (1, 2, 8):
        e = 1.0 / n
        Jm = convergence.iterations_for_error(k, 0.5, e)
        minimal = (convergence.error_bound(k, [e] * Jm) <= 0.5
                   and (Jm == 1 or convergence.error_bound(k, [e] * (Jm - 1)) > 0.5))
        out.append(Check(s, f"iterations for error is minimal, n={n}", float(minimal), 1.0,
                         0.0, "abs"))
    worst = 0.0
    for n in range(1, 21):
        for q10 in range(1, 10):
            q = q10 / 10
            num = sum(Fraction(1, j) * comb(n, j) * Fraction(10 - q10, 10) ** j
                      * Fraction(q10, 10) ** (n - j) for j in range(1, n + 1))
            exact = num / (1 - Fraction(q10, 10) ** n)
            worst = max(worst, abs(preemptible.inverse_moment_binomial(n, q) - float(exact)))
    out.append(Check(s, "binomial inverse moment vs enumeration (n<=20)", worst, 0.0, 1e-12, "abs"))
    ns = np.arange(1, 10_001)
    excess = max(preemptible.inverse_moment_uniform(int(n)) - (math.log(n) + 1) / n for n in ns)
    out.append(Check(s, "uniform-law H_n/n under (ln n + 1)/n, n<=10^4", excess, 0.0, 0.0, "le"))
    kd = SgdConstants(L=1.0, c=0.5, mu=1.0, mu_G=1.0, M=1.0, M_V=0.0, alpha=0.2, G0=1.0)
    worst = 0.0
    for n0, eta, Jp in itertools.product((1, 3), (1.2, 2.0), (5, 30)):
        seq = 1.0 / (n0 * eta ** np.arange(Jp))
        worst = max(worst, abs(preemptible.error_bound_dynamic(kd, n0, eta, 1.0, Jp)
                               - convergence.error_bound(kd, seq)))
    out.append(Check(s, "geometric-schedule bound vs recursion", worst, 0.0, 1e-10, "abs"))
    cmp_ = preemptible.compare_dynamic_static(kd, 1, 2.0, 1.0, 100)
    out.append(Check(s, "static asymptote B/((1-beta) n0^chi)", cmp_.static_asymptote,
                     kd.B() / (1 - kd.beta), 0.0, "abs"))
    out.append(Check(s, "dynamic/static threshold located (beta=0.9, eta^chi=2)",
                     float(cmp_.threshold is not None), 1.0, 0.0, "abs"))
    # independent check past the threshold: explicit recursions, not closed forms
    worst = -math.inf
    if cmp_.threshold is not None:
        for J in sorted({cmp_.threshold, cmp_.threshold + 1, cmp_.threshold + 7, 200, 1000, 5000}):
            if J < cmp_.threshold:
                continue
            Jp = preemptible.dynamic_iteration_count(J, 2.0, 1.0)
            dyn = convergence.error_bound(kd, 1.0 / 2.0 ** np.arange(Jp))
            sta = convergence.error_bound(kd, np.ones(J))
            worst = max(worst, dyn - sta)
    out.append(Check(s, "dynamic bound <= static bound beyond threshold (recursion)", worst,
                     0.0, 1e-12, "le"))
    problem = sgd_lab.make_problem(10, 200, 5.0, seed=seed)
    est = sgd_lab.estimate_constants(problem, batch=4, seed=seed)
    rep = sgd_lab.validate_bound(problem, [2] * 100, batch=4, replications=50, seed=seed,
                                 estimate=est)
    out.append(Check(s, "SGD mean gap within estimated-constant bound (z-score)",
                     rep.worst_z, 3.0, 0.0, "le"))
    return out


def optimizers(seed=0):
    s = "optimizers"
    out = []
    price = make_uniform(0.2, 1.0)
    rt = RuntimeModel.exponential(1.0)
    k = default_constants()
    n = 4
    J = convergence.iterations_for_error(k, 0.45, 1.0 / n)
    theta = 2.0 * J * rt.expected(n)
    plan = bidding.optimal_uniform_bid(bidding.JobRequirements(0.45, theta), n, k, price, rt)
    grid = np.linspace(0.2, 1.0, 501)[1:]
    feas = [b for b in grid if bidding.expected_completion_uniform(J, n, b, price, rt) <= theta]
    best = min(bidding.expected_cost_uniform(J, n, b, price, rt) for b in feas)
    out.append(Check(s, "optimal bid vs 500-bid grid", plan.expected_cost, best, 1e-12, "le"))
    out.append(Check(s, "optimal bid b* (uniform [0.2,1], half-busy deadline)", plan.b1, 0.6,
                     1e-12, "abs"))
    # worked two-bid instance: Q = 0.375 at n1=2, n=4
    J2 = 100
    eps = k.beta ** J2 * k.G0 + k.floor_coeff * 0.375 * (1 - k.beta ** J2)
    theta2 = 2 * J2 * ((rt.expected(4) - rt.expected(2)) * 0.5 + rt.expected(2))
    req = bidding.JobRequirements(eps, theta2)
    two = bidding.optimal_two_bids(req, 2, 4, J2, k, price, rt)
    out.append(Check(s, "two-bid b1*", two.b1, 0.6, 1e-9, "abs"))
    out.append(Check(s, "two-bid b2*", two.b2, 0.4, 1e-9, "abs"))
    out.append(Check(s, "two-bid deadline tight", two.expected_completion, theta2, 1e-9, "rel"))
    out.append(Check(s, "two-bid error tight", two.expected_error, eps, 1e-9, "rel"))
    g = np.linspace(0.2, 1.0, 200)
    best = math.inf
    for b1 in g[1:]:
        for b2 in g[g <= b1]:
            p = bidding.BidPlan(b1, b2, 2, 4, J2)
            if bidding.expected_completion_two_bids(p, price, rt) > theta2 * (1 + 1e-12):
                continue
            if bidding.expected_inverse_active(b1, b2, 2, 4, price) > 0.375 * (1 + 1e-12):
                continue
            best = min(best, bidding.expected_cost_two_bids(p, price, rt))
    out.append(Check(s, "two-bid optimum vs 200x200 grid", two.expected_cost, best, 1e-9, "le"))
    res = preemptible.workers_iterations_raw(1.0, 0.9, 0.05, 0.2, 300)
    brute = min((nn * jj for nn in range(1, 201) for jj in range(1, 301)
                 if 0.9 ** jj + 0.05 * (1 - 0.9 ** jj) / (nn * 0.1) <= 0.2))
    out.append(Check(s, "workers x iterations vs brute force", float(res.n * res.J), float(brute),
                     0.0, "abs"))
    out.append(Check(s, "H(J) bisection residual", res.h_residual, 0.0, 1e-10, "abs"))
    prob = eta_instance()
    sol = preemptible.optimize_eta(prob)
    lo, hi = prob.domain()
    eg = np.linspace(lo, hi, 100_001)
    ok = prob.feasible(eg)
    out.append(Check(s, "growth rate vs 10^5-point grid", sol.eta, float(eg[ok][0]),
                     float(eg[1] - eg[0]), "abs"))
    out.append(Check(s, "midpoint convexity violations (100 triples)",
                     float(midpoint_violations(prob, 100, seed)), 0.0, 0.0, "abs"))
    return out


def midpoint_violations(prob, count=100, seed=0):
    """Count sampled pairs in the feasible region where objective, completion or error
    exceeds its chord at the midpoint."""
    rng = np.random.default_rng(seed)
    lo, hi = preemptible.optimize_eta(prob).interval
    bad = 0
    for _ in range(count):
        a, b = np.sort(rng.uniform(lo, hi, 2))
        m = 0.5 * (a + b)
        for f in (prob.objective, prob.completion, prob.error):
            fa, fb, fm = float(f(a)), float(f(b)), float(f(m))
            if fm > 0.5 * (fa + fb) + 1e-12 * max(1.0, abs(fa), abs(fb)):
                bad += 1
                break
    return bad


def eta_instance(J=50):
    """Small growth-rate program with beta = 0.9 and chi = 1."""
    kk = SgdConstants(L=1.0, c=0.2, mu=1.0, mu_G=1.0, M=0.2, M_V=0.0, alpha=0.5, G0=1.0)
    return preemptible.EtaProblem(kk, n0=1, q=0.3, chi=1.0, J=J, runtime=1.0, theta=60.0,
                                  eps=0.008)


def run_suite(name, seed=0):
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    names = SUITES[:-1] if name == "all" else (name,)
    checks = []
    for n in names:
        checks.extend({"formulas": formulas, "bounds": bounds, "optimizers": optimizers}[n](seed=seed))
    return checks
