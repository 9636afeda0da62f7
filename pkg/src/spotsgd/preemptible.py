"""Provisioning when workers are preempted at random and bids have no effect.

Two levers remain: how many workers to provision and for how many iterations
(``co_optimize_workers_iterations``), and growing the worker count
geometrically over the run (``optimize_eta``).  Each provisioned worker is
independently preempted with probability q per iteration; iterations where
nobody is left are idle time and do not count.
"""

import dataclasses
import math
from typing import Optional, Union

import numpy as np
from scipy.special import gammaln

from spotsgd.convergence import SgdConstants
from spotsgd.errors import InfeasibleError
from spotsgd.runtime import RuntimeModel, binomial_active_mean, expected_iteration_runtime

__all__ = [
    "PreemptionLaw", "WorkerSchedule", "ProvisionPlan", "inverse_moment_uniform",
    "inverse_moment_binomial", "inverse_moment_plus_one", "fit_bound_coefficient",
    "iteration_rate", "co_optimize_workers_iterations", "workers_iterations_raw",
    "h_function", "dynamic_iteration_count", "dynamic_iteration_count_base_eta",
    "error_bound_dynamic", "compare_dynamic_static", "EtaProblem", "optimize_eta",
    "optimize_eta_joint", "golden_section", "provision_plan",
]

# q^x below this is treated as exactly zero
UNDERFLOW = 1e-300
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclasses.dataclass(frozen=True)
class PreemptionLaw:
    """Law of the active count; ``chi`` and ``d`` give E[1/y] <= d / n^chi."""

    kind: str = "binomial"
    q: float = 0.0
    chi: float = 1.0
    d: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform-active", "binomial"):
            raise ValueError(f"unknown preemption law {self.kind!r}")
        if not 0.0 <= self.q < 1.0:
            raise ValueError("preemption probability must lie in [0, 1)")
        if self.chi <= 0 or self.d <= 0:
            raise ValueError("chi and d must be positive")

    def inverse_moment(self, n):
        if self.kind == "uniform-active":
            return inverse_moment_uniform(n)
        return inverse_moment_binomial(n, self.q)

    def fitted(self, chi=None, n_max=128):
        """Copy with d replaced by the smallest valid coefficient for ``chi``."""
        chi = self.chi if chi is None else chi
        return dataclasses.replace(self, chi=chi, d=fit_bound_coefficient(self, chi, n_max))


@dataclasses.dataclass(frozen=True)
class WorkerSchedule:
    kind: str
    n0: int
    J: int
    eta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("static", "geometric"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.n0 < 1 or self.J < 1:
            raise ValueError("need n0 >= 1 and J >= 1")
        if self.kind == "geometric" and not self.eta > 1.0:
            raise ValueError("a geometric schedule needs eta > 1")

    @classmethod
    def static(cls, n, J):
        return cls("static", int(n), int(J))

    @classmethod
    def geometric(cls, n0, eta, J):
        return cls("geometric", int(n0), int(J), float(eta))

    def workers(self):
        """Provisioned count per iteration: ceil(n0 eta^(j-1)), j = 1..J."""
        if self.kind == "static":
            return np.full(self.J, self.n0, dtype=np.int64)
        j = np.arange(self.J, dtype=float)
        raw = self.n0 * np.exp(j * math.log(self.eta))
        # guard against 3.0000000000000004 rounding up to 4
        return np.ceil(raw * (1 - 1e-12)).astype(np.int64)

    def check_growth(self, beta, chi):
        if self.kind == "geometric" and not self.eta ** chi > 1.0 / beta:
            raise InfeasibleError(f"growth rate needs eta^chi > 1/beta = {1.0 / beta}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class ProvisionPlan:
    schedule: WorkerSchedule
    q: float
    unit_price: float = 1.0
    cost_proxy: float = math.nan
    expected_completion: float = math.nan
    expected_error: float = math.nan
    inputs: dict = dataclasses.field(default_factory=dict, compare=False)

    def to_dict(self, head=10):
        w = self.schedule.workers().tolist()
        listing = w if len(w) <= 2 * head else {"first": w[:head], "last": w[-head:]}
        return {
            "n0": self.schedule.n0,
            "eta": self.schedule.eta,
            "J": self.schedule.J,
            "kind": self.schedule.kind,
            "q": self.q,
            "unit_price": self.unit_price,
            "schedule": listing,
            "cost_proxy": self.cost_proxy,
            "expected_completion": self.expected_completion,
            "expected_error": self.expected_error,
            "inputs": dict(self.inputs),
        }


def inverse_moment_uniform(n) -> float:
    """E[1/y] with y uniform on {1..n}: H_n / n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return math.fsum(1.0 / k for k in range(1, int(n) + 1)) / n


def _binomial_log_pmf(n, q):
    k = np.arange(1, n + 1, dtype=float)
    return (gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)
            + k * math.log1p(-q) + (n - k) * math.log(q)), k


def inverse_moment_binomial(n, q) -> float:
    """E[1/y | y > 0] with y ~ Binomial(n, 1 - q), summed in log space."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 <= q < 1.0:
        raise ValueError("preemption probability must lie in [0, 1)")
    if q == 0.0:
        return 1.0 / n
    logp, k = _binomial_log_pmf(int(n), q)
    log_active = math.log(-math.expm1(n * math.log(q)))
    return math.fsum(np.exp(logp - log_active) / k)


def inverse_moment_plus_one(n, q) -> float:
    """E[1/(y+1)] for y ~ Binomial(n, 1 - q), unconditioned: (1 - q^(n+1)) / ((n+1)(1-q))."""
    if not 0.0 <= q < 1.0:
        raise ValueError("preemption probability must lie in [0, 1)")
    return -math.expm1((n + 1) * math.log(q)) / ((n + 1) * (1.0 - q)) if q > 0 else 1.0 / (n + 1)


def fit_bound_coefficient(law: PreemptionLaw, chi=None, n_max=128) -> float:
    """Smallest d with E[1/y] <= d / n^chi for every n in 1..n_max."""
    if chi is None:
        chi = 0.5 if law.kind == "uniform-active" else 1.0
    return max(law.inverse_moment(n) * n ** chi for n in range(1, n_max + 1))


def iteration_rate(n, q, R) -> float:
    """Iterations per second (1 - q^n) / R for deterministic per-iteration time R."""
    return (1.0 - q ** n) / R


# -- joint (n, J) for a static worker count ------------------------------------------

def h_function(J, A, beta):
    """A beta^J (J ln(1/beta) + 1 - beta^J) / (1 + beta^J (J ln(1/beta) - 1)); H(0+) = A."""
    t = J * -math.log(beta)
    x = math.exp(-t)
    gap = -math.expm1(-t)
    return A * x * (t + gap) / (gap + x * t)


def _bisect_h(A, beta, eps, tol=1e-13):
    lo, hi = 0.0, 1.0
    while h_function(hi, A, beta) > eps:
        hi *= 2.0
        if hi > 1e12:
            raise InfeasibleError("H(J) does not reach eps")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if h_function(mid, A, beta) > eps:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _workers_needed(J, A, beta, B, eps):
    """Smallest integer n with A beta^J + B (1 - beta^J)/(n (1 - beta)) <= eps."""
    bJ = beta ** J
    slack = eps - A * bJ
    if slack <= 0:
        return None
    noise = B * (1.0 - bJ) / (1.0 - beta)
    if noise == 0:
        return 1
    n = max(1, math.ceil(noise / slack))
    while A * bJ + noise / n > eps:
        n += 1
    while n > 1 and A * bJ + noise / (n - 1) <= eps:
        n -= 1
    return n


@dataclasses.dataclass(frozen=True)
class WorkersIterations:
    n: int
    J: int
    J_tilde: float
    n_closed_form: int
    J_closed_form: int
    h_residual: float
    iterations_cap: int

    @property
    def agrees_with_closed_form(self):
        return (self.n, self.J) == (self.n_closed_form, self.J_closed_form)

    def to_dict(self):
        return dataclasses.asdict(self)


def workers_iterations_raw(A, beta, B, eps, J_cap, n_cap=None) -> WorkersIterations:
    """Minimize n J subject to A beta^J + B (1 - beta^J)/(n (1 - beta)) <= eps, J <= J_cap.

    The exact integer optimum is found by a scan over J with an early stop; the
    stationary point J~ of H(J~) = eps and its rounded n are returned alongside.
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    J_cap = int(J_cap)
    if eps >= A:
        return WorkersIterations(1, 0, 0.0, 1, 0, 0.0, J_cap)
    best = None
    J = max(1, math.floor(math.log(eps / A) / math.log(beta)) if A > 0 else 1)
    while J <= J_cap:
        n = _workers_needed(J, A, beta, B, eps)
        if n is not None and (n_cap is None or n <= n_cap):
            key = (n * J, J, n)
            if best is None or key < best:
                best = key
        # n J >= J B (1 - beta^J)/((1 - beta) eps), which only grows with J
        if best is not None and J * B * (1 - beta ** J) / ((1 - beta) * eps) > best[0]:
            break
        J += 1
    if best is None:
        raise InfeasibleError(f"error target {eps} unreachable within {J_cap} iterations")

    J_t = _bisect_h(A, beta, eps)
    residual = abs(h_function(J_t, A, beta) - eps)

    def n_cont(Jv):
        return B * (1 - beta ** Jv) / ((1 - beta) * (eps - A * beta ** Jv))

    cands = [j for j in (math.floor(J_t), math.ceil(J_t)) if 1 <= j <= J_cap and eps > A * beta ** j]
    J_cf = min(cands, key=lambda j: (j * n_cont(j), j)) if cands else min(J_cap, math.ceil(J_t))
    n_cf = math.ceil(n_cont(J_t))
    return WorkersIterations(best[2], best[1], J_t, n_cf, J_cf, residual, J_cap)


def co_optimize_workers_iterations(k: SgdConstants, eps, theta, delta, d=1.0,
                                   n_cap=None) -> WorkersIterations:
    """Fewest worker-iterations n J meeting ``eps`` with J <= theta * delta.

    ``delta`` is the iteration rate (iterations per second), taken as independent
    of n; ``iteration_rate`` computes (1 - q^n)/R for a given n.
    """
    cap = math.floor(theta * delta)
    if cap < 1:
        raise InfeasibleError(f"deadline allows {theta * delta} iterations, fewer than one")
    return workers_iterations_raw(k.G0, k.beta, k.B(d), eps, cap, n_cap=n_cap)


# -- geometric schedule ----------------------------------------------------------------

def dynamic_iteration_count(J, eta, chi) -> int:
    """ceil(log_{eta^chi}(1 + (eta - 1) J))."""
    if not eta > 1 or J < 1 or chi <= 0:
        raise ValueError("need eta > 1, J >= 1 and chi > 0")
    return math.ceil(math.log1p((eta - 1.0) * J) / (chi * math.log1p(eta - 1.0)))


def dynamic_iteration_count_base_eta(J, eta) -> int:
    """The same count with base eta instead of eta^chi."""
    return dynamic_iteration_count(J, eta, 1.0)


def _geometric_partial_sum(x, n):
    """(1 - x^n)/(1 - x), continuous through x = 1."""
    lx = math.log(x)
    if abs(lx) < 1e-14:
        return float(n)
    return math.expm1(n * lx) / math.expm1(lx)


def error_bound_dynamic(k: SgdConstants, n0, eta, chi, Jp, d=1.0) -> float:
    """Bound after J' iterations with n_j = n0 eta^(j-1) workers and E[1/y_j] <= d/n_j^chi."""
    if Jp < 1:
        raise ValueError("J' must be at least 1")
    beta = k.beta
    x = 1.0 / (eta ** chi * beta)
    return (k.G0 * beta ** Jp
            + k.B(d) / n0 ** chi * beta ** (Jp - 1) * _geometric_partial_sum(x, Jp))


def _static_bound(k, J, n0, chi, d):
    bJ = k.beta ** J
    return k.G0 * bJ + k.B(d) / n0 ** chi * (1.0 - bJ) / (1.0 - k.beta)


@dataclasses.dataclass(frozen=True)
class DynamicComparison:
    J: int
    J_dynamic: int
    J_dynamic_base_eta: int
    dynamic_bound: float
    static_bound: float
    static_asymptote: float
    threshold: Optional[int]

    @property
    def dynamic_no_worse(self):
        return self.dynamic_bound <= self.static_bound

    def to_dict(self):
        return dataclasses.asdict(self)


def dynamic_threshold(k, n0, eta, chi, d=1.0, J_max=10**6):
    """Smallest J0 such that the dynamic bound at J'(J) stays <= the static bound at J
    for every J on [J0, J_max]; None if the last point already fails."""
    js = np.unique(np.concatenate([np.arange(1, min(J_max, 5000) + 1),
                                   np.geomspace(1, J_max, 2000).astype(np.int64)]))
    ok = np.array([error_bound_dynamic(k, n0, eta, chi, dynamic_iteration_count(int(J), eta, chi), d)
                   <= _static_bound(k, int(J), n0, chi, d) for J in js])
    if not ok[-1]:
        return None
    bad = np.nonzero(~ok)[0]
    return int(js[0] if bad.size == 0 else js[bad[-1] + 1])


def compare_dynamic_static(k: SgdConstants, n0, eta, chi, J, d=1.0, J_max=10**6) -> DynamicComparison:
    if not eta ** chi > 1.0 / k.beta:
        raise InfeasibleError(f"need eta^chi > 1/beta = {1.0 / k.beta}")
    Jp = dynamic_iteration_count(J, eta, chi)
    return DynamicComparison(
        J=J,
        J_dynamic=Jp,
        J_dynamic_base_eta=dynamic_iteration_count_base_eta(J, eta),
        dynamic_bound=error_bound_dynamic(k, n0, eta, chi, Jp, d),
        static_bound=_static_bound(k, J, n0, chi, d),
        static_asymptote=k.B(d) / ((1.0 - k.beta) * n0 ** chi),
        threshold=dynamic_threshold(k, n0, eta, chi, d, J_max),
    )


# -- program: minimize total worker-iterations over eta --------------------------------

def golden_section(f, a, b, tol=1e-8, max_iter=500):
    """Minimizer of a unimodal ``f`` on [a, b] to within ``tol`` in the argument."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _bisect_root(g, a, b, tol):
    """Root of g between a and b where g(a) and g(b) differ in sign."""
    ga = g(a) <= 0
    while abs(b - a) > tol:
        m = 0.5 * (a + b)
        if (g(m) <= 0) == ga:
            a = m
        else:
            b = m
    return a if ga else b


@dataclasses.dataclass(frozen=True)
class EtaProblem:
    """Data of the eta program for one J; the three functions are vectorized in eta."""

    k: SgdConstants
    n0: int
    q: float
    chi: float
    J: int
    runtime: Union[float, RuntimeModel]
    theta: float
    eps: float
    d: float = 1.0
    max_workers: float = 1e6

    def objective(self, eta):
        """(1 - eta^J)/(1 - eta), i.e. sum of eta^(j-1) over j = 1..J."""
        eta = np.asarray(eta, dtype=float)
        le = np.log(eta)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.expm1(self.J * le) / np.expm1(le)
        return np.where(np.abs(le) < 1e-14, float(self.J), out)

    def _runtimes(self, eta):
        j = np.arange(1, self.J + 1, dtype=float)
        if isinstance(self.runtime, RuntimeModel):
            rt = self.runtime
            return ((math.log(self.n0) + (j - 1)[None, :] * np.log(eta)[:, None]) / rt.rate
                    + rt.overhead)
        return np.full((eta.size, self.J), float(self.runtime))

    def completion(self, eta):
        """Left side of the deadline constraint: sum_j R_j / (1 - q^(n0 eta^j))."""
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        j = np.arange(1, self.J + 1, dtype=float)
        if self.q == 0.0:
            active = np.ones((eta.size, self.J))
        else:
            expo = self.n0 * np.exp(j[None, :] * np.log(eta)[:, None]) * math.log(self.q)
            idle = np.exp(expo)
            idle[idle < UNDERFLOW] = 0.0
            active = -np.expm1(expo)
            active[idle == 0.0] = 1.0
        out = (self._runtimes(eta) / active).sum(axis=1)
        return out if out.size > 1 else float(out[0])

    def error(self, eta):
        """Left side of the error constraint (the geometric-schedule bound at J)."""
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        out = np.array([error_bound_dynamic(self.k, self.n0, e, self.chi, self.J, self.d) for e in eta])
        return out if out.size > 1 else float(out[0])

    def domain(self):
        """(lower, upper) for eta: eta^chi > 1/beta and n0 eta^(J-1) <= max_workers."""
        lo = max(1.0, self.k.beta ** (-1.0 / self.chi)) * (1 + 1e-12)
        if self.J <= 1:
            hi = max(lo * 2, 2.0)
        else:
            hi = (self.max_workers / self.n0) ** (1.0 / (self.J - 1))
        return lo, hi

    def feasible(self, eta):
        lo, hi = self.domain()
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        return ((eta >= lo) & (eta <= hi) & (np.atleast_1d(self.completion(eta)) <= self.theta)
                & (np.atleast_1d(self.error(eta)) <= self.eps))


def _feasible_interval(g, lo, hi, tol):
    """Sublevel set {g <= 0} of a convex g on [lo, hi], or None."""
    m = golden_section(g, lo, hi, tol)
    if g(m) > 0:
        for cand in (lo, hi):
            if g(cand) <= 0:
                m = cand
                break
        else:
            return None
    left = lo if g(lo) <= 0 else _bisect_root(g, m, lo, tol)
    right = hi if g(hi) <= 0 else _bisect_root(g, m, hi, tol)
    return left, right


@dataclasses.dataclass(frozen=True)
class EtaSolution:
    eta: float
    J: int
    objective: float
    completion: float
    error: float
    interval: tuple

    def to_dict(self):
        return dataclasses.asdict(self)


def _feasible_runs(g, lo, hi, tol, points=4096):
    """Maximal runs of {g <= 0} on a grid over [lo, hi], edges refined by bisection.

    Used when g need not be convex; runs narrower than the grid spacing can be missed.
    """
    grid = np.linspace(lo, hi, points)
    ok = np.atleast_1d(g(grid)) <= 0
    runs, i = [], 0
    while i < points:
        if not ok[i]:
            i += 1
            continue
        j = i
        while j + 1 < points and ok[j + 1]:
            j += 1
        left = grid[i] if i == 0 else _bisect_root(g, grid[i], grid[i - 1], tol)
        right = grid[j] if j == points - 1 else _bisect_root(g, grid[j], grid[j + 1], tol)
        runs.append((float(left), float(right)))
        i = j + 1
    return runs


def optimize_eta(problem: EtaProblem, tol=1e-8) -> EtaSolution:
    """Golden-section search for eta over the intersection of the constraint sets.

    With a fixed per-iteration runtime every constraint is convex in eta and each
    feasible set is one interval.  The straggler runtime adds a log(eta) term that
    breaks convexity of the deadline side, so its feasible runs are located by a
    scan instead; the objective is increasing, so the leftmost usable run wins.
    """
    lo, hi = problem.domain()
    if not hi > lo:
        raise InfeasibleError(
            f"no admissible growth rate: eta must exceed {lo} but {problem.max_workers} "
            f"workers cap it at {hi}")
    err = _feasible_interval(lambda e: problem.error(e) - problem.eps, lo, hi, tol * 1e-2)

    def late(e):
        return problem.completion(e) - problem.theta

    if isinstance(problem.runtime, RuntimeModel):
        runs = _feasible_runs(late, lo, hi, tol * 1e-2)
    else:
        iv = _feasible_interval(late, lo, hi, tol * 1e-2)
        runs = [iv] if iv else []
    if err is None or not runs:
        raise InfeasibleError("no growth rate satisfies the deadline and error constraints")
    boxes = [(max(a, err[0]), min(b, err[1])) for a, b in runs]
    boxes = [b for b in boxes if b[0] <= b[1]]
    if not boxes:
        raise InfeasibleError("deadline and error constraints have disjoint feasible sets")
    box = boxes[0]
    eta = golden_section(lambda e: float(problem.objective(e)), box[0], box[1], tol)
    # the objective is increasing, so the minimizer sits at the left end up to tol
    eta = min(max(eta, box[0]), box[1])
    return EtaSolution(eta, problem.J, float(problem.objective(eta)), problem.completion(eta),
                       problem.error(eta), box)


def optimize_eta_joint(problem: EtaProblem, J_max=100_000, tol=1e-8) -> EtaSolution:
    """Scan J = 1, 2, ... while the deadline can still be met; keep the best (objective, J)."""
    best = None
    for J in range(1, J_max + 1):
        p = dataclasses.replace(problem, J=J)
        lo, hi = p.domain()
        if hi <= lo:
            break
        # the deadline side only grows with J, so once it fails everywhere we stop
        fastest = min(float(np.min(np.atleast_1d(p.completion(np.linspace(lo, hi, 64))))),
                      p.completion(golden_section(p.completion, lo, hi, tol)))
        if fastest > problem.theta:
            break
        try:
            sol = optimize_eta(p, tol)
        except InfeasibleError:
            continue
        if best is None or (sol.objective, sol.J) < (best.objective, best.J):
            best = sol
    if best is None:
        raise InfeasibleError("no (J, eta) pair meets both constraints")
    return best


def provision_plan(schedule: WorkerSchedule, q, k: SgdConstants, rt: RuntimeModel,
                   unit_price=1.0, inputs=None) -> ProvisionPlan:
    """Predicted worker-iterations, completion time and error bound for a schedule."""
    from spotsgd.convergence import error_bound

    w = schedule.workers()
    e = np.empty(w.size)
    times = np.empty(w.size)
    cache = {}
    for i, n in enumerate(w.tolist()):
        if n not in cache:
            ybar = binomial_active_mean(n, q)
            cache[n] = (inverse_moment_binomial(n, q),
                        expected_iteration_runtime(max(1.0, ybar), rt) / (1.0 - q ** n))
        e[i], times[i] = cache[n]
    return ProvisionPlan(
        schedule=schedule, q=q, unit_price=unit_price,
        cost_proxy=float(w.sum()),
        expected_completion=math.fsum(times),
        expected_error=error_bound(k, e),
        inputs=dict(inputs or {}),
    )
