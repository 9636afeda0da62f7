"""Optimal spot bids for synchronous SGD.

A worker runs while its bid is at least the prevailing price and pays that
price.  With one bid b for all n workers the job either runs with n workers
or idles, so the bid only stretches wall-clock time and shifts the average
price paid.  With two bids b1 >= b2 the first n1 workers run whenever the
price is below b1 and the remaining n - n1 join when it is also below b2.
"""

import dataclasses
import math
from typing import Optional

from spotsgd.convergence import SgdConstants, error_bound, iterations_for_error, q_epsilon
from spotsgd.errors import (DeadlineInfeasibleError, ErrorFloorError, InfeasibleBidError,
                            InfeasibleError, QRangeError)
from spotsgd.price_model import PriceModel, mean_price_below
from spotsgd.runtime import RuntimeModel

__all__ = [
    "JobRequirements", "BidPlan", "expected_completion_uniform", "expected_cost_uniform",
    "optimal_uniform_bid", "expected_inverse_active", "expected_cost_two_bids",
    "expected_completion_two_bids", "optimal_two_bids", "co_optimize_group_size",
    "co_optimize_iterations", "no_interruptions_plan", "bid_plan", "feasible_iteration_range",
]

# relative slack when testing Q against 1/n and 1/n1
Q_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class JobRequirements:
    eps: float
    deadline: float

    def __post_init__(self):
        if not self.eps > 0 or not self.deadline > 0:
            raise ValueError("error target and deadline must be positive")


@dataclasses.dataclass(frozen=True)
class BidPlan:
    b1: float
    b2: float
    n1: int
    n: int
    J: int
    expected_cost: float = math.nan
    expected_completion: float = math.nan
    expected_error: float = math.nan
    strategy: str = "two-bids"
    inputs: dict = dataclasses.field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 1 <= self.n1 <= self.n:
            raise ValueError(f"need 1 <= n1 <= n, got n1={self.n1}, n={self.n}")
        if self.b2 > self.b1:
            raise ValueError(f"need b2 <= b1, got b1={self.b1}, b2={self.b2}")
        if self.J < 0:
            raise ValueError("J must be non-negative")

    @property
    def is_uniform(self):
        return self.b1 == self.b2 or self.n1 == self.n

    def gamma(self, price: PriceModel):
        return float(price.cdf(self.b2)) / float(price.cdf(self.b1))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["inputs"] = dict(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


def _accept_prob(price, b):
    F = float(price.cdf(b))
    if F <= 0.0:
        raise InfeasibleBidError(b)
    return F


def expected_completion_uniform(J, n, b, price: PriceModel, rt: RuntimeModel) -> float:
    """J E[R(n)] / F(b): iterations run only in the fraction F(b) of time slots."""
    return J * rt.expected(n) / _accept_prob(price, b)


def expected_cost_uniform(J, n, b, price: PriceModel, rt: RuntimeModel) -> float:
    return J * n * rt.expected(n) * mean_price_below(price, b)


def expected_inverse_active(b1, b2, n1, n, price: PriceModel) -> float:
    """E[1/y] over running iterations: y = n w.p. gamma = F(b2)/F(b1), else n1."""
    F1 = _accept_prob(price, b1)
    gamma = min(1.0, float(price.cdf(b2)) / F1)
    return 1.0 / n1 - gamma * (1.0 / n1 - 1.0 / n)


def _two_bid_terms(J, n1, n, b1, b2, price, rt):
    F1 = _accept_prob(price, b1)
    if b2 > b1:
        raise ValueError("need b2 <= b1")
    low = float(price.partial_expectation(b2))
    high = float(price.partial_expectation(b1)) - low
    return F1, low, high


def expected_cost_two_bids(plan: BidPlan, price: PriceModel, rt: RuntimeModel) -> float:
    """(J/F(b1)) [n E[R(n)] int_{p_lo}^{b2} p f + n1 E[R(n1)] int_{b2}^{b1} p f]."""
    F1, low, high = _two_bid_terms(plan.J, plan.n1, plan.n, plan.b1, plan.b2, price, rt)
    return plan.J / F1 * (plan.n * rt.expected(plan.n) * low
                          + plan.n1 * rt.expected(plan.n1) * high)


def expected_completion_two_bids(plan: BidPlan, price: PriceModel, rt: RuntimeModel) -> float:
    F1 = _accept_prob(price, plan.b1)
    gamma = min(1.0, float(price.cdf(plan.b2)) / F1)
    return plan.J / F1 * (gamma * rt.expected(plan.n) + (1 - gamma) * rt.expected(plan.n1))


def bid_plan(J, n1, n, b1, b2, price, rt, k: Optional[SgdConstants] = None,
             strategy="two-bids", inputs=None) -> BidPlan:
    """Assemble a plan with its predicted cost, completion time and error bound."""
    raw = BidPlan(b1, b2, n1, n, J, strategy=strategy)
    err = math.nan
    if k is not None and J > 0:
        e = expected_inverse_active(b1, b2, n1, n, price)
        err = _constant_bound(k, J, e)
    return dataclasses.replace(
        raw,
        expected_cost=expected_cost_two_bids(raw, price, rt),
        expected_completion=expected_completion_two_bids(raw, price, rt),
        expected_error=err,
        inputs=dict(inputs or {}),
    )


def _constant_bound(k, J, e):
    bJ = k.beta ** J
    return bJ * k.G0 + k.floor_coeff * e * (1.0 - bJ)


def no_interruptions_plan(J, n, price, rt, k=None) -> BidPlan:
    """Bid the maximum price for every worker so the job never pauses."""
    return bid_plan(J, n, n, price.upper, price.upper, price, rt, k,
                    strategy="no-interruptions")


def optimal_uniform_bid(req: JobRequirements, n, k: SgdConstants, price: PriceModel,
                        rt: RuntimeModel) -> BidPlan:
    """Cheapest single bid: run the minimal J and make the deadline exactly tight."""
    J = max(1, iterations_for_error(k, req.eps, 1.0 / n))
    busy = J * rt.expected(n)
    ratio = busy / req.deadline
    if ratio > 1.0:
        raise DeadlineInfeasibleError(
            f"deadline {req.deadline} is shorter than the uninterrupted runtime {busy} "
            f"of {J} iterations with {n} workers", min_deadline=busy)
    b = float(price.quantile(ratio))
    return bid_plan(J, n, n, b, b, price, rt, k, strategy="optimal-one-bid",
                    inputs={"eps": req.eps, "deadline": req.deadline, "n": n})


def feasible_iteration_range(k: SgdConstants, eps, n1, n):
    """Iteration counts J with 1/n <= Q(eps) <= 1/n1, as (lo, hi); hi may be inf."""
    lo = max(1, iterations_for_error(k, eps, 1.0 / n))
    try:
        hi = iterations_for_error(k, eps, 1.0 / n1)
        if q_epsilon(k, eps, max(hi, 1)) > (1.0 / n1) * (1 + Q_TOL):
            hi -= 1
    except ErrorFloorError:
        hi = math.inf
    return lo, hi


def optimal_two_bids(req: JobRequirements, n1, n, J, k: SgdConstants, price: PriceModel,
                     rt: RuntimeModel) -> BidPlan:
    """Closed-form optimal (b1, b2) for fixed group sizes and iteration count.

    gamma* = (1/n1 - Q)/(1/n1 - 1/n) makes the error constraint tight; F(b1*) is
    then chosen so the expected completion time equals the deadline.
    """
    if not 1 <= n1 <= n:
        raise ValueError("need 1 <= n1 <= n")
    Q = q_epsilon(k, req.eps, J)
    lo, hi = 1.0 / n, 1.0 / n1
    if Q < lo * (1 - Q_TOL) or Q > hi * (1 + Q_TOL):
        rng = feasible_iteration_range(k, req.eps, n1, n)
        where = (f"feasible J interval is [{rng[0]}, {rng[1]}]" if rng[0] <= rng[1]
                 else "no iteration count puts Q(eps) in range for these group sizes")
        raise QRangeError(
            f"Q(eps)={Q:.6g} outside [1/n, 1/n1] = [{lo:.6g}, {hi:.6g}] at J={J}; {where}",
            q=Q, lower=lo, upper=hi, feasible_iterations=rng)
    if n1 == n:
        gamma = 1.0
    else:
        gamma = min(1.0, max(0.0, (hi - Q) / (hi - lo)))
    Rn, Rn1 = rt.expected(n), rt.expected(n1)
    busy = J * ((Rn - Rn1) * gamma + Rn1)
    ratio = busy / req.deadline
    if ratio > 1.0:
        raise DeadlineInfeasibleError(
            f"deadline {req.deadline} below the uninterrupted runtime {busy}", min_deadline=busy)
    b1 = float(price.quantile(ratio))
    b2 = float(price.quantile(gamma * float(price.cdf(b1))))
    b2 = min(b2, b1)
    strategy = "optimal-one-bid" if gamma == 1.0 else "optimal-two-bids"
    return bid_plan(J, n1, n, b1, b2, price, rt, k, strategy=strategy,
                    inputs={"eps": req.eps, "deadline": req.deadline, "n1": n1, "n": n,
                            "J": J, "Q": Q, "gamma": gamma})


def _tiebreak(plan):
    return (plan.expected_cost, plan.J, plan.n1, plan.b1)


def co_optimize_group_size(req: JobRequirements, n, J, k, price, rt) -> BidPlan:
    """Exhaustive search over n1 in 1..n at fixed J."""
    if n > 10_000:
        raise ValueError("group-size search is limited to n <= 10^4")
    best = None
    q_only = True
    for n1 in range(1, n + 1):
        try:
            plan = optimal_two_bids(req, n1, n, J, k, price, rt)
        except QRangeError:
            continue
        except (DeadlineInfeasibleError, InfeasibleBidError):
            q_only = False
            continue
        if best is None or _tiebreak(plan) < _tiebreak(best):
            best = plan
    if best is None:
        msg = f"no group size n1 in 1..{n} is feasible at J={J}"
        if q_only:
            raise QRangeError(msg + f"; Q(eps)={q_epsilon(k, req.eps, J):.6g} is outside "
                              f"[1/{n}, 1]", q=q_epsilon(k, req.eps, J), lower=1.0 / n, upper=1.0)
        raise InfeasibleError(msg)
    return best


def co_optimize_iterations(req: JobRequirements, n1, n, k, price, rt) -> BidPlan:
    """Scan J over the range where Q(eps) lands in [1/n, 1/n1] and the deadline holds."""
    lo, hi = feasible_iteration_range(k, req.eps, n1, n)
    deadline_max = math.floor(req.deadline / rt.expected(n1))
    hi = min(hi, deadline_max)
    best = None
    for J in range(lo, int(hi) + 1):
        try:
            plan = optimal_two_bids(req, n1, n, J, k, price, rt)
        except (QRangeError, DeadlineInfeasibleError, InfeasibleBidError, ErrorFloorError):
            continue
        if best is None or _tiebreak(plan) < _tiebreak(best):
            best = plan
    if best is None:
        raise InfeasibleError(f"no iteration count in [{lo}, {hi}] is feasible")
    return best


def plan_error(plan: BidPlan, k: SgdConstants, price: PriceModel) -> float:
    e = expected_inverse_active(plan.b1, plan.b2, plan.n1, plan.n, price)
    return error_bound(k, [e] * plan.J)
