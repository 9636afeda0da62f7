import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotsgd import bidding
from spotsgd.bidding import BidPlan, JobRequirements
from spotsgd.convergence import SgdConstants, error_bound, iterations_for_error, q_epsilon
from spotsgd.errors import DeadlineInfeasibleError, InfeasibleBidError, QRangeError
from spotsgd.price_model import make_truncated_gaussian, make_uniform
from spotsgd.runtime import RuntimeModel
from spotsgd.simulator import SimConfig, simulate

U = make_uniform(0.2, 1.0)
RT = RuntimeModel.exponential(1.0)
K = SgdConstants(L=1.0, c=0.5, mu=1.0, mu_G=1.0, M=1.0, M_V=0.0, alpha=0.2, G0=1.0)


def worked_instance(J=100):
    """Q(eps) = 0.375 at (n1, n) = (2, 4); deadline chosen so F(b1*) = 0.5."""
    eps = K.beta ** J * K.G0 + K.floor_coeff * 0.375 * (1 - K.beta ** J)
    theta = 2 * J * ((RT.expected(4) - RT.expected(2)) * 0.5 + RT.expected(2))
    return JobRequirements(eps, theta)


def brute_two_bids(req, n1, n, J, price, points=200):
    """Cheapest (b1, b2) on a grid meeting both constraints, or inf."""
    g = np.linspace(price.lower, price.upper, points)[1:]
    best = math.inf
    for b1 in g:
        for b2 in g[g <= b1]:
            plan = BidPlan(b1, b2, n1, n, J)
            if bidding.expected_completion_two_bids(plan, price, RT) > req.deadline * (1 + 1e-12):
                continue
            e = bidding.expected_inverse_active(b1, b2, n1, n, price)
            if error_bound(K, [e] * J) > req.eps * (1 + 1e-12):
                continue
            best = min(best, bidding.expected_cost_two_bids(plan, price, RT))
    return best


class TestExpectedCompletionAndCost:
    def test_completion_examples(self):
        rt2 = RuntimeModel.deterministic(2.0)
        assert bidding.expected_completion_uniform(100, 3, 0.6, U, rt2) == pytest.approx(400)
        assert bidding.expected_completion_uniform(100, 3, 1.0, U, rt2) == pytest.approx(200)
        assert bidding.expected_completion_uniform(1000, 4, 0.6, U, RT) \
            == pytest.approx(1000 * 25 / 12 / 0.5)

    def test_cost_examples(self):
        assert bidding.expected_cost_uniform(1000, 4, 0.6, U, RT) == pytest.approx(10000 / 3)
        assert bidding.expected_cost_uniform(10, 4, 1.0, U, RT) == pytest.approx(10 * 4 * 25 / 12 * 0.6)

    def test_infeasible_bid(self):
        with pytest.raises(InfeasibleBidError):
            bidding.expected_completion_uniform(10, 2, 0.2, U, RT)
        with pytest.raises(InfeasibleBidError):
            bidding.expected_cost_uniform(10, 2, 0.1, U, RT)

    @pytest.mark.parametrize("price", [U, make_truncated_gaussian(0.6, 0.175, 0.2, 1.0)])
    def test_monotone_grids(self, price):
        bids = np.linspace(0.21, 1.0, 100)
        comp = [bidding.expected_completion_uniform(50, 4, b, price, RT) for b in bids]
        cost = [bidding.expected_cost_uniform(50, 4, b, price, RT) for b in bids]
        assert np.all(np.diff(comp) <= 1e-12) and np.all(np.diff(cost) >= -1e-12)
        for b in (0.3, 0.7):
            c = [bidding.expected_cost_uniform(J, 4, b, price, RT) for J in range(1, 40)]
            t = [bidding.expected_completion_uniform(J, 4, b, price, RT) for J in range(1, 40)]
            assert np.all(np.diff(c) > 0) and np.all(np.diff(t) > 0)


class TestTwoBidFormulas:
    def test_inverse_active_examples(self):
        assert bidding.expected_inverse_active(0.6, 0.6, 2, 4, U) == pytest.approx(0.25)
        assert bidding.expected_inverse_active(0.6, 0.2, 2, 4, U) == pytest.approx(0.5)
        assert bidding.expected_inverse_active(0.6, 0.4, 2, 4, U) == pytest.approx(0.375)

    def test_collapse_to_uniform(self):
        same = BidPlan(0.7, 0.7, 2, 4, 30)
        assert bidding.expected_cost_two_bids(same, U, RT) == pytest.approx(
            bidding.expected_cost_uniform(30, 4, 0.7, U, RT), rel=1e-10)
        assert bidding.expected_completion_two_bids(same, U, RT) == pytest.approx(
            bidding.expected_completion_uniform(30, 4, 0.7, U, RT), rel=1e-12)
        low = BidPlan(0.7, 0.2, 2, 4, 30)
        assert bidding.expected_cost_two_bids(low, U, RT) == pytest.approx(
            bidding.expected_cost_uniform(30, 2, 0.7, U, RT), rel=1e-10)
        assert bidding.expected_completion_two_bids(low, U, RT) == pytest.approx(
            bidding.expected_completion_uniform(30, 2, 0.7, U, RT), rel=1e-12)

    def test_structure_in_gamma_and_f1(self):
        def evaluate(F1, gamma):
            b1 = float(U.quantile(F1))
            b2 = float(U.quantile(gamma * F1))
            p = BidPlan(b1, b2, 2, 4, 100)
            e = bidding.expected_inverse_active(b1, b2, 2, 4, U)
            return (error_bound(K, [e] * 100), bidding.expected_cost_two_bids(p, U, RT),
                    bidding.expected_completion_two_bids(p, U, RT))

        rows = np.array([evaluate(0.6, g) for g in np.linspace(0.05, 1.0, 40)])
        assert np.all(np.diff(rows[:, 0]) < 0)
        assert np.all(np.diff(rows[:, 1]) > 0) and np.all(np.diff(rows[:, 2]) > 0)
        rows = np.array([evaluate(f, 0.5) for f in np.linspace(0.1, 1.0, 40)])
        assert np.all(np.diff(rows[:, 2]) < 0) and np.all(np.diff(rows[:, 1]) > 0)

    def test_monte_carlo_agreement(self):
        plan = bidding.bid_plan(200, 2, 4, 0.6, 0.4, U, RT)
        sim = simulate(SimConfig(plan, RT, price=U, redraw_interval="matched", trials=4000, seed=5))
        assert sim.mean_cost == pytest.approx(plan.expected_cost, rel=0.02)
        assert sim.mean_completion == pytest.approx(plan.expected_completion, rel=0.02)


class TestOptimalUniformBid:
    def test_half_busy_deadline(self):
        J = iterations_for_error(K, 0.45, 0.25)
        theta = 2 * J * RT.expected(4)
        plan = bidding.optimal_uniform_bid(JobRequirements(0.45, theta), 4, K, U, RT)
        assert plan.b1 == pytest.approx(0.6) and plan.b2 == plan.b1
        assert plan.n1 == plan.n == 4 and plan.J == J
        assert plan.expected_completion == pytest.approx(theta, rel=1e-12)
        assert plan.expected_error <= 0.45

    def test_no_slack_bids_the_maximum(self):
        J = iterations_for_error(K, 0.45, 0.25)
        plan = bidding.optimal_uniform_bid(JobRequirements(0.45, J * RT.expected(4)), 4, K, U, RT)
        assert plan.b1 == pytest.approx(1.0)

    def test_deadline_infeasible(self):
        with pytest.raises(DeadlineInfeasibleError) as info:
            bidding.optimal_uniform_bid(JobRequirements(0.45, 5.0), 4, K, U, RT)
        J = iterations_for_error(K, 0.45, 0.25)
        assert info.value.min_deadline == pytest.approx(J * RT.expected(4))

    def test_grid_oracle(self):
        J = iterations_for_error(K, 0.45, 0.25)
        theta = 3.1 * J * RT.expected(4)
        plan = bidding.optimal_uniform_bid(JobRequirements(0.45, theta), 4, K, U, RT)
        feasible = [b for b in np.linspace(0.2, 1.0, 501)[1:]
                    if bidding.expected_completion_uniform(J, 4, b, U, RT) <= theta]
        best = min(bidding.expected_cost_uniform(J, 4, b, U, RT) for b in feasible)
        assert plan.expected_cost <= best + 1e-12


class TestOptimalTwoBids:
    def test_worked_instance(self):
        req = worked_instance()
        plan = bidding.optimal_two_bids(req, 2, 4, 100, K, U, RT)
        assert plan.b1 == pytest.approx(0.6, abs=1e-12)
        assert plan.b2 == pytest.approx(0.4, abs=1e-12)
        assert plan.gamma(U) == pytest.approx(0.5)
        assert plan.expected_completion == pytest.approx(req.deadline, rel=1e-9)
        assert plan.expected_error == pytest.approx(req.eps, rel=1e-9)

    def test_grid_oracle(self):
        req = worked_instance()
        plan = bidding.optimal_two_bids(req, 2, 4, 100, K, U, RT)
        assert plan.expected_cost <= brute_two_bids(req, 2, 4, 100, U) + 1e-9

    def test_q_at_one_over_n(self):
        J = 60
        eps = K.beta ** J + K.floor_coeff * 0.25 * (1 - K.beta ** J)
        req = JobRequirements(eps, 3 * J * RT.expected(4))
        plan = bidding.optimal_two_bids(req, 2, 4, J, K, U, RT)
        assert plan.b1 == plan.b2
        assert plan.strategy == "optimal-one-bid"

    def test_q_out_of_range(self):
        req = worked_instance()
        with pytest.raises(QRangeError) as info:
            bidding.optimal_two_bids(req, 3, 4, 100, K, U, RT)
        assert "feasible J interval" in str(info.value) or "no iteration count" in str(info.value)
        assert info.value.q == pytest.approx(0.375)

    def test_gaussian_tightness(self):
        g = make_truncated_gaussian(0.6, 0.175, 0.2, 1.0)
        req = worked_instance()
        plan = bidding.optimal_two_bids(req, 2, 4, 100, K, g, RT)
        assert plan.expected_completion == pytest.approx(req.deadline, rel=1e-9)
        assert plan.expected_error == pytest.approx(req.eps, rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(q=st.floats(0.26, 0.49), slack=st.floats(1.05, 4.0), J=st.integers(20, 300))
    def test_tight_constraints_property(self, q, slack, J):
        eps = K.beta ** J + K.floor_coeff * q * (1 - K.beta ** J)
        busy = J * RT.expected(4)
        req = JobRequirements(eps, busy * slack)
        plan = bidding.optimal_two_bids(req, 2, 4, J, K, U, RT)
        assert 0.2 <= plan.b2 <= plan.b1 <= 1.0
        assert plan.expected_completion == pytest.approx(req.deadline, rel=1e-9)
        assert plan.expected_error == pytest.approx(eps, rel=1e-9)


class TestCoOptimization:
    def test_group_size_vs_brute_force(self):
        req = worked_instance()
        plan = bidding.co_optimize_group_size(req, 4, 100, K, U, RT)
        Q = q_epsilon(K, req.eps, 100)
        brute = min(brute_two_bids(req, n1, 4, 100, U, points=120)
                    for n1 in range(1, 5) if Q <= 1 / n1)
        assert plan.expected_cost <= brute + 1e-9
        for n1 in range(1, 5):
            try:
                fixed = bidding.optimal_two_bids(req, n1, 4, 100, K, U, RT)
            except QRangeError:
                continue
            assert plan.expected_cost <= fixed.expected_cost + 1e-12

    def test_group_size_uniform_when_q_is_one_over_n(self):
        J = 60
        eps = K.beta ** J + K.floor_coeff * 0.25 * (1 - K.beta ** J)
        req = JobRequirements(eps, 3 * J * RT.expected(4))
        plan = bidding.co_optimize_group_size(req, 4, J, K, U, RT)
        assert plan.b1 == plan.b2 or plan.n1 == plan.n

    def test_iterations_vs_brute_force(self):
        req = JobRequirements(0.3, 100.0)
        plan = bidding.co_optimize_iterations(req, 2, 4, K, U, RT)
        lo, hi = bidding.feasible_iteration_range(K, 0.3, 2, 4)
        brute = min(brute_two_bids(req, 2, 4, J, U, points=120) for J in range(lo, int(hi) + 1))
        assert plan.expected_cost <= brute + 1e-9
        e = bidding.expected_inverse_active(plan.b1, plan.b2, 2, 4, U)
        assert abs(iterations_for_error(K, 0.3, e) - plan.J) <= 1
        for J in (lo, int(hi)):
            try:
                end = bidding.optimal_two_bids(req, 2, 4, J, K, U, RT)
            except (QRangeError, DeadlineInfeasibleError):
                continue
            assert plan.expected_cost <= end.expected_cost + 1e-12

    def test_iterations_range_unbounded_above(self):
        # the floor of Q is eps / 0.2 = 0.45 < 1/n1, so every large J keeps Q below 1/n1
        lo, hi = bidding.feasible_iteration_range(K, 0.09, 2, 4)
        assert hi == math.inf and lo >= 1
        plan = bidding.co_optimize_iterations(JobRequirements(0.09, 200.0), 2, 4, K, U, RT)
        assert plan.J <= 200.0 / RT.expected(2)


def test_plan_serialization_round_trip():
    plan = bidding.optimal_two_bids(worked_instance(), 2, 4, 100, K, U, RT)
    again = BidPlan.from_dict(plan.to_dict())
    assert again == plan


def test_plan_validation():
    with pytest.raises(ValueError):
        BidPlan(0.4, 0.6, 2, 4, 10)
    with pytest.raises(ValueError):
        BidPlan(0.6, 0.4, 5, 4, 10)


def test_no_interruptions_plan():
    plan = bidding.no_interruptions_plan(50, 4, U, RT)
    assert plan.expected_completion == pytest.approx(50 * RT.expected(4))
    assert plan.expected_cost == pytest.approx(50 * 4 * RT.expected(4) * 0.6)
