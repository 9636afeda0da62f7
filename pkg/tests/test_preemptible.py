import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotsgd import preemptible as pe
from spotsgd.convergence import SgdConstants, error_bound
from spotsgd.errors import InfeasibleError
from spotsgd.runtime import RuntimeModel
from spotsgd.validation import midpoint_violations

K = SgdConstants(L=1.0, c=0.5, mu=1.0, mu_G=1.0, M=1.0, M_V=0.0, alpha=0.2, G0=1.0)


def binomial_pmf(n, q):
    """Exact pmf of y ~ Binomial(n, 1 - q) as rationals."""
    q = Fraction(q)
    return {k: math.comb(n, k) * (1 - q) ** k * q ** (n - k) for k in range(n + 1)}


def conditional_inverse(n, q):
    pmf = binomial_pmf(n, q)
    active = 1 - pmf[0]
    return float(sum(p / k for k, p in pmf.items() if k > 0) / active)


def plus_one_inverse(n, q):
    pmf = binomial_pmf(n, q)
    return float(sum(p / (k + 1) for k, p in pmf.items()))


class TestInverseMoments:
    def test_uniform_examples(self):
        assert pe.inverse_moment_uniform(1) == 1.0
        assert pe.inverse_moment_uniform(2) == 0.75

    def test_uniform_log_bound(self):
        for n in np.unique(np.geomspace(1, 10_000, 400).astype(int)):
            assert pe.inverse_moment_uniform(n) <= (math.log(n) + 1) / n

    def test_binomial_examples(self):
        assert pe.inverse_moment_binomial(7, 0.0) == pytest.approx(1 / 7)
        assert pe.inverse_moment_binomial(2, 0.5) == pytest.approx(5 / 6, rel=1e-14)

    @pytest.mark.parametrize("q", [0.05, 0.3, 0.5, 0.9])
    def test_binomial_enumeration(self, q):
        for n in range(1, 31):
            assert pe.inverse_moment_binomial(n, q) == pytest.approx(conditional_inverse(n, q), rel=1e-12)

    def test_plus_one_closed_form(self):
        for q in (0.0, 0.1, 0.5, 0.75):
            for n in range(0, 21):
                assert pe.inverse_moment_plus_one(n, q) == pytest.approx(plus_one_inverse(n, q),
                                                                          abs=1e-12)

    def test_large_n_is_finite(self):
        v = pe.inverse_moment_binomial(10_000, 0.4)
        assert math.isfinite(v) and v == pytest.approx(1 / 6000, rel=1e-3)

    def test_q_one_rejected(self):
        with pytest.raises(ValueError):
            pe.inverse_moment_binomial(3, 1.0)
        with pytest.raises(ValueError):
            pe.PreemptionLaw("binomial", q=1.0)

    def test_monotone(self):
        for q in (0.1, 0.6):
            vals = [pe.inverse_moment_binomial(n, q) for n in range(1, 300)]
            assert np.all(np.diff(vals) < 0)
        vals = [pe.inverse_moment_uniform(n) for n in range(1, 300)]
        assert np.all(np.diff(vals) < 0)
        for n in (2, 10, 100):
            vals = [pe.inverse_moment_binomial(n, q) for q in np.linspace(0, 0.95, 50)]
            assert np.all(np.diff(vals) > 0)

    @pytest.mark.parametrize("law", [pe.PreemptionLaw("binomial", 0.1), pe.PreemptionLaw("binomial", 0.5),
                                     pe.PreemptionLaw("binomial", 0.85),
                                     pe.PreemptionLaw("uniform-active", chi=0.5)])
    def test_fitted_coefficient_holds_to_a_thousand(self, law):
        f = law.fitted()
        for n in range(1, 1001):
            assert f.inverse_moment(n) <= f.d / n ** f.chi * (1 + 1e-12)


class TestWorkersIterations:
    A, BETA, B, EPS, CAP = 1.0, 0.9, 0.05, 0.2, 300

    def test_h_decreasing(self):
        vals = [pe.h_function(J, 1.0, 0.9) for J in np.linspace(0.01, 200, 4000)]
        assert np.all(np.diff(vals) < 0)

    def brute(self):
        best = None
        for J in range(1, self.CAP + 1):
            bJ = self.BETA ** J
            for n in range(1, 201):
                if self.A * bJ + self.B * (1 - bJ) / (n * (1 - self.BETA)) <= self.EPS:
                    key = (n * J, J, n)
                    best = key if best is None or key < best else best
                    break
        return best

    def test_brute_force_minimum(self):
        res = pe.workers_iterations_raw(self.A, self.BETA, self.B, self.EPS, self.CAP)
        work, J, n = self.brute()
        assert res.n * res.J == work
        assert (res.J, res.n) == (J, n)
        assert res.h_residual < 1e-9

    def test_tight_at_one_fewer_worker(self):
        res = pe.workers_iterations_raw(self.A, self.BETA, self.B, self.EPS, self.CAP)
        bJ = self.BETA ** res.J
        if res.n > 1:
            assert self.A * bJ + self.B * (1 - bJ) / ((res.n - 1) * (1 - self.BETA)) > self.EPS

    def test_closed_form_reported(self):
        res = pe.workers_iterations_raw(self.A, self.BETA, self.B, self.EPS, self.CAP)
        assert abs(res.J_closed_form - res.J_tilde) < 1
        assert res.n_closed_form >= 1

    def test_unreachable(self):
        with pytest.raises(InfeasibleError):
            pe.workers_iterations_raw(1.0, 0.9, 0.05, 0.2, 5)

    def test_wrapper_cap(self):
        res = pe.co_optimize_workers_iterations(K, 0.2, 100.0, 3.0, d=2.5)
        assert res.iterations_cap == 300
        with pytest.raises(InfeasibleError):
            pe.co_optimize_workers_iterations(K, 0.2, 0.1, 3.0)

    def test_iteration_rate(self):
        assert pe.iteration_rate(3, 0.5, 2.0) == pytest.approx(0.4375)


class TestDynamicCount:
    def test_examples(self):
        assert pe.dynamic_iteration_count(1000, 2.0, 1.0) == 10

    def test_slow_growth_limit(self):
        J = 5000
        assert pe.dynamic_iteration_count(J, 1 + 1e-6, 1.0) == pytest.approx(J, rel=0.01)

    def test_fixed_rate_run(self):
        # ln 5 / ln 1.0004 = 4024.399..., whose ceiling is 4025
        assert math.log(5) / math.log(1.0004) == pytest.approx(4024.40, abs=0.001)
        assert pe.dynamic_iteration_count(10_000, 1.0004, 1.0) == 4025

    @settings(max_examples=100, deadline=None)
    @given(J=st.integers(1, 10 ** 6), eta=st.floats(1.001, 4.0), chi=st.floats(0.25, 2.0))
    def test_definition_inversion(self, J, eta, chi):
        Jp = pe.dynamic_iteration_count(J, eta, chi)
        target = math.log1p((eta - 1) * J)
        assert chi * Jp * math.log(eta) >= target * (1 - 1e-12)
        assert chi * (Jp - 1) * math.log(eta) < target * (1 + 1e-12)

    def test_base_eta_variant(self):
        assert pe.dynamic_iteration_count_base_eta(1000, 2.0) == 10
        for eta in (1.3, 2.0):
            base = pe.dynamic_iteration_count_base_eta(5000, eta)
            assert base == pe.dynamic_iteration_count(5000, eta, 1.0)
            assert pe.dynamic_iteration_count(5000, eta, 2.0) == math.ceil(
                math.log1p((eta - 1) * 5000) / (2 * math.log(eta)))
            assert pe.dynamic_iteration_count(5000, eta, 2.0) < base

    def test_total_work_is_geometric(self):
        for eta in (1.05, 1.5, 2.0):
            Jp = pe.dynamic_iteration_count(1000, eta, 1.0)
            total = pe.WorkerSchedule.geometric(3, eta, Jp).workers().sum()
            assert total <= 3 * eta ** Jp / (eta - 1) + Jp


class TestDynamicBound:
    def test_static_collapse(self):
        for n0, d in ((1, 1.0), (4, 2.0)):
            e = min(1.0, d / n0)
            assert pe.error_bound_dynamic(K, n0, 1.0, 1.0, 80, d) == pytest.approx(
                error_bound(K, [e] * 80), rel=1e-10)

    @pytest.mark.parametrize("n0,eta,chi,d", [(1, 2.0, 1.0, 1.0), (3, 1.2, 1.0, 2.0),
                                              (2, 1.5, 0.5, 1.0), (5, 1.01, 1.0, 0.9)])
    def test_recursion_oracle(self, n0, eta, chi, d):
        for Jp in (1, 7, 60):
            e = [d / (n0 * eta ** (j - 1)) ** chi for j in range(1, Jp + 1)]
            assert pe.error_bound_dynamic(K, n0, eta, chi, Jp, d) == pytest.approx(
                error_bound(K, e), rel=1e-10)

    def test_decreases_to_zero(self):
        b = [pe.error_bound_dynamic(K, 1, 2.0, 1.0, Jp) for Jp in (10, 30, 60)]
        assert b[2] < b[1] < b[0]
        assert pe.error_bound_dynamic(K, 1, 2.0, 1.0, 2000) < 1e-80


class TestCompare:
    def test_asymptote_and_threshold(self):
        rep = pe.compare_dynamic_static(K, 1, 2.0, 1.0, 100, d=2.5)
        assert rep.static_asymptote == pytest.approx(0.5)
        assert rep.threshold is not None
        for J in range(rep.threshold, rep.threshold + 500):
            r = pe.compare_dynamic_static(K, 1, 2.0, 1.0, J, d=2.5, J_max=10)
            assert r.dynamic_bound <= r.static_bound
        late = pe.compare_dynamic_static(K, 1, 2.0, 1.0, 10_000, d=2.5, J_max=10)
        assert late.dynamic_bound < 0.5

    def test_slow_growth_agrees_with_static(self):
        J, eta = 200, 1 + 1e-9
        Jp = pe.dynamic_iteration_count(J, eta, 1.0)
        dyn = pe.error_bound_dynamic(K, 2, eta, 1.0, Jp)
        stat = error_bound(K, [0.5] * J)
        assert dyn == pytest.approx(stat, rel=0.01)

    def test_requires_fast_growth(self):
        with pytest.raises(InfeasibleError):
            pe.compare_dynamic_static(K, 1, 1.05, 1.0, 100)


def eta_problem(**kw):
    base = dict(k=K, n0=2, q=0.3, chi=1.0, J=50, runtime=1.0, theta=80.0, eps=0.02, d=1.0)
    base.update(kw)
    return pe.EtaProblem(**base)


class TestEta:
    def test_no_preemption_deadline_is_flat(self):
        p = eta_problem(q=0.0, runtime=1.5)
        etas = np.linspace(1.12, 1.3, 20)
        assert np.allclose(p.completion(etas), 50 * 1.5, rtol=1e-14)

    def test_objective_limit(self):
        p = eta_problem()
        assert float(p.objective(1 + 1e-8)) == pytest.approx(50, rel=1e-6)
        assert float(p.objective(1.0)) == 50

    def test_grid_oracle(self):
        p = eta_problem()
        sol = pe.optimize_eta(p)
        lo, hi = p.domain()
        grid = np.linspace(lo, min(hi, 2.0), 100_000)
        ok = p.feasible(grid)
        assert ok.any()
        best = grid[ok][np.argmin(p.objective(grid[ok]))]
        step = grid[1] - grid[0]
        assert abs(sol.eta - best) <= step
        assert sol.error <= p.eps * (1 + 1e-9) and sol.completion <= p.theta * (1 + 1e-9)

    def test_straggler_runtime(self):
        rt = RuntimeModel.exponential(2.0)
        p = eta_problem(q=0.0, runtime=rt)
        eta = 1.2
        hand = sum((math.log(2) + (j - 1) * math.log(eta)) / 2.0 for j in range(1, 51))
        assert p.completion(eta) == pytest.approx(hand, rel=1e-12)
        sol = pe.optimize_eta(dataclasses.replace(p, theta=hand * 1.5))
        assert sol.completion <= hand * 1.5

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            pe.optimize_eta(eta_problem(theta=10.0))
        with pytest.raises(InfeasibleError):
            pe.optimize_eta(eta_problem(eps=1e-30))

    def test_midpoint_convexity(self):
        assert midpoint_violations(eta_problem(), count=100, seed=3) == 0

    def test_joint_vs_per_j_scan(self):
        p = eta_problem(theta=60.0)
        joint = pe.optimize_eta_joint(p, J_max=200)
        for J in range(1, 80):
            try:
                sol = pe.optimize_eta(dataclasses.replace(p, J=J))
            except InfeasibleError:
                continue
            assert joint.objective <= sol.objective * (1 + 1e-9)

    def test_feasible_runs_on_several_pieces(self):
        g = lambda e: np.cos(8 * np.asarray(e))  # noqa: E731
        runs = pe._feasible_runs(g, 0.0, 2.0, 1e-12)
        edges = [math.pi / 16, 3 * math.pi / 16]
        # the third run is cut off by the right end of the range
        assert len(runs) == 3 and runs[2][1] == 2.0
        assert runs[0][0] == pytest.approx(edges[0], abs=1e-10)
        assert runs[0][1] == pytest.approx(edges[1], abs=1e-10)

    @pytest.mark.parametrize("theta", [150.0, 200.0])
    def test_straggler_grid_oracle(self, theta):
        p = eta_problem(runtime=RuntimeModel.exponential(2.0), theta=theta, eps=0.006)
        sol = pe.optimize_eta(p)
        lo, hi = p.domain()
        grid = np.linspace(lo, hi, 100_000)
        ok = p.feasible(grid)
        assert abs(sol.eta - grid[ok][np.argmin(p.objective(grid[ok]))]) <= grid[1] - grid[0]

    def test_underflow_guard(self):
        p = eta_problem(n0=400, q=0.9, J=200, max_workers=1e9)
        assert math.isfinite(p.completion(1.2))


class TestSchedules:
    def test_geometric_ceiling(self):
        assert pe.WorkerSchedule.geometric(2, 1.5, 5).workers().tolist() == [2, 3, 5, 7, 11]
        assert pe.WorkerSchedule.geometric(1, 2.0, 5).workers().tolist() == [1, 2, 4, 8, 16]

    def test_validation(self):
        with pytest.raises(ValueError):
            pe.WorkerSchedule.geometric(2, 1.0, 5)
        with pytest.raises(InfeasibleError):
            pe.WorkerSchedule.geometric(2, 1.05, 5).check_growth(0.9, 1.0)

    def test_static_provision_plan(self):
        rt = RuntimeModel.exponential(1.0)
        plan = pe.provision_plan(pe.WorkerSchedule.static(4, 30), 0.0, K, rt)
        assert plan.cost_proxy == 120
        assert plan.expected_completion == pytest.approx(30 * 25 / 12)
        assert plan.expected_error == pytest.approx(error_bound(K, [0.25] * 30))

    def test_plan_json_truncates(self):
        plan = pe.provision_plan(pe.WorkerSchedule.geometric(1, 1.01, 50), 0.2, K,
                                 RuntimeModel.deterministic(1.0))
        d = plan.to_dict()
        assert len(d["schedule"]["first"]) == 10 and len(d["schedule"]["last"]) == 10
