import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotsgd.convergence import (SgdConstants, bound_trajectory, error_bound, inverse_moment,
                                 iterations_for_error, jensen_penalty_check, q_epsilon,
                                 read_flat_config)
from spotsgd.errors import ErrorFloorError

K = SgdConstants(L=1.0, c=0.5, mu=1.0, mu_G=1.0, M=1.0, M_V=0.0, alpha=0.2, G0=1.0)


def recursion_oracle(k, e):
    """Unrolled bound in exact rationals: b_j = beta b_(j-1) + (alpha^2 L M / 2) e_j."""
    beta = Fraction(k.beta)
    coeff = Fraction(k.alpha) ** 2 * Fraction(k.L) * Fraction(k.M) / 2
    b = Fraction(k.G0)
    for x in e:
        b = beta * b + coeff * Fraction(x)
    return float(b)


class TestErrorBound:
    def test_noiseless(self, consts):
        assert error_bound(consts, np.zeros(30)) == pytest.approx(0.9 ** 30, rel=1e-13)

    def test_single_step(self, consts):
        assert error_bound(consts, [0.25]) == pytest.approx(0.9 + 0.02 * 0.25, rel=1e-15)

    def test_geometric_closed_form(self, consts):
        for n in (1, 3, 8):
            closed = 0.9 ** 50 + 0.2 * (1 / n) * (1 - 0.9 ** 50)
            assert error_bound(consts, [1 / n] * 50) == pytest.approx(closed, rel=1e-12)

    def test_against_exact_recursion(self, consts):
        e = np.random.default_rng(0).uniform(0.05, 1.0, 200)
        assert error_bound(consts, e) == pytest.approx(recursion_oracle(consts, e), rel=1e-12)
        traj = bound_trajectory(consts, e)
        assert traj[-1] == pytest.approx(error_bound(consts, e), rel=1e-12)
        assert traj[0] == pytest.approx(recursion_oracle(consts, e[:1]), rel=1e-14)

    def test_long_horizon_is_finite(self):
        k = SgdConstants(L=1, c=1, mu=1, mu_G=1, M=1, M_V=0, alpha=0.001, G0=1)
        v = error_bound(k, np.full(10 ** 6, 0.5))
        assert math.isfinite(v)
        assert v == pytest.approx(k.floor_coeff * 0.5 * (1 - k.beta ** 10 ** 6), rel=1e-9)

    def test_rejects_out_of_range_moments(self, consts):
        with pytest.raises(ValueError):
            error_bound(consts, [1.5])

    def test_weighting_property(self, consts):
        # moving inverse-moment mass earlier never increases the bound
        e = np.full(40, 0.5)
        early = e.copy()
        early[0] += 0.3
        early[-1] -= 0.3
        assert error_bound(consts, early) < error_bound(consts, e)


class TestQ:
    def test_inverts_constant_bound(self, consts):
        J, n = 30, 4
        eps = 0.9 ** J + 0.2 * (1 / n) * (1 - 0.9 ** J)
        assert q_epsilon(consts, eps, J) == pytest.approx(1 / n, rel=1e-12)

    def test_approaches_zero_at_floor(self, consts):
        assert q_epsilon(consts, 0.9 ** 20 + 1e-12, 20) < 1e-9

    def test_below_floor_raises(self, consts):
        with pytest.raises(ErrorFloorError) as info:
            q_epsilon(consts, 0.9 ** 10 * 0.5, 10)
        assert info.value.floor == pytest.approx(0.9 ** 10)

    @settings(max_examples=80, deadline=None)
    @given(J=st.integers(1, 400), frac=st.floats(0.01, 1.0))
    def test_round_trip(self, J, frac):
        eps = 0.9 ** J + 0.2 * frac * (1 - 0.9 ** J)
        Q = q_epsilon(K, eps, J)
        assert error_bound(K, [Q] * J) == pytest.approx(eps, rel=1e-10)


class TestIterations:
    def test_already_at_target(self, consts):
        assert iterations_for_error(consts, 1.0, 0.5) == 0

    def test_hand_logarithm(self, consts):
        assert iterations_for_error(consts, 0.35, 0.0) == 10
        assert 0.9 ** 10 < 0.35 < 0.9 ** 9

    def test_floor(self, consts):
        with pytest.raises(ErrorFloorError) as info:
            iterations_for_error(consts, 0.05, 0.25)
        assert info.value.floor == pytest.approx(0.05)

    @settings(max_examples=80, deadline=None)
    @given(eps=st.floats(0.21, 0.99), n=st.integers(1, 64))
    def test_minimal(self, eps, n):
        e = 1.0 / n
        J = iterations_for_error(K, eps, e)
        assert error_bound(K, [e] * J) <= eps
        if J > 1:
            assert error_bound(K, [e] * (J - 1)) > eps


def test_monotonicity(consts):
    e = np.full(25, 0.4)
    base = error_bound(consts, e)
    for j in range(25):
        up = e.copy()
        up[j] += 0.01
        assert error_bound(consts, up) > base
    assert error_bound(consts.replace(G0=1.1), e) > base
    vals = [error_bound(consts, [0.4] * J) for J in range(1, 60)]
    assert np.all(np.diff(vals) < 0)


class TestJensen:
    def test_degenerate(self):
        assert inverse_moment({4: 1.0}) == 0.25
        assert jensen_penalty_check({4: Fraction(1)})

    def test_enumerations(self):
        d = {1: Fraction(1, 3), 2: Fraction(1, 3), 3: Fraction(1, 3)}
        assert sum(p / y for y, p in d.items()) == Fraction(11, 18)
        assert inverse_moment(d) == pytest.approx(11 / 18)
        assert jensen_penalty_check(d, 2)
        d2 = {1: Fraction(1, 2), 9: Fraction(1, 2)}
        assert inverse_moment(d2) == pytest.approx(5 / 9)
        assert jensen_penalty_check(d2, 5)


class TestConstants:
    def test_step_size_precondition(self):
        with pytest.raises(ValueError):
            SgdConstants(L=1, c=0.5, mu=1, mu_G=1, M=1, M_V=1, alpha=0.6, G0=1)

    def test_derived_fields(self, consts):
        assert consts.beta == pytest.approx(0.9)
        assert consts.M_G == 1.0
        assert consts.A() == 1.0
        assert consts.B(2.0) == pytest.approx(0.04)

    def test_config_round_trip(self, consts):
        text = consts.to_config()
        assert SgdConstants.from_config(text) == consts
        assert read_flat_config("# comment\nL = 2\n")["L"] == "2"

    def test_inconsistent_mg(self, consts):
        d = consts.to_dict()
        d["M_G"] = 5.0
        with pytest.raises(ValueError):
            SgdConstants.from_mapping(d)
