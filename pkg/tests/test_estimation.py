from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drlab.demand import DemandParams, ParamBox
from drlab.estimation import (
    EstimatorState,
    QuantileEstimate,
    SingularInformation,
    empirical_quantile,
    quantile_error_chain,
    truncate,
)

BOX = ParamBox(1.0, 3.0, 2.0)
finite = st.floats(-50, 50, allow_nan=False)


def fed(points) -> EstimatorState:
    s = EstimatorState(capacity=2)
    for p, d in points:
        s.observe(p, d)
    return s


class TestObserve:
    def test_single(self):
        s = fed([(1.0, 3.0)])
        assert (s.t, s.sum_p, s.sum_p2, s.sum_d, s.sum_pd) == (1, 1.0, 1.0, 3.0, 3.0)

    def test_two(self):
        s = fed([(1.0, 3.0), (2.0, 5.0)])
        assert (s.t, s.sum_p, s.sum_p2, s.sum_d, s.sum_pd) == (2, 3.0, 5.0, 8.0, 13.0)

    def test_long_run_matches_recomputation(self, rng):
        p = rng.uniform(0, 2, 10**4)
        d = 3 * p + 1 + rng.normal(0, 0.1, p.size)
        s = fed(zip(p, d))
        assert s.t == 10**4
        np.testing.assert_array_equal(s.prices, p)
        for got, ref in [
            (s.sum_p, math.fsum(p)),
            (s.sum_p2, math.fsum(p * p)),
            (s.sum_d, math.fsum(d)),
            (s.sum_pd, math.fsum(p * d)),
        ]:
            assert got == pytest.approx(ref, rel=1e-9)


class TestLse:
    def test_interpolation(self):
        assert fed([(0, 1), (1, 3)]).lse() == DemandParams(2.0, 1.0)

    def test_collinear(self):
        th = fed([(0, 1), (1, 3), (2, 5)]).lse()
        assert th.a == pytest.approx(2.0, abs=1e-12) and th.b == pytest.approx(1.0, abs=1e-12)

    def test_identical_prices_singular(self):
        with pytest.raises(SingularInformation):
            fed([(1, 2), (1, 4)]).lse()
        with pytest.raises(SingularInformation):
            fed([(1, 2)]).lse()

    @given(
        st.floats(1.0, 3.0), st.floats(0.0, 2.0),
        st.lists(st.floats(0, 10), min_size=2, max_size=30, unique=True),
    )
    def test_exact_recovery(self, a, b, prices):
        prices = np.array(prices)
        if np.ptp(prices) < 1e-3:
            return
        s = fed((p, a * p + b) for p in prices)
        th = truncate(s.lse(), BOX)
        assert abs(th.a - a) <= 1e-9 and abs(th.b - b) <= 1e-9

    def test_matches_lstsq(self, rng):
        p = rng.uniform(0, 3, 200)
        d = 1.7 * p + 0.4 + rng.normal(0, 0.3, p.size)
        th = fed(zip(p, d)).lse()
        ref, *_ = np.linalg.lstsq(np.column_stack([p, np.ones_like(p)]), d, rcond=None)
        np.testing.assert_allclose([th.a, th.b], ref, rtol=1e-10)

    def test_error_identity(self, rng):
        # theta_t - theta = J_t^{-1} sum (p_k, 1)^T eps_k
        theta = np.array([2.0, 1.0])
        p = rng.uniform(0.2, 1.5, 500)
        eps = rng.uniform(-0.5, 0.5, p.size)
        s = fed(zip(p, theta[0] * p + theta[1] + eps))
        X = np.column_stack([p, np.ones_like(p)])
        expect = np.linalg.solve(X.T @ X, X.T @ eps)
        got = s.lse().as_array() - theta
        np.testing.assert_allclose(got, expect, rtol=1e-7, atol=1e-12)


class TestTruncate:
    @pytest.mark.parametrize(
        "raw,expect", [((0.5, 2.5), (1.0, 2.0)), ((2.0, 1.0), (2.0, 1.0)), ((4.0, -1.0), (3.0, 0.0))]
    )
    def test_examples(self, raw, expect):
        assert truncate(DemandParams(*raw), BOX) == DemandParams(*expect)

    @given(finite, finite, st.floats(1.0, 3.0), st.floats(0.0, 2.0))
    def test_contraction(self, a, b, ta, tb):
        theta = DemandParams(ta, tb)
        raw = DemandParams(a, b)
        assert truncate(raw, BOX).distance(theta) <= raw.distance(theta) + 1e-12


class TestResiduals:
    def test_examples(self):
        s = fed([(0, 1), (1, 3), (2, 5)])
        np.testing.assert_allclose(s.residuals(DemandParams(2, 1)), 0.0)
        assert fed([(0, 1)]).residuals(DemandParams(1, 0))[0] == 1.0
        np.testing.assert_allclose(s.residuals(DemandParams(2, 1.25)), -0.25)


class TestEmpiricalQuantile:
    @pytest.mark.parametrize("alpha,rank,value", [(0.5, 2, 2.0), (0.1, 1, 1.0), (1.0, 3, 3.0)])
    def test_examples(self, alpha, rank, value):
        q = empirical_quantile([3.0, 1.0, 2.0], alpha, prices=[10.0, 20.0, 30.0])
        assert (q.index, q.value) == (rank, value)
        assert q.price == {3.0: 10.0, 1.0: 20.0, 2.0: 30.0}[value]

    def test_exact_rank_at_integer_alpha(self):
        vals = np.arange(20.0)[::-1]
        for k in range(1, 21):
            assert empirical_quantile(vals, k / 20).value == k - 1
        # 0.3 * 10 is 3.0000000000000004 in floating point
        assert empirical_quantile(np.arange(10.0), 0.3).index == 3

    def test_ties_by_observation_order(self):
        q = empirical_quantile([1.0, 0.0, 1.0, 1.0], 0.75, prices=[5.0, 6.0, 7.0, 8.0])
        assert (q.index, q.value, q.price) == (3, 1.0, 7.0)

    def test_rejects(self):
        with pytest.raises(ValueError):
            empirical_quantile([], 0.5)
        with pytest.raises(ValueError):
            empirical_quantile([1.0], 0.0)

    @given(
        st.lists(st.integers(-5, 5), min_size=1, max_size=40),
        st.floats(0.001, 1.0),
    )
    def test_matches_stable_sort(self, vals, alpha):
        vals = np.array(vals, dtype=float)
        prices = np.arange(vals.size, dtype=float)
        q = empirical_quantile(vals, alpha, prices)
        order = np.argsort(vals, kind="stable")
        i = q.index
        assert 1 <= i <= vals.size
        assert (i - 1) / vals.size < alpha + 1e-12 and alpha <= i / vals.size + 1e-12
        assert q.value == vals[order[i - 1]]
        assert q.price == prices[order[i - 1]]


class TestInformation:
    def test_single_zero_price(self):
        assert fed([(0.0, 1.0)]).info_min_eigenvalue() == 0.0

    def test_two_prices(self):
        assert fed([(0.0, 0.0), (1.0, 0.0)]).info_min_eigenvalue() == pytest.approx((3 - math.sqrt(5)) / 2, rel=1e-14)

    @pytest.mark.parametrize("prices,expect", [([2.0, 2.0, 2.0], 0.0), ([0.0, 1.0], 0.5), ([0.0, 1.0, 2.0], 2.0)])
    def test_dispersion(self, prices, expect):
        assert fed((p, 0.0) for p in prices).price_dispersion() == pytest.approx(expect, abs=1e-15)

    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=50))
    def test_matches_eigen_solve(self, prices):
        s = fed((p, 0.0) for p in prices)
        p = np.array(prices)
        J = np.array([[np.sum(p * p), np.sum(p)], [np.sum(p), p.size]])
        lo, hi = np.linalg.eigvalsh(J)
        lmin = s.info_min_eigenvalue()
        assert lmin >= 0
        assert lmin == pytest.approx(max(lo, 0.0), abs=1e-9 * hi)
        # Vieta: lambda_min * lambda_max = t J_t
        if s.price_dispersion() > 1e-6 * np.sum(p * p):
            assert lmin * (s.t + s.sum_p2 - lmin) == pytest.approx(s.t * s.price_dispersion(), rel=1e-9)

    def test_dispersion_lower_bound(self, rng):
        # lambda_min >= J_t / (1 + max p^2)
        p = rng.uniform(0, 2, 300)
        s = fed((x, 0.0) for x in p)
        assert s.info_min_eigenvalue() >= s.price_dispersion() / (1 + np.max(p * p)) - 1e-12


class TestEstimate:
    def test_cached_and_in_box(self, rng):
        p = rng.uniform(0, 2, 50)
        s = fed(zip(p, 10 * p + rng.normal(0, 1, p.size)))
        th, q = s.estimate(BOX, 0.1)
        assert BOX.contains(th)
        assert s.estimate(BOX, 0.1)[0] is th
        s.observe(1.0, 1.0)
        assert s.estimate(BOX, 0.1)[0] is not th
        np.testing.assert_allclose(q.value, empirical_quantile(s.residuals(th)[:50], 0.1).value)


class TestQuantileChain:
    def test_exact_parameters(self, rng):
        theta = DemandParams(2.0, 1.0)
        # dyadic data so residuals reproduce the shocks bit for bit
        p = rng.integers(0, 9, 40) / 8
        eps = rng.integers(-8, 9, p.size) / 16
        s = fed(zip(p, 2 * p + 1 + eps))
        q_hat = empirical_quantile(s.residuals(theta), 0.1, s.prices)
        true_q = -0.4
        lhs, t1, t2 = quantile_error_chain(theta, q_hat, theta, true_q, empirical_quantile(eps, 0.1).value)
        assert t2 == 0.0 and lhs == t1

    def test_all_zero(self):
        q = QuantileEstimate(0.0, 1, 0.3)
        assert quantile_error_chain(DemandParams(1, 0), q, DemandParams(1, 0), 0.0, 0.0) == (0.0, 0.0, 0.0)

    def test_paired_price_form_can_fail(self):
        # the selected residual sits at p=0, but the order statistic moved by the
        # fit error at p=5, which exceeds sqrt(1 + 0^2) |theta_hat - theta|
        theta, theta_hat = DemandParams(2.0, 0.0), DemandParams(1.0, 0.0)
        prices, eps = np.array([0.0, 5.0]), np.array([0.5, -3.0])
        s = fed(zip(prices, 2 * prices + eps))
        q_hat = empirical_quantile(s.residuals(theta_hat), 0.5, s.prices)
        shock_q = empirical_quantile(eps, 0.5).value
        lhs, t1, t2 = quantile_error_chain(theta_hat, q_hat, theta, -3.0, shock_q)
        assert q_hat.price == 0.0
        assert lhs > t1 + t2
        # with the largest observed price the bound holds
        assert lhs <= t1 + math.sqrt(1 + prices.max() ** 2) * theta_hat.distance(theta)
