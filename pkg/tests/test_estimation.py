from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from boundedcp import estimation as est
from boundedcp.bar_model import BarParams, BoundedSeries, simulate_bar, transition_prob
from boundedcp.cusum import vw_hat_cls
from boundedcp.errors import DegenerateSeries, NonpositiveVariance, OptimizerFailure
from boundedcp.estimation import (
    DELTA,
    Method,
    OptimizerWarning,
    clamp_to_box,
    cls_closed_form,
    cls_estimate,
    cls_objective,
    cml_derivatives,
    cml_estimate,
    cml_loglik,
    mql_closed_form,
    mql_estimate,
    mql_objective,
    mql_weight,
    transition_counts,
)

from .conftest import random_params


def residual_fit(series: BoundedSeries, weights=None) -> np.ndarray:
    """Numerical (rho, p) minimizer of the (weighted) squared residuals."""
    x = series.counts.astype(float)
    N = series.upper_bound
    sw = np.ones(x.size - 1) if weights is None else np.sqrt(weights)

    def resid(theta):
        rho, p = theta
        return sw * (x[1:] - rho * x[:-1] - N * p * (1 - rho))

    fit = optimize.least_squares(
        resid, x0=[0.0, x.mean() / N], bounds=([-5, -5], [0.999, 5]),
        xtol=1e-15, ftol=1e-15, gtol=1e-15,
    )
    return fit.x


def random_series(rng, n=200, N=10):
    return simulate_bar(random_params(rng, margin=0.1), N, n, rng)


class TestClamp:
    def test_interior_untouched(self):
        rho, p, changed = clamp_to_box(0.2, 0.4)
        assert (rho, p, changed) == (0.2, 0.4, False)

    def test_p_first_then_rho(self):
        rho, p, changed = clamp_to_box(-0.9, 1.2)
        assert p == pytest.approx(1 - DELTA)
        assert rho == pytest.approx(-DELTA / (1 - DELTA) + DELTA)
        assert changed

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_always_admissible(self, rho, p):
        r, q, _ = clamp_to_box(rho, p)
        BarParams(float(q), float(r))


class TestCls:
    def test_zero_residual_toy(self):
        s = BoundedSeries([0, 5, 5, 5, 5], 10)
        assert cls_objective(s, BarParams(0.5, 0.0)) == 0.0

    def test_single_transition(self):
        s = BoundedSeries([2, 7], 10)
        prm = BarParams(0.4, 0.3)
        assert cls_objective(s, prm) == pytest.approx((7 - 0.3 * 2 - 10 * 0.4 * 0.7) ** 2)

    def test_constant_series_degenerate(self):
        with pytest.raises(DegenerateSeries):
            cls_estimate(BoundedSeries([3, 3, 3, 3], 10))

    def test_unit_root_degenerate(self):
        with pytest.raises(DegenerateSeries):
            cls_estimate(BoundedSeries([1, 2, 3, 4, 5], 10))

    def test_closed_form_beats_grid(self, short_series):
        e = cls_estimate(short_series)
        assert not e.clamped
        best = e.objective_value
        for rho in np.linspace(-0.9, 0.99, 100):
            for p in np.linspace(0.01, 0.99, 100):
                # Grid points outside the admissible set are still valid for S_n.
                x = short_series.counts
                r = x[1:] - rho * x[:-1] - 10 * p * (1 - rho)
                assert best <= r @ r + 1e-9

    def test_matches_numerical_minimizer(self, rng):
        for _ in range(100):
            s = random_series(rng)
            e = cls_estimate(s)
            np.testing.assert_allclose(e.raw, residual_fit(s), atol=1e-6)

    def test_equivariance_under_relabeling(self, rng):
        for _ in range(20):
            s = random_series(rng)
            flipped = BoundedSeries(s.upper_bound - s.counts, s.upper_bound)
            a, b = cls_estimate(s).raw, cls_estimate(flipped).raw
            assert b[0] == pytest.approx(a[0], abs=1e-10)
            assert b[1] == pytest.approx(1 - a[1], abs=1e-10)

    def test_clamp_flagged(self):
        s = BoundedSeries([0, 10, 0, 10, 0, 10, 0, 9], 10)
        e = cls_estimate(s)
        assert e.clamped and e.raw[0] < -0.9
        assert e.params.rho >= est.clamp_to_box(-10.0, e.params.p)[0]

    def test_start_offset(self, short_series):
        e = cls_estimate(short_series, start=51)
        sub = BoundedSeries(short_series.counts[50:], 10)
        assert e.params == cls_estimate(sub).params
        assert e.sample_range == (51, 200)

    def test_consistency(self):
        s = simulate_bar(BarParams(0.5, 0.2), 10, 100_000, np.random.default_rng(11))
        e = cls_estimate(s)
        assert e.method is Method.CLS
        assert abs(e.params.p - 0.5) < 0.02 and abs(e.params.rho - 0.2) < 0.02

    @pytest.mark.slow
    def test_studentized_coverage(self):
        prm, n, reps = BarParams(0.4, 0.3), 2000, 1000
        z = stats.norm.ppf(0.975)
        rng = np.random.default_rng(12)
        hits = np.zeros(2)
        for _ in range(reps):
            s = simulate_bar(prm, 10, n, rng)
            e = cls_estimate(s)
            V, W = vw_hat_cls(s, e)
            Vi = np.linalg.inv(V)
            se = np.sqrt(np.diag(Vi @ W @ Vi) / (n - 1))
            hits += np.abs(e.theta - prm.theta()) <= z * se
        cover = hits / reps
        assert np.all((cover >= 0.92) & (cover <= 0.97)), cover


class TestMql:
    def test_weight_constant_at_half(self):
        pilot = BarParams(0.5, 0.4)
        w = [mql_weight(x, pilot, 10) for x in range(11)]
        np.testing.assert_allclose(w, w[0], rtol=1e-14)

    def test_weight_iid_pilot(self):
        assert mql_weight(3, BarParams(0.3, 0.0), 10) == pytest.approx(1 / 2.1)

    def test_weight_times_variance(self, rng):
        from boundedcp.bar_model import conditional_variance

        for _ in range(20):
            prm = random_params(rng)
            x = int(rng.integers(0, 11))
            assert mql_weight(x, prm, 10) * conditional_variance(x, prm, 10) == pytest.approx(
                1.0, abs=1e-12
            )

    def test_variance_floor(self):
        with pytest.raises(NonpositiveVariance):
            mql_weight(10, BarParams(1 - 1e-10, 0.5), 10)

    def test_constant_weights_reduce_to_cls(self, rng):
        x = random_series(rng).counts.astype(float)
        prev, curr = x[:-1], x[1:]
        w = np.full(prev.size, 0.37)
        a = cls_closed_form(prev.size, prev.sum(), curr.sum(), prev @ curr, prev @ prev, 10)
        b = mql_closed_form(w.sum(), w @ prev, w @ curr, w @ (prev * curr), w @ (prev * prev), 10)
        assert b[0] == pytest.approx(a[0], abs=1e-10)
        assert b[1] == pytest.approx(a[1], abs=1e-10)

    def test_matches_weighted_minimizer(self, rng):
        for _ in range(100):
            s = random_series(rng)
            e = mql_estimate(s)
            w = np.array([mql_weight(int(v), e.pilot, 10) for v in s.counts[:-1]])
            np.testing.assert_allclose(e.raw, residual_fit(s, w), atol=1e-6)
            assert e.objective_value == pytest.approx(mql_objective(s, e.params, e.pilot))

    def test_pilot_degeneracy_propagates(self):
        with pytest.raises(DegenerateSeries):
            mql_estimate(BoundedSeries([4, 4, 4, 4], 10))

    def test_consistency(self):
        s = simulate_bar(BarParams(0.3, 0.1), 10, 100_000, np.random.default_rng(13))
        e = mql_estimate(s)
        assert abs(e.params.p - 0.3) < 0.02 and abs(e.params.rho - 0.1) < 0.02


class TestCmlLikelihood:
    def test_single_transition(self):
        prm = BarParams(0.3, 0.4)
        s = BoundedSeries([2, 5], 10)
        assert cml_loglik(s, prm) == pytest.approx(np.log(transition_prob(2, 5, 1, prm, 10)))

    def test_two_state_chain(self, rng):
        prm = BarParams(0.35, 0.25)
        s = simulate_bar(prm, 1, 300, rng)
        x = s.counts
        a, b = prm.alpha, prm.beta
        table = {(1, 1): a, (1, 0): 1 - a, (0, 1): b, (0, 0): 1 - b}
        ll = sum(np.log(table[(int(i), int(j))]) for i, j in zip(x[:-1], x[1:]))
        assert cml_loglik(s, prm) == pytest.approx(ll, rel=1e-12)

    def test_truth_beats_distant(self, long_series):
        truth = BarParams(0.5, 0.4)
        for far in (BarParams(0.3, 0.4), BarParams(0.5, 0.0), BarParams(0.7, 0.7)):
            assert cml_loglik(long_series, truth) > cml_loglik(long_series, far)

    def test_transition_counts(self):
        C = transition_counts(BoundedSeries([0, 1, 1, 0, 1], 2))
        assert C[0, 1] == 2 and C[1, 1] == 1 and C[1, 0] == 1 and C.sum() == 4


class TestCmlDerivatives:
    def test_finite_differences(self, rng):
        s = random_series(rng)
        h = 1e-5
        for _ in range(20):
            prm = random_params(rng, margin=0.05)
            d = cml_derivatives(s, prm)
            rho, p = prm.rho, prm.p
            ll = lambda r, q: cml_loglik(s, BarParams(q, r))  # noqa: E731
            fd = np.array([
                (ll(rho + h, p) - ll(rho - h, p)) / (2 * h),
                (ll(rho, p + h) - ll(rho, p - h)) / (2 * h),
            ])
            np.testing.assert_allclose(d.score, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())
            sc = lambda r, q: cml_derivatives(s, BarParams(q, r)).score  # noqa: E731
            fd_h = np.column_stack([
                (sc(rho + h, p) - sc(rho - h, p)) / (2 * h),
                (sc(rho, p + h) - sc(rho, p - h)) / (2 * h),
            ])
            np.testing.assert_allclose(d.hessian, fd_h, rtol=1e-4, atol=1e-4 * np.abs(fd_h).max())
            assert d.observed_info[0, 1] == d.observed_info[1, 0]
            assert d.n_transitions == 199

    def test_information_positive_at_mle(self, long_series):
        e = cml_estimate(long_series)
        info = cml_derivatives(long_series, e.params).observed_info
        assert np.all(np.linalg.eigvalsh(info) > 0)


class TestCmlEstimate:
    def test_two_state_mle(self, rng):
        for _ in range(5):
            s = simulate_bar(random_params(rng, margin=0.1), 1, 400, rng)
            C = transition_counts(s)
            a = C[1, 1] / C[1].sum()
            b = C[0, 1] / C[0].sum()
            rho = a - b
            e = cml_estimate(s)
            assert e.params.rho == pytest.approx(rho, abs=1e-6)
            assert e.params.p == pytest.approx(b / (1 - rho), abs=1e-6)

    def test_consistency_and_first_order(self, long_series):
        e = cml_estimate(long_series)
        assert e.converged and not e.clamped
        assert abs(e.params.p - 0.5) < 0.03 and abs(e.params.rho - 0.4) < 0.03
        assert np.linalg.norm(cml_derivatives(long_series, e.params).score) < 1e-5
        assert e.objective_value == pytest.approx(cml_loglik(long_series, e.params))

    def test_beats_cls_likelihood(self, rng):
        for _ in range(10):
            s = random_series(rng)
            e = cml_estimate(s)
            assert e.loglik >= cml_loglik(s, cls_estimate(s).params) - 1e-9

    def test_constant_series_still_estimates(self):
        e = cml_estimate(BoundedSeries([3, 3, 3, 3, 3], 10))
        assert e.method is Method.CML

    def test_too_short(self):
        with pytest.raises(DegenerateSeries):
            cml_estimate(BoundedSeries([3, 4], 10))

    def test_failure_paths(self, short_series, monkeypatch):
        monkeypatch.setattr(est, "maximize_counts", lambda c, s, d, **kw: (np.clip(s, d, 1 - d), -1e9, False))
        with pytest.warns(OptimizerWarning):
            e = cml_estimate(short_series)
        assert not e.converged
        with pytest.raises(OptimizerFailure) as info:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cml_estimate(short_series, strict=True)
        assert info.value.best is not None


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=8, max_size=40))
def test_estimates_always_admissible(values):
    s = BoundedSeries(values, 6)
    for fn in (cls_estimate, mql_estimate):
        try:
            e = fn(s)
        except (DegenerateSeries, NonpositiveVariance):
            continue
        BarParams(e.params.p, e.params.rho)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizerWarning)
        e = cml_estimate(s)
    BarParams(e.params.p, e.params.rho)
