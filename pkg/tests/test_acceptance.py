"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py``. The verdict lines bypass output
capture so they appear in the normal pytest log.
"""

from __future__ import annotations

import os
import time
import warnings

import numpy as np
import pytest
from scipy import optimize

from boundedcp import io
from boundedcp.bar_model import (
    BarParams,
    SegmentedModel,
    conditional_mean,
    conditional_variance,
    simulate_bar,
    simulate_mcp_bar,
    transition_matrix,
)
from boundedcp.cusum import cusum_cls, cusum_mql, simulate_critical_value
from boundedcp.errors import DegenerateSeries
from boundedcp.estimation import (
    cls_estimate,
    cml_derivatives,
    cml_estimate,
    cml_loglik,
    mql_estimate,
    mql_weight,
    transition_counts,
)
from boundedcp.evaluation import (
    ExperimentConfig,
    get_scenario,
    model_fit_stats,
    segmentation_experiment,
    size_power_experiment,
)
from boundedcp.segmentation import (
    GaConfig,
    exhaustive_m_sweep,
    fit_segments,
    ga_search,
    mdl_value,
    min_spacing,
    s_ga,
)

from .conftest import random_params

pytestmark = [pytest.mark.slow, pytest.mark.acceptance]

HICP_ENV = "BOUNDEDCP_HICP_DATA"


@pytest.fixture
def verdict(capsys):
    def emit(criterion: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {criterion}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail

    return emit


def residual_fit(series, weights=None):
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


def test_criterion_1_kernel_exactness(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {"rows": 0.0, "square": 0.0, "mean": 0.0, "var": 0.0}
    for _ in range(50):
        prm = random_params(rng, margin=1e-3)
        for N in range(1, 11):
            P = transition_matrix(prm, N, 1)
            P2 = transition_matrix(prm, N, 2)
            states = np.arange(N + 1)
            worst["rows"] = max(worst["rows"], np.abs(P.sum(axis=1) - 1).max())
            worst["square"] = max(worst["square"], np.abs(P2 - P @ P).max())
            mean = P @ states
            var = P @ states**2 - mean**2
            worst["mean"] = max(worst["mean"], np.abs(mean - conditional_mean(states, prm, N)).max())
            worst["var"] = max(worst["var"], np.abs(var - conditional_variance(states, prm, N)).max())
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-10 and elapsed < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max errors {detail} (tol 1e-10); {elapsed:.2f}s (< 5s)")


def test_criterion_2_estimator_oracles(verdict):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    cls_err = mql_err = 0.0
    for _ in range(100):
        s = simulate_bar(random_params(rng, margin=0.1), 10, 200, rng)
        cls_err = max(cls_err, np.abs(cls_estimate(s).raw - residual_fit(s)).max())
        e = mql_estimate(s)
        w = np.array([mql_weight(int(v), e.pilot, 10) for v in s.counts[:-1]])
        mql_err = max(mql_err, np.abs(e.raw - residual_fit(s, w)).max())

    score_err = 0.0
    h = 1e-5
    s = simulate_bar(random_params(rng, margin=0.1), 10, 200, rng)
    for _ in range(20):
        prm = random_params(rng, margin=0.05)
        ll = lambda r, q: cml_loglik(s, BarParams(q, r))  # noqa: E731
        fd = np.array([
            (ll(prm.rho + h, prm.p) - ll(prm.rho - h, prm.p)) / (2 * h),
            (ll(prm.rho, prm.p + h) - ll(prm.rho, prm.p - h)) / (2 * h),
        ])
        score = cml_derivatives(s, prm).score
        score_err = max(score_err, np.abs(score - fd).max() / np.abs(fd).max())

    mle_err = 0.0
    for _ in range(10):
        s = simulate_bar(random_params(rng, margin=0.1), 1, 400, rng)
        C = transition_counts(s)
        a, b = C[1, 1] / C[1].sum(), C[0, 1] / C[0].sum()
        e = cml_estimate(s)
        mle_err = max(mle_err, abs(e.params.rho - (a - b)), abs(e.params.p - b / (1 - a + b)))
    elapsed = time.perf_counter() - t0
    ok = max(cls_err, mql_err, score_err, mle_err) <= 1e-6 and elapsed < 120
    verdict(
        2, ok,
        f"CLS {cls_err:.1e}, MQL {mql_err:.1e}, score rel {score_err:.1e}, "
        f"two-state MLE {mle_err:.1e} (tol 1e-6); {elapsed:.1f}s (< 120s)",
    )


def test_criterion_3_empirical_size(verdict):
    t0 = time.perf_counter()
    quick = size_power_experiment(
        ExperimentConfig("T2", 500, 1000, seed=103, methods=("CLS", "MQL"))
    )
    quick_time = time.perf_counter() - t0
    cml = size_power_experiment(ExperimentConfig("T2", 500, 300, seed=104, methods=("CML",)))
    rates = {
        "CLS": quick.size_or_power["CLS@0.05"],
        "MQL": quick.size_or_power["MQL@0.05"],
        "CML": cml.size_or_power["CML@0.05"],
    }
    ok = (
        abs(rates["CLS"] - 0.0420) <= 0.02
        and abs(rates["MQL"] - 0.0600) <= 0.02
        and 0.01 <= rates["CML"] <= 0.09
        and quick_time < 1800
    )
    verdict(
        3, ok,
        f"size CLS {rates['CLS']:.4f} (0.0420+-0.02), MQL {rates['MQL']:.4f} (0.0600+-0.02), "
        f"CML {rates['CML']:.4f} ([0.01, 0.09], r=300); CLS/MQL {quick_time:.0f}s",
    )


def test_criterion_4_empirical_power(verdict):
    power = {}
    for seed, sid in enumerate(("T13", "T32", "T21")):
        rep = size_power_experiment(ExperimentConfig(sid, 200, 300, seed=110 + seed, gammas=(0.05,)))
        power[sid] = {k.split("@")[0]: v for k, v in rep.size_or_power.items()}
    strong = all(power[sid][m] >= 0.99 for sid in ("T13", "T32") for m in ("CLS", "MQL", "CML"))
    t21 = power["T21"]
    ordered = t21["CML"] > t21["MQL"] > t21["CLS"]
    ok = strong and t21["CML"] >= 0.75 and ordered
    text = "; ".join(
        f"{sid} " + " ".join(f"{m} {v:.3f}" for m, v in power[sid].items()) for sid in power
    )
    verdict(4, ok, f"{text} (>= 0.99 on T13/T32, T21 CML >= 0.75 and CML > MQL > CLS)")


def test_criterion_5_critical_values(verdict):
    t0 = time.perf_counter()
    q99, q95 = simulate_critical_value([0.01, 0.05], 5000, 100_000, np.random.default_rng(105))
    elapsed = time.perf_counter() - t0
    ok = abs(q99 - 3.269) <= 0.05 and abs(q95 - 2.408) <= 0.04 and elapsed < 120
    verdict(
        5, ok,
        f"simulated 99% {q99:.4f} (3.269+-0.05), 95% {q95:.4f} (2.408+-0.04); "
        f"exact law gives 3.3956 and 2.5084; {elapsed:.1f}s (< 120s)",
    )


def test_criterion_6_segmentation_consistency(verdict):
    a2 = {
        n: segmentation_experiment(ExperimentConfig("A2", n, 200, seed=120 + i))
        for i, n in enumerate((200, 500, 800))
    }
    b2 = segmentation_experiment(ExperimentConfig("B2", 800, 200, seed=125))
    paper_d = {200: 0.0615, 500: 0.0183, 800: 0.0126}
    d = {n: rep.d_mean for n, rep in a2.items()}
    ok = (
        a2[500].cr_m >= 0.90
        and d[200] > d[500] > d[800]
        and all(abs(d[n] - paper_d[n]) <= 0.03 for n in d)
        and b2.cr_m >= 0.88
    )
    verdict(
        6, ok,
        f"A2 CR(n=500) {a2[500].cr_m:.3f} (>= 0.90); A2 d " +
        " -> ".join(f"{d[n]:.4f}" for n in (200, 500, 800)) +
        " (decreasing, each within 0.03 of 0.0615/0.0183/0.0126); "
        f"B2 CR(n=800) {b2.cr_m:.3f} (>= 0.88)",
    )


def test_criterion_7_sweep_comparison(verdict):
    model = get_scenario("A2").model(500)
    rng = np.random.default_rng(107)
    agree = faster = 0
    for _ in range(50):
        s = simulate_mcp_bar(model, 500, rng)
        t0 = time.perf_counter()
        a = s_ga(s)
        t1 = time.perf_counter()
        b = exhaustive_m_sweep(s)
        t2 = time.perf_counter()
        agree += a.m_hat == b.m_hat
        faster += (t1 - t0) < (t2 - t1)
    ok = agree >= 0.95 * 50 and faster >= 0.90 * 50
    verdict(7, ok, f"m_hat agreement {agree}/50 (>= 95%), S-GA faster {faster}/50 (>= 90%)")


def scan_single_change(series, L):
    best = np.inf
    for tau in range(L, series.n - L + 1):
        try:
            est = fit_segments(series, (tau,))
        except DegenerateSeries:
            continue
        best = min(best, mdl_value(series, (tau,), est))
    return best


def test_criterion_8_ga_small_instances(verdict):
    rng = np.random.default_rng(108)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(30, 61))
        a, b = random_params(rng, margin=0.1), random_params(rng, margin=0.1)
        tau = int(rng.integers(n // 4, 3 * n // 4))
        s = simulate_mcp_bar(SegmentedModel(10, (tau,), (a, b)), n, rng)
        res = ga_search(s, 1, GaConfig(seed=int(rng.integers(1 << 30))))
        worst = max(worst, abs(res.mdl - scan_single_change(s, min_spacing(n, 10 / n))))
    verdict(8, worst <= 1e-9, f"max |GA - exhaustive scan| {worst:.1e} over 20 instances (tol 1e-9)")


def test_criterion_9_real_data(verdict, capsys):
    path = os.environ.get(HICP_ENV)
    if not path:
        with capsys.disabled():
            print(f"\nCRITERION 9: SKIPPED | set {HICP_ENV} to the count series file")
        pytest.skip(f"{HICP_ENV} not set")
    bound = os.environ.get("BOUNDEDCP_HICP_N")
    series, _, _ = io.read_series(path, int(bound) if bound else None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cls_stat = cusum_cls(series).statistic
        mql_stat = cusum_mql(series).statistic
        fit = s_ga(series)
        runs = [s_ga(series, rng=seed).tau_hat for seed in range(20)]
    target = (91, 107, 126)
    close = all(
        len(t) == 3 and max(abs(a - b) for a, b in zip(t, target)) <= 2 for t in runs
    )
    rms = model_fit_stats(series, fit).rms
    ok = (
        abs(cls_stat - 23.9294) <= 0.01
        and abs(mql_stat - 20.2223) <= 0.01
        and (fit.tau_hat == target or close)
        and abs(rms - 1.6413) <= 0.02
    )
    verdict(
        9, ok,
        f"CLS {cls_stat:.4f} (23.9294+-0.01), MQL {mql_stat:.4f} (20.2223+-0.01), "
        f"tau {fit.tau_hat} (91, 107, 126), RMS {rms:.4f} (1.6413+-0.02)",
    )
