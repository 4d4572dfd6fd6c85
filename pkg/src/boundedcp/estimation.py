"""CLS, MQL and CML estimation for one stationary BAR(1) segment.

Summation convention: a series ``x_1..x_n`` contributes the ``n - 1``
transitions ``(x_{t-1}, x_t)``, ``t = 2..n``.  No unobserved ``X_0`` is
ever used.  Parameter vectors are ordered ``theta = (rho, p)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from .bar_model import (
    BarParams,
    BoundedSeries,
    conditional_variance,
    kernel_log_derivatives,
    log_kernel_matrix,
    rho_lower_bound,
)
from .errors import DegenerateSeries, NonpositiveVariance, OptimizerFailure

__all__ = [
    "Method",
    "ParamEstimate",
    "LikelihoodDerivatives",
    "OptimizerWarning",
    "DELTA",
    "VARIANCE_FLOOR",
    "transition_counts",
    "clamp_to_box",
    "cls_closed_form",
    "mql_closed_form",
    "cls_objective",
    "cls_estimate",
    "mql_weight",
    "mql_objective",
    "mql_estimate",
    "cml_loglik",
    "loglik_from_counts",
    "theta_derivatives",
    "cml_derivatives",
    "maximize_counts",
    "cml_estimate",
]

DELTA = 1e-4
VARIANCE_FLOOR = 1e-8


class Method(str, Enum):
    CLS = "CLS"
    MQL = "MQL"
    CML = "CML"


class OptimizerWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ParamEstimate:
    """Fitted parameters of one segment.

    ``sample_range`` is the 1-based inclusive observation range used.
    ``raw`` holds the unclamped ``(rho, p)`` from the closed forms (equal
    to ``params`` unless ``clamped``).  ``loglik`` is the conditional
    log-likelihood at ``params`` when it was computed.
    """

    params: BarParams
    method: Method
    objective_value: float
    sample_range: tuple[int, int]
    clamped: bool = False
    raw: tuple[float, float] | None = None
    converged: bool = True
    loglik: float | None = None
    pilot: BarParams | None = None

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta()


@dataclass(frozen=True)
class LikelihoodDerivatives:
    """Conditional log-likelihood, its score and the information estimate.

    ``score`` is the summed gradient in ``(rho, p)``.  ``observed_info`` is
    minus the average Hessian over ``n_transitions`` terms, i.e. the
    positive-definite information estimate used by the CML CUSUM test.
    """

    loglik: float
    score: np.ndarray
    observed_info: np.ndarray
    n_transitions: int

    @property
    def hessian(self) -> np.ndarray:
        return -self.observed_info * self.n_transitions


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _pairs(series: BoundedSeries, start: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x = series.counts
    return x[start - 1 : -1], x[start:]


def transition_counts(series: BoundedSeries, start: int = 1) -> np.ndarray:
    """``C[i, j]`` = number of transitions ``i -> j`` among ``t = start+1..n``."""
    N = series.upper_bound
    prev, curr = _pairs(series, start)
    return np.bincount(prev * (N + 1) + curr, minlength=(N + 1) ** 2).reshape(N + 1, N + 1)


def clamp_to_box(rho, p, delta: float = DELTA):
    """Project ``(rho, p)`` into the compact parameter set.

    ``p`` goes to ``[delta, 1 - delta]`` first, then ``rho`` to
    ``[lower(p) + delta, 1 - delta]``.  Vectorized; returns
    ``(rho, p, changed)``.
    """
    rho = np.asarray(rho, dtype=float)
    p = np.asarray(p, dtype=float)
    p_c = np.clip(np.nan_to_num(p, nan=0.5), delta, 1.0 - delta)
    lo = np.maximum(-p_c / (1.0 - p_c), -(1.0 - p_c) / p_c) + delta
    rho_c = np.clip(np.nan_to_num(rho, nan=0.0), lo, 1.0 - delta)
    changed = (rho_c != rho) | (p_c != p)
    return rho_c, p_c, changed


def cls_closed_form(m, sx, sy, sxy, sxx, N: int):
    """Closed-form CLS from transition sums (vectorized).

    ``sx = sum x_{t-1}``, ``sy = sum x_t``, ``sxy = sum x_{t-1} x_t``,
    ``sxx = sum x_{t-1}^2`` over ``m`` transitions.  Returns raw
    ``(rho, p, degenerate)``.  Integer inputs keep the denominators exact.
    """
    m = np.asarray(m)
    num = m * np.asarray(sxy) - np.asarray(sy) * np.asarray(sx)
    den = m * np.asarray(sxx) - np.asarray(sx) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)
        pden = m * N * (1.0 - rho)
        p = (sy - rho * sx) / pden
    degenerate = (den <= 0) | ~np.isfinite(rho) | (np.abs(1.0 - rho) < 1e-12)
    return rho, p, degenerate


def mql_closed_form(sw, swx, swy, swxy, swxx, N: int):
    """Closed-form MQL from weighted transition sums (vectorized)."""
    num = sw * swxy - swy * swx
    den = sw * swxx - swx**2
    tiny = 1e-12 * np.abs(sw * swxx)
    ok = den > tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(ok, num / np.where(ok, den, 1.0), np.nan)
        p = (swy - rho * swx) / (N * (1.0 - rho) * sw)
    degenerate = ~ok | ~np.isfinite(rho) | (np.abs(1.0 - rho) < 1e-12)
    return rho, p, degenerate


def _estimate(rho_raw, p_raw, method, objective, series, start, **kw) -> ParamEstimate:
    rho, p, changed = clamp_to_box(rho_raw, p_raw)
    params = BarParams(float(p), float(rho))
    return ParamEstimate(
        params=params,
        method=method,
        objective_value=objective(params),
        sample_range=(start, series.n),
        clamped=bool(changed),
        raw=(float(rho_raw), float(p_raw)),
        **kw,
    )


# --------------------------------------------------------------------------
# CLS
# --------------------------------------------------------------------------


def cls_objective(series: BoundedSeries, params: BarParams, start: int = 1) -> float:
    """Sum of squared one-step prediction errors."""
    prev, curr = _pairs(series, start)
    N = series.upper_bound
    resid = curr - params.rho * prev - N * params.p * (1.0 - params.rho)
    return float(resid @ resid)


def cls_estimate(series: BoundedSeries, start: int = 1) -> ParamEstimate:
    """Closed-form conditional least squares, clamped into the admissible box.

    Raises
    ------
    DegenerateSeries
        When the lagged values are constant or the estimated ``rho`` is 1.
    """
    prev, curr = _pairs(series, start)
    m = prev.size
    if m < 1:
        raise DegenerateSeries("no transitions available")
    rho, p, bad = cls_closed_form(
        m, int(prev.sum()), int(curr.sum()), int(prev @ curr), int(prev @ prev),
        series.upper_bound,
    )
    if bad:
        raise DegenerateSeries("CLS denominator vanishes (constant lagged series or rho = 1)")
    return _estimate(
        rho, p, Method.CLS, lambda prm: cls_objective(series, prm, start), series, start
    )


# --------------------------------------------------------------------------
# MQL
# --------------------------------------------------------------------------


def _weights_by_state(pilot: BarParams, N: int) -> np.ndarray:
    var = conditional_variance(np.arange(N + 1), pilot, N)
    if np.any(var <= VARIANCE_FLOOR):
        raise NonpositiveVariance(f"conditional variance {var.min():.3g} below floor")
    return 1.0 / var


def mql_weight(x_prev: int, pilot: BarParams, N: int) -> float:
    """Inverse conditional variance under the pilot parameters."""
    var = float(conditional_variance(x_prev, pilot, N))
    if var <= VARIANCE_FLOOR:
        raise NonpositiveVariance(f"conditional variance {var:.3g} below floor")
    return 1.0 / var


def mql_objective(
    series: BoundedSeries, params: BarParams, pilot: BarParams, start: int = 1
) -> float:
    """Variance-weighted sum of squared prediction errors."""
    prev, curr = _pairs(series, start)
    N = series.upper_bound
    w = _weights_by_state(pilot, N)[prev]
    resid = curr - params.rho * prev - N * params.p * (1.0 - params.rho)
    return float(w @ resid**2)


def mql_estimate(series: BoundedSeries, start: int = 1) -> ParamEstimate:
    """Modified quasi-likelihood: weighted CLS with weights from a CLS pilot."""
    pilot = cls_estimate(series, start).params
    prev, curr = _pairs(series, start)
    N = series.upper_bound
    w = _weights_by_state(pilot, N)[prev]
    rho, p, bad = mql_closed_form(
        w.sum(), w @ prev, w @ curr, w @ (prev * curr), w @ (prev * prev), N
    )
    if bad:
        raise DegenerateSeries("weighted MQL denominator vanishes")
    return _estimate(
        rho, p, Method.MQL, lambda prm: mql_objective(series, prm, pilot, start),
        series, start, pilot=pilot,
    )


# --------------------------------------------------------------------------
# CML
# --------------------------------------------------------------------------


def loglik_from_counts(counts: np.ndarray, params: BarParams) -> float:
    """``sum_ij C[i, j] log P(j | i)``."""
    N = counts.shape[0] - 1
    logP = log_kernel_matrix(params.alpha, params.beta, N)
    mask = counts > 0
    return float(counts[mask] @ logP[mask])


def cml_loglik(series: BoundedSeries, params: BarParams, start: int = 1) -> float:
    """Conditional log-likelihood of ``x_{start+1..n}`` given ``x_start``."""
    return loglik_from_counts(transition_counts(series, start), params)


def _ab_derivatives(counts: np.ndarray, ab: np.ndarray):
    """Log-likelihood, gradient and Hessian in ``(alpha, beta)`` from counts."""
    N = counts.shape[0] - 1
    logp, g, H = kernel_log_derivatives(ab[0], ab[1], N)
    mask = counts > 0
    c = counts[mask].astype(float)
    return float(c @ logp[mask]), c @ g[mask], np.tensordot(c, H[mask], axes=1)


def theta_derivatives(grad_ab, hess_ab, rho: float, p: float):
    """Chain rule from ``(alpha, beta)`` to ``(rho, p)`` coordinates.

    ``alpha = p + rho (1 - p)`` and ``beta = p (1 - rho)``; both have the
    mixed second derivative ``-1`` and vanishing pure second derivatives.
    """
    J = np.array([[1.0 - p, 1.0 - rho], [-p, 1.0 - rho]])
    mixed = np.array([[0.0, -1.0], [-1.0, 0.0]])
    score = J.T @ grad_ab
    hess = J.T @ hess_ab @ J + (grad_ab[0] + grad_ab[1]) * mixed
    return score, hess


def cml_derivatives(
    series: BoundedSeries, params: BarParams, start: int = 1
) -> LikelihoodDerivatives:
    """Analytic score and information estimate at ``params``."""
    counts = transition_counts(series, start)
    ll, g, H = _ab_derivatives(counts, np.array([params.alpha, params.beta]))
    score, hess = theta_derivatives(g, H, params.rho, params.p)
    m = int(counts.sum())
    info = -(hess + hess.T) / (2.0 * m)
    return LikelihoodDerivatives(ll, score, info, m)


def _to_ab(params: BarParams) -> np.ndarray:
    return np.array([params.alpha, params.beta])


def maximize_counts(
    counts: np.ndarray,
    start_ab,
    delta: float = DELTA,
    max_iter: int = 200,
    tol: float = 1e-7,
    exit_tol: float = 1e-12,
):
    """Projected Newton ascent of the count log-likelihood over the
    ``(alpha, beta)`` box ``[delta^2, 1 - delta^2]^2``, which contains the
    compact ``(rho, p)`` set with margin ``delta``.

    Non-concave regions use a Levenberg shift of the Hessian and steps are
    backtracked under an Armijo rule.  Once the predicted gain is below
    rounding level, full steps are accepted while they shrink the projected
    gradient.  Convergence means the projected gradient of the
    per-transition log-likelihood is at most ``tol``; iteration stops early
    once it reaches ``exit_tol``.

    Returns ``(ab, loglik, converged)``.
    """
    lo, hi = delta * delta, 1.0 - delta * delta
    ab = np.clip(np.asarray(start_ab, dtype=float), lo, hi)
    m = max(float(counts.sum()), 1.0)

    def projected(point, grad):
        fixed = ((point <= lo) & (grad < 0)) | ((point >= hi) & (grad > 0))
        return fixed, np.max(np.abs(np.where(fixed, 0.0, grad)))

    ll, g, H = _ab_derivatives(counts, ab)
    for _ in range(max_iter):
        fixed, pg = projected(ab, g)
        if pg / m <= exit_tol:
            return ab, ll, True
        free = ~fixed
        Hf = H[np.ix_(free, free)]
        top = float(np.linalg.eigvalsh(Hf).max())
        # Flat directions (e.g. a state never visited) also need the shift.
        shift = 1.01 * max(top, 0.0) + 1e-8 * m if top > -1e-10 * m else 0.0
        step = np.zeros(2)
        step[free] = -np.linalg.solve(Hf - shift * np.eye(int(free.sum())), g[free])
        gain = float(g @ step)
        noise = 1e-11 * max(abs(ll), 1.0)
        if gain <= noise:
            # Within rounding of the optimum: judge the step by the gradient.
            cand = np.clip(ab + step, lo, hi)
            c_ll, c_g, c_H = _ab_derivatives(counts, cand)
            if projected(cand, c_g)[1] < pg:
                ab, ll, g, H = cand, c_ll, c_g, c_H
                continue
            return ab, ll, bool(pg / m <= tol)
        t = 1.0
        for _ in range(50):
            cand = np.clip(ab + t * step, lo, hi)
            c_ll, c_g, c_H = _ab_derivatives(counts, cand)
            if c_ll >= ll + 1e-4 * t * gain:
                break
            t *= 0.5
        else:
            return ab, ll, bool(pg / m <= tol)
        ab, ll, g, H = cand, c_ll, c_g, c_H
    return ab, ll, bool(projected(ab, g)[1] / m <= tol)


def _params_ab(ab) -> BarParams:
    a, b = float(ab[0]), float(ab[1])
    rho = a - b
    return BarParams(b / (1.0 - rho), rho)


def _lbfgs(counts: np.ndarray, start_ab, delta: float):
    m = max(float(counts.sum()), 1.0)

    def fun(ab):
        ll, g, _ = _ab_derivatives(counts, ab)
        return -ll / m, -g / m

    res = minimize(
        fun, np.clip(start_ab, delta * delta, 1 - delta * delta), jac=True, method="L-BFGS-B",
        bounds=[(delta * delta, 1 - delta * delta)] * 2, options={"maxiter": 200, "gtol": 1e-10},
    )
    return res.x


def _rho_floor(p: float, delta: float) -> tuple[float, float]:
    """Lower edge of the compact set in ``rho`` and its slope in ``p``."""
    if p <= 0.5:
        return -p / (1.0 - p) + delta, -1.0 / (1.0 - p) ** 2
    return -(1.0 - p) / p + delta, 1.0 / p**2


def _maximize_on_box(counts: np.ndarray, start: BarParams, delta: float) -> BarParams:
    """Local CML maximum over the compact set, starting from a point on it.

    The set is a box in ``(p, u)`` with ``rho = lo(p) + u (1 - delta - lo(p))``.
    """
    m = max(float(counts.sum()), 1.0)

    def to_theta(z):
        p, u = z
        lo, _ = _rho_floor(p, delta)
        return lo + u * (1.0 - delta - lo), p

    def fun(z):
        rho, p = to_theta(z)
        ll, g, H = _ab_derivatives(counts, np.array([p + rho * (1.0 - p), p * (1.0 - rho)]))
        (s_rho, s_p), _ = theta_derivatives(g, H, rho, p)
        lo, dlo = _rho_floor(z[0], delta)
        grad = np.array([s_rho * dlo * (1.0 - z[1]) + s_p, s_rho * (1.0 - delta - lo)])
        return -ll / m, -grad / m

    lo, _ = _rho_floor(start.p, delta)
    u0 = np.clip((start.rho - lo) / (1.0 - delta - lo), 0.0, 1.0)
    res = minimize(
        fun, [start.p, u0], jac=True, method="L-BFGS-B",
        bounds=[(delta, 1.0 - delta), (0.0, 1.0)],
        options={"maxiter": 200, "gtol": 1e-12, "ftol": 1e-15},
    )
    rho, p = to_theta(res.x)
    rho_c, p_c, _ = clamp_to_box(rho, p, delta)
    cand = BarParams(float(p_c), float(rho_c))
    return cand if loglik_from_counts(counts, cand) > loglik_from_counts(counts, start) else start


def _finish(ab, delta: float, counts: np.ndarray | None = None):
    """Map an ``(alpha, beta)`` optimum into the compact set.

    If the optimum lies outside, the clamped point is improved by a local
    search on the set when ``counts`` are given.
    """
    prm = _params_ab(ab)
    rho, p, changed = clamp_to_box(prm.rho, prm.p, delta)
    if changed:
        clamped = BarParams(float(p), float(rho))
        if counts is not None:
            clamped = _maximize_on_box(counts, clamped, delta)
        return clamped, True, (prm.rho, prm.p)
    return prm, False, (prm.rho, prm.p)


def cml_estimate(
    series: BoundedSeries,
    start: int = 1,
    rng: np.random.Generator | None = None,
    delta: float = DELTA,
    strict: bool = False,
) -> ParamEstimate:
    """Conditional maximum likelihood over the compact parameter set.

    Starts from the (clamped) CLS estimate, or from ``(p, rho) = (0.5, 0)``
    when CLS is degenerate.  If that start does not converge, further
    starts at ``(0.5, 0)`` and two random interior points are tried with
    L-BFGS-B followed by Newton polishing, and the best is kept.  A
    non-converged result is returned with ``converged=False`` and an
    :class:`OptimizerWarning` unless ``strict`` is set, in which case
    :class:`OptimizerFailure` is raised.
    """
    counts = transition_counts(series, start)
    if counts.sum() < 2:
        raise DegenerateSeries("CML needs at least 2 transitions")
    try:
        first = _to_ab(cls_estimate(series, start).params)
    except DegenerateSeries:
        first = _to_ab(BarParams(0.5, 0.0))
    ab, ll, ok = maximize_counts(counts, first, delta)
    if not ok:
        rng = rng if rng is not None else np.random.default_rng(0)
        starts = [_to_ab(BarParams(0.5, 0.0))] + [
            rng.uniform(0.05, 0.95, size=2) for _ in range(2)
        ]
        best = (ll, ab, ok)
        for s in [first] + starts:
            polished = maximize_counts(counts, _lbfgs(counts, s, delta), delta)
            cand = (polished[1], polished[0], polished[2])
            if cand[0] > best[0] or (cand[2] and not best[2] and cand[0] >= best[0] - 1e-9):
                best = cand
        ll, ab, ok = best
    if not ok:
        if strict:
            raise OptimizerFailure("CML optimizer did not converge", best=_params_ab(ab))
        warnings.warn("CML optimizer did not converge; returning best point", OptimizerWarning)
    params, clamped, raw = _finish(ab, delta, counts)
    loglik = loglik_from_counts(counts, params)
    return ParamEstimate(
        params=params,
        method=Method.CML,
        objective_value=loglik,
        sample_range=(start, series.n),
        clamped=clamped,
        raw=raw,
        converged=ok,
        loglik=loglik,
    )
