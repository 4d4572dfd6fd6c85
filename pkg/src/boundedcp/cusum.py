"""CUSUM change-point tests built on CLS, MQL and CML estimates.

Prefix ``k`` means the first ``k`` observations, i.e. ``j = k - 1``
transitions.  Each statistic is

    max_j (j^2 / m) (theta_j - theta_m)^T M (theta_j - theta_m)

with ``m = n - 1`` transitions, and ``M`` is ``V W^{-1} V`` (CLS, MQL) or
the information estimate (CML), always computed from the full sample.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bar_model import BarParams, BoundedSeries
from .errors import (
    DegenerateSeries,
    InvalidSeries,
    OptimizerFailure,
    SingularMatrix,
    UnsupportedLevel,
)
from .estimation import (
    DELTA,
    VARIANCE_FLOOR,
    Method,
    OptimizerWarning,
    ParamEstimate,
    clamp_to_box,
    cls_closed_form,
    cls_estimate,
    cml_derivatives,
    cml_estimate,
    maximize_counts,
    mql_closed_form,
    mql_estimate,
    _finish,
    _lbfgs,
    _to_ab,
)

__all__ = [
    "CRITICAL_VALUES",
    "MIN_PREFIX",
    "CusumStatistic",
    "TestOutcome",
    "vw_hat_cls",
    "vw_hat_mql",
    "weighting_matrix",
    "cusum_cls",
    "cusum_mql",
    "cusum_cml",
    "cusum",
    "critical_value",
    "simulate_sup_bridge",
    "simulate_critical_value",
    "run_test",
]

CRITICAL_VALUES = {0.01: 3.269, 0.05: 2.408}
MIN_PREFIX = 5
DET_FLOOR = 1e-12
PSD_TOL = 1e-10
PREFIX_TOL = 1e-9


@dataclass(frozen=True)
class CusumStatistic:
    """Statistic and its location.

    ``argmax_k`` is the prefix length in observations.  ``skipped`` counts
    prefixes that could not be estimated.
    """

    statistic: float
    method: Method
    argmax_k: int
    k0: int
    n: int
    skipped: int = 0
    weighting: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class TestOutcome:
    """Accept/reject decision for one method and level."""

    __test__ = False

    statistic: float
    method: Method
    gamma: float
    critical_value: float
    reject: bool
    argmax_k: int
    k0: int
    critical_source: str = "table"
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "statistic": self.statistic,
            "gamma": self.gamma,
            "critical_value": self.critical_value,
            "critical_source": self.critical_source,
            "reject": self.reject,
            "argmax_k": self.argmax_k,
            "k0": self.k0,
            "skipped_prefixes": self.skipped,
        }


# --------------------------------------------------------------------------
# weighting matrices
# --------------------------------------------------------------------------


def _sym(a: float, b: float, c: float) -> np.ndarray:
    return np.array([[a, b], [b, c]], dtype=float)


def _residuals(series: BoundedSeries, params: BarParams, start: int = 1):
    x = series.counts
    prev = x[start - 1 : -1].astype(float)
    curr = x[start:].astype(float)
    N = series.upper_bound
    s = curr - params.rho * prev - N * params.p * (1.0 - params.rho)
    return prev, s


def vw_hat_cls(series: BoundedSeries, estimate: ParamEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Plug-in ``(V, W)`` matrices for the CLS estimator."""
    if estimate.method != Method.CLS:
        raise ValueError("vw_hat_cls needs a CLS estimate")
    start = estimate.sample_range[0]
    prm = estimate.params
    N = series.upper_bound
    prev, s = _residuals(series, prm, start)
    dev = prev - N * prm.p
    q = N * (1.0 - prm.rho)
    V = _sym(np.mean(dev**2), np.mean(dev) * q, q**2)
    W = _sym(np.mean((s * dev) ** 2), np.mean(s**2 * dev) * q, np.mean((s * q) ** 2))
    return V, W


def vw_hat_mql(series: BoundedSeries, estimate: ParamEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Plug-in ``(V, W)`` matrices for the MQL estimator.

    Weights come from the estimate's CLS pilot.  The off-diagonal entry of
    ``V`` keeps the residual term ``s_t``, which averages to zero at the
    unconstrained optimum.
    """
    if estimate.method != Method.MQL or estimate.pilot is None:
        raise ValueError("vw_hat_mql needs an MQL estimate with its pilot")
    start = estimate.sample_range[0]
    prm = estimate.params
    N = series.upper_bound
    prev, s = _residuals(series, prm, start)
    pilot = estimate.pilot
    var = pilot.rho * (1 - pilot.rho) * (1 - 2 * pilot.p) * prev + N * pilot.beta * (1 - pilot.beta)
    D = 1.0 / np.maximum(var, VARIANCE_FLOOR)
    dev = prev - N * prm.p
    q = N * (1.0 - prm.rho)
    V = _sym(np.mean(D * dev**2), np.mean(D * dev * (q + s)), q**2 * np.mean(D))
    Ds = D * s
    W = _sym(np.mean((Ds * dev) ** 2), np.mean(Ds**2 * dev) * q, np.mean((Ds * q) ** 2))
    return V, W


def weighting_matrix(V: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``V W^{-1} V`` via the 2x2 adjugate, symmetrized.

    Raises
    ------
    SingularMatrix
        If ``|det W| < 1e-12`` or the result has an eigenvalue below
        ``-1e-10``.
    """
    det = W[0, 0] * W[1, 1] - W[0, 1] * W[1, 0]
    if not np.isfinite(det) or abs(det) < DET_FLOOR:
        raise SingularMatrix(f"W is singular (det={det:.3g})")
    W_inv = np.array([[W[1, 1], -W[0, 1]], [-W[1, 0], W[0, 0]]]) / det
    M = V @ W_inv @ V
    return _checked_psd(M)


def _checked_psd(M: np.ndarray) -> np.ndarray:
    M = 0.5 * (M + M.T)
    if not np.all(np.isfinite(M)) or np.linalg.eigvalsh(M).min() < -PSD_TOL * max(1.0, np.abs(M).max()):
        raise SingularMatrix("weighting matrix is not positive semidefinite")
    return M


# --------------------------------------------------------------------------
# prefix sweeps
# --------------------------------------------------------------------------


def _min_transitions(series: BoundedSeries, k0: int) -> int:
    if k0 < 1:
        raise ValueError("k0 must be a positive integer")
    jmin = max(k0, MIN_PREFIX)
    if series.n - 1 < jmin:
        raise InvalidSeries(f"series of length {series.n} is too short for k0={k0}")
    return jmin


def _sweep(theta: np.ndarray, valid: np.ndarray, M: np.ndarray, jmin: int):
    """Maximize the quadratic form over prefixes ``j = jmin..m``.

    ``theta`` has shape ``(m, 2)`` with row ``j - 1`` the estimate from
    ``j`` transitions; the last row is the full-sample estimate.
    """
    m = theta.shape[0]
    j = np.arange(1, m + 1)
    diff = theta - theta[-1]
    q = np.einsum("ji,ik,jk->j", diff, M, diff) * j**2 / m
    ok = valid & (j >= jmin)
    ok[-1] = True
    q = np.where(ok, np.maximum(q, 0.0), -np.inf)
    best = int(np.argmax(q))
    skipped = int(np.count_nonzero(~valid[jmin - 1 :]))
    return float(q[best]), best + 2, skipped


def _prefix_sums(series: BoundedSeries):
    x = series.counts
    prev, curr = x[:-1], x[1:]
    return (
        np.arange(1, prev.size + 1),
        np.cumsum(prev),
        np.cumsum(curr),
        np.cumsum(prev * curr),
        np.cumsum(prev * prev),
    )


def _prefix_cls(series: BoundedSeries):
    rho, p, bad = cls_closed_form(*_prefix_sums(series), series.upper_bound)
    rho_c, p_c, _ = clamp_to_box(rho, p)
    return np.column_stack([rho_c, p_c]), ~bad


def cusum_cls(series: BoundedSeries, k0: int = 10) -> CusumStatistic:
    """CUSUM statistic from prefix CLS estimates."""
    jmin = _min_transitions(series, k0)
    full = cls_estimate(series)
    M = weighting_matrix(*vw_hat_cls(series, full))
    theta, valid = _prefix_cls(series)
    theta[-1] = full.theta
    stat, k, skipped = _sweep(theta, valid, M, jmin)
    return CusumStatistic(stat, Method.CLS, k, k0, series.n, skipped, M)


def cusum_mql(series: BoundedSeries, k0: int = 10) -> CusumStatistic:
    """CUSUM statistic from prefix MQL estimates, each with its own CLS pilot."""
    jmin = _min_transitions(series, k0)
    full = mql_estimate(series)
    M = weighting_matrix(*vw_hat_mql(series, full))

    N = series.upper_bound
    x = series.counts
    prev, curr = x[:-1], x[1:]
    pilots, valid = _prefix_cls(series)
    rho, p = pilots[:, 0], pilots[:, 1]
    states = np.arange(N + 1)
    beta = p * (1 - rho)
    var = (rho * (1 - rho) * (1 - 2 * p))[:, None] * states + (N * beta * (1 - beta))[:, None]
    valid &= np.all(var > VARIANCE_FLOOR, axis=1)
    w = 1.0 / np.maximum(var, VARIANCE_FLOOR)

    onehot = np.zeros((prev.size, N + 1))
    onehot[np.arange(prev.size), prev] = 1.0
    R = np.cumsum(onehot, axis=0)
    onehot[np.arange(prev.size), prev] = curr
    RY = np.cumsum(onehot, axis=0)
    wR, wRY = w * R, w * RY
    r_m, p_m, bad = mql_closed_form(
        wR.sum(1), wR @ states, wRY.sum(1), wRY @ states, wR @ states**2, N
    )
    valid &= ~bad
    r_c, p_c, _ = clamp_to_box(r_m, p_m)
    theta = np.column_stack([r_c, p_c])
    theta[-1] = full.theta
    stat, k, skipped = _sweep(theta, valid, M, jmin)
    return CusumStatistic(stat, Method.MQL, k, k0, series.n, skipped, M)


def _prefix_cml(counts: np.ndarray, start_ab, rng: np.random.Generator):
    ab, _, ok = maximize_counts(counts, start_ab, exit_tol=PREFIX_TOL)
    if not ok:
        starts = [start_ab, _to_ab(BarParams(0.5, 0.0))] + [
            rng.uniform(0.05, 0.95, size=2) for _ in range(2)
        ]
        best = None
        for s in starts:
            cand = maximize_counts(counts, _lbfgs(counts, s, DELTA))
            if cand[2] and (best is None or cand[1] > best[1]):
                best = cand
        if best is None:
            raise OptimizerFailure("prefix CML did not converge")
        ab = best[0]
    return ab


def cusum_cml(series: BoundedSeries, k0: int = 10, seed: int = 0) -> CusumStatistic:
    """CUSUM statistic from prefix CML estimates and the full-sample information.

    Prefix optimizations are warm-started from the previous prefix.  A
    prefix whose optimizer fails is skipped with an
    :class:`OptimizerWarning`.
    """
    jmin = _min_transitions(series, k0)
    full = cml_estimate(series)
    M = _checked_psd(cml_derivatives(series, full.params).observed_info)

    N = series.upper_bound
    x = series.counts
    m = x.size - 1
    theta = np.zeros((m, 2))
    valid = np.zeros(m, dtype=bool)
    counts = np.zeros((N + 1, N + 1), dtype=np.int64)
    np.add.at(counts, (x[: jmin - 1], x[1:jmin]), 1)
    rng = np.random.default_rng(seed)
    try:
        ab = _to_ab(cls_estimate(BoundedSeries(x[: jmin + 1], N)).params)
    except DegenerateSeries:
        ab = _to_ab(full.params)
    failures = 0
    for j in range(jmin, m):
        counts[x[j - 1], x[j]] += 1
        try:
            ab = _prefix_cml(counts, ab, rng)
        except OptimizerFailure:
            failures += 1
            continue
        prm = _finish(ab, DELTA, counts)[0]
        theta[j - 1] = (prm.rho, prm.p)
        valid[j - 1] = True
    if failures:
        warnings.warn(f"{failures} CML prefixes skipped after optimizer failure", OptimizerWarning)
    theta[-1] = full.theta
    valid[-1] = True
    stat, k, skipped = _sweep(theta, valid, M, jmin)
    return CusumStatistic(stat, Method.CML, k, k0, series.n, skipped, M)


_DISPATCH = {Method.CLS: cusum_cls, Method.MQL: cusum_mql, Method.CML: cusum_cml}


def cusum(series: BoundedSeries, method: Method | str, k0: int = 10) -> CusumStatistic:
    return _DISPATCH[Method(method)](series, k0)


# --------------------------------------------------------------------------
# critical values
# --------------------------------------------------------------------------


def critical_value(gamma: float) -> float:
    """Tabulated asymptotic critical value.

    Raises
    ------
    UnsupportedLevel
        For levels other than 0.01 and 0.05; callers fall back to
        :func:`simulate_critical_value`.
    """
    for level, value in CRITICAL_VALUES.items():
        if abs(gamma - level) < 1e-12:
            return value
    raise UnsupportedLevel(f"no tabulated critical value for gamma={gamma}")


def simulate_sup_bridge(
    grid: int, reps: int, rng: np.random.Generator, batch: int = 1000
) -> np.ndarray:
    """Draws of ``sup_t |B(t)|^2`` for a 2-d Brownian bridge on ``grid`` steps.

    Each bridge is a Gaussian random walk ``S`` pinned by ``S_k - (k/g) S_g``.
    """
    out = np.empty(reps)
    frac = np.arange(1, grid + 1) / grid
    per = max(1, min(batch, int(4e6 // (2 * grid))))
    done = 0
    while done < reps:
        b = min(per, reps - done)
        walk = np.cumsum(rng.standard_normal((b, 2, grid)), axis=2) / np.sqrt(grid)
        walk -= walk[:, :, -1:] * frac
        out[done : done + b] = np.max(np.sum(walk**2, axis=1), axis=1)
        done += b
    return out


def simulate_critical_value(
    gamma, grid: int = 5000, reps: int = 100_000, rng: np.random.Generator | None = None
):
    """Monte Carlo ``1 - gamma`` quantile of the squared bridge supremum.

    ``gamma`` may be a scalar or a sequence; a sequence reuses one sample.
    """
    g = np.asarray(gamma, dtype=float)
    if np.any((g <= 0) | (g >= 1)):
        raise ValueError("gamma must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    draws = simulate_sup_bridge(grid, reps, rng)
    q = np.quantile(draws, 1.0 - g)
    return float(q) if g.ndim == 0 else q


def _resolve_critical(gamma: float, rng: np.random.Generator | None, grid: int, reps: int):
    try:
        return critical_value(gamma), "table"
    except UnsupportedLevel:
        return simulate_critical_value(gamma, grid, reps, rng), "monte_carlo"


def run_test(
    series: BoundedSeries,
    method: Method | str = Method.CLS,
    gamma: float = 0.05,
    k0: int = 10,
    rng: np.random.Generator | None = None,
    mc_grid: int = 2000,
    mc_reps: int = 20_000,
) -> TestOutcome:
    """Compute the statistic and compare it with the critical value."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    core = cusum(series, method, k0)
    crit, source = _resolve_critical(gamma, rng, mc_grid, mc_reps)
    return TestOutcome(
        statistic=core.statistic,
        method=core.method,
        gamma=gamma,
        critical_value=crit,
        reject=core.statistic > crit,
        argmax_k=core.argmax_k,
        k0=k0,
        critical_source=source,
        skipped=core.skipped,
    )
