"""Binomial AR(1) processes on ``{0, ..., N}``, with and without change-points.

The BAR(1) recursion is

    X_t = alpha o X_{t-1} + beta o (N - X_{t-1}),

where ``o`` is binomial thinning, ``beta = p (1 - rho)`` and
``alpha = beta + rho``.  The pair ``(p, rho)`` is admissible when
``0 < p < 1`` and ``max(-p/(1-p), -(1-p)/p) < rho < 1``; equivalently when
``alpha`` and ``beta`` both lie in the open unit interval.

All random operations take an explicit :class:`numpy.random.Generator`;
nothing in this module touches global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import InvalidSeries, OutOfDomain

__all__ = [
    "BarParams",
    "BoundedSeries",
    "SegmentedModel",
    "rho_lower_bound",
    "validate_params",
    "params_from_thinning",
    "binomial_thin",
    "bar_step",
    "conditional_mean",
    "conditional_variance",
    "transition_prob",
    "transition_matrix",
    "kernel_matrix",
    "log_kernel_matrix",
    "kernel_log_derivatives",
    "simulate_bar",
    "simulate_mcp_bar",
    "spawn_generators",
]

# Above this bound the kernel is evaluated in log space.
LOG_SPACE_THRESHOLD = 30
# Exact integer binomial coefficients are used up to this bound.
EXACT_BINOM_MAX = 60


def rho_lower_bound(p: float) -> float:
    """Infimum of admissible ``rho`` for a given ``p``."""
    return max(-p / (1.0 - p), -(1.0 - p) / p)


@dataclass(frozen=True)
class BarParams:
    """Parameters ``(p, rho)`` of one stationary BAR(1) regime."""

    p: float
    rho: float

    def __post_init__(self) -> None:
        p, rho = float(self.p), float(self.rho)
        if not (0.0 < p < 1.0) or not math.isfinite(p):
            raise OutOfDomain("p", p, f"p={p!r} must lie in (0, 1)")
        lo = rho_lower_bound(p)
        if not (lo < rho < 1.0) or not math.isfinite(rho):
            raise OutOfDomain(
                "rho", rho, f"rho={rho!r} must lie in ({lo:.6g}, 1) for p={p:.6g}"
            )
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "rho", rho)

    @property
    def beta(self) -> float:
        return self.p * (1.0 - self.rho)

    @property
    def alpha(self) -> float:
        return self.beta + self.rho

    def theta(self) -> np.ndarray:
        """Parameter vector in ``(rho, p)`` order, as used by the estimators."""
        return np.array([self.rho, self.p])

    def thinning(self, h: int = 1) -> tuple[float, float]:
        """``(alpha_h, beta_h)`` of the h-step kernel; ``rho**h`` keeps its sign."""
        rho_h = self.rho**h
        beta_h = self.p * (1.0 - rho_h)
        return beta_h + rho_h, beta_h


def validate_params(p: float, rho: float) -> BarParams:
    """Return :class:`BarParams` or raise :class:`OutOfDomain`."""
    return BarParams(p, rho)


def params_from_thinning(alpha: float, beta: float) -> BarParams:
    """Inverse of the map ``(p, rho) -> (alpha, beta)``."""
    rho = alpha - beta
    return BarParams(beta / (1.0 - rho), rho)


@dataclass(frozen=True)
class BoundedSeries:
    """Observed counts ``x_1..x_n`` on ``{0, ..., upper_bound}``.

    ``initial`` optionally records an unobserved ``X_0`` produced by a
    simulator; estimators never use it.
    """

    counts: np.ndarray
    upper_bound: int
    initial: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        raw = np.asarray(self.counts)
        if raw.ndim != 1:
            raise InvalidSeries("counts must be one-dimensional")
        if raw.size and not np.all(np.equal(np.mod(raw, 1), 0)):
            raise InvalidSeries("counts must be integers")
        counts = raw.astype(np.int64)
        N = int(self.upper_bound)
        if N < 1 or N != self.upper_bound:
            raise InvalidSeries(f"upper bound must be a positive integer, got {self.upper_bound!r}")
        if counts.size < 2:
            raise InvalidSeries(f"need at least 2 observations, got {counts.size}")
        if counts.min() < 0 or counts.max() > N:
            bad = int(np.flatnonzero((counts < 0) | (counts > N))[0])
            raise InvalidSeries(
                f"count {counts[bad]} at position {bad + 1} outside [0, {N}]"
            )
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "upper_bound", N)

    @property
    def n(self) -> int:
        return int(self.counts.size)

    def __len__(self) -> int:
        return self.n

    def segment(self, start: int, stop: int) -> "BoundedSeries":
        """Observations ``start..stop-1`` (0-based, half open) as a new series."""
        return BoundedSeries(self.counts[start:stop], self.upper_bound)


@dataclass(frozen=True)
class SegmentedModel:
    """Piecewise BAR(1): ``segment_params[j]`` governs ``tau_j < t <= tau_{j+1}``.

    Change-points are 1-based observation indices; ``tau_0 = 0`` and
    ``tau_{m+1} = n`` are implicit.
    """

    upper_bound: int
    change_points: tuple[int, ...]
    segment_params: tuple[BarParams, ...]

    def __post_init__(self) -> None:
        cps = tuple(int(c) for c in self.change_points)
        segs = tuple(self.segment_params)
        if len(segs) != len(cps) + 1:
            raise ValueError(
                f"{len(cps)} change-points need {len(cps) + 1} segments, got {len(segs)}"
            )
        if any(c < 1 for c in cps) or any(b <= a for a, b in zip(cps, cps[1:])):
            raise ValueError(f"change-points must be strictly increasing and >= 1: {cps}")
        for a, b in zip(segs, segs[1:]):
            if a.p == b.p and a.rho == b.rho:
                raise ValueError("adjacent segments must have different parameters")
        object.__setattr__(self, "change_points", cps)
        object.__setattr__(self, "segment_params", segs)

    @property
    def m(self) -> int:
        return len(self.change_points)

    def params_at(self, t: int) -> BarParams:
        """Parameters governing 1-based time ``t``."""
        j = int(np.searchsorted(self.change_points, t, side="left"))
        return self.segment_params[j]


# --------------------------------------------------------------------------
# Thinning and one-step dynamics
# --------------------------------------------------------------------------


def binomial_thin(x: int, alpha: float, rng: np.random.Generator) -> int:
    """Draw ``alpha o x``, a Binomial(x, alpha) count."""
    if x == 0 or alpha <= 0.0:
        return 0
    if alpha >= 1.0:
        return int(x)
    return int(rng.binomial(x, alpha))


def bar_step(x_prev: int, params: BarParams, N: int, rng: np.random.Generator) -> int:
    """One BAR(1) transition from ``x_prev``; survivors plus recruits."""
    return binomial_thin(x_prev, params.alpha, rng) + binomial_thin(
        N - x_prev, params.beta, rng
    )


def conditional_mean(x_prev, params: BarParams, N: int):
    return params.rho * np.asarray(x_prev, dtype=float) + N * params.p * (1.0 - params.rho)


def conditional_variance(x_prev, params: BarParams, N: int):
    p, rho = params.p, params.rho
    slope = rho * (1.0 - rho) * (1.0 - 2.0 * p)
    return slope * np.asarray(x_prev, dtype=float) + N * p * (1.0 - rho) * (1.0 - p * (1.0 - rho))


# --------------------------------------------------------------------------
# Transition kernel
# --------------------------------------------------------------------------


def _log_comb(n: int, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def transition_prob(i: int, j: int, h: int, params: BarParams, N: int) -> float:
    """``P(X_t = j | X_{t-h} = i)`` by the explicit convolution sum over survivors."""
    if not (0 <= i <= N and 0 <= j <= N):
        raise ValueError(f"states must lie in [0, {N}]")
    if h < 1:
        raise ValueError("h must be a positive integer")
    a, b = params.thinning(h)
    lo, hi = max(0, i + j - N), min(i, j)
    if N <= LOG_SPACE_THRESHOLD:
        total = 0.0
        for k in range(lo, hi + 1):
            total += (
                math.comb(i, k)
                * math.comb(N - i, j - k)
                * a**k
                * (1.0 - a) ** (i - k)
                * b ** (j - k)
                * (1.0 - b) ** (N - i - j + k)
            )
        return total
    la, l1a, lb, l1b = math.log(a), math.log1p(-a), math.log(b), math.log1p(-b)
    logs = [
        _log_comb(i, k)
        + _log_comb(N - i, j - k)
        + k * la
        + (i - k) * l1a
        + (j - k) * lb
        + (N - i - j + k) * l1b
        for k in range(lo, hi + 1)
    ]
    return float(np.exp(logsumexp(logs)))


@lru_cache(maxsize=64)
def _layout(N: int):
    """Index tensors over ``(i, j, k)`` with ``k`` the number of survivors."""
    i, j, k = np.meshgrid(np.arange(N + 1), np.arange(N + 1), np.arange(N + 1), indexing="ij")
    valid = (k <= i) & (k <= j) & (j - k <= N - i)
    e1 = np.where(valid, k, 0).astype(float)
    e2 = np.where(valid, i - k, 0).astype(float)
    e3 = np.where(valid, j - k, 0).astype(float)
    e4 = np.where(valid, N - i - j + k, 0).astype(float)
    if N <= EXACT_BINOM_MAX:
        comb = np.array(
            [[math.comb(a, c) for c in range(N + 1)] for a in range(N + 1)], dtype=float
        )
        j0 = np.where(valid, comb[i, np.minimum(k, i)] * comb[N - i, np.clip(j - k, 0, N)], 0.0)
    else:
        j0 = None
    with np.errstate(invalid="ignore"):
        log_j0 = np.where(
            valid,
            gammaln(i + 1) - gammaln(k + 1) - gammaln(np.maximum(i - k, 0) + 1)
            + gammaln(N - i + 1) - gammaln(np.maximum(j - k, 0) + 1)
            - gammaln(np.maximum(N - i - j + k, 0) + 1),
            -np.inf,
        )
    for arr in (e1, e2, e3, e4, log_j0):
        arr.setflags(write=False)
    return valid, e1, e2, e3, e4, j0, log_j0


@lru_cache(maxsize=64)
def _int_exponents(N: int):
    _, e1, e2, e3, e4, _, _ = _layout(N)
    return tuple(e.astype(np.intp) for e in (e1, e2, e3, e4))


def _direct_terms(a: np.ndarray, b: np.ndarray, N: int) -> np.ndarray:
    """Survivor terms via gathers from integer power tables (no ``pow`` on tensors)."""
    j0 = _layout(N)[5]
    i1, i2, i3, i4 = _int_exponents(N)
    pw = np.arange(N + 1)
    tables = [np.asarray(v)[..., None] ** pw for v in (a, 1.0 - a, b, 1.0 - b)]
    return (
        j0
        * tables[0][..., i1]
        * tables[1][..., i2]
        * tables[2][..., i3]
        * tables[3][..., i4]
    )


def _xlogy(e: np.ndarray, y: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(e == 0, 0.0, e * np.log(y))


def _term_weights(alpha, beta, N: int):
    """Per-survivor-count terms and their share of the transition probability.

    Returns ``(log P, weights)`` with shapes ``(..., N+1, N+1)`` and
    ``(..., N+1, N+1, N+1)``.
    """
    if N <= LOG_SPACE_THRESHOLD:
        terms = _direct_terms(np.asarray(alpha, float), np.asarray(beta, float), N)
        prob = terms.sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            weights = terms / prob[..., None]
            log_prob = np.log(prob)
        return log_prob, np.nan_to_num(weights)
    a = np.asarray(alpha, dtype=float)[..., None, None, None]
    b = np.asarray(beta, dtype=float)[..., None, None, None]
    _, e1, e2, e3, e4, _, log_j0 = _layout(N)
    log_terms = (
        log_j0 + _xlogy(e1, a) + _xlogy(e2, 1.0 - a) + _xlogy(e3, b) + _xlogy(e4, 1.0 - b)
    )
    log_prob = logsumexp(log_terms, axis=-1)
    with np.errstate(invalid="ignore"):
        weights = np.exp(log_terms - log_prob[..., None])
    return log_prob, np.nan_to_num(weights)


def kernel_matrix(alpha, beta, N: int) -> np.ndarray:
    """One-step kernel for thinning probabilities ``(alpha, beta)``.

    ``alpha`` and ``beta`` may be arrays of equal shape ``S``; the result has
    shape ``S + (N+1, N+1)`` with rows indexed by the previous state.
    """
    if N <= LOG_SPACE_THRESHOLD:
        return _direct_terms(np.asarray(alpha, float), np.asarray(beta, float), N).sum(axis=-1)
    a = np.asarray(alpha, dtype=float)[..., None, None, None]
    b = np.asarray(beta, dtype=float)[..., None, None, None]
    _, e1, e2, e3, e4, _, log_j0 = _layout(N)
    log_terms = (
        log_j0 + _xlogy(e1, a) + _xlogy(e2, 1.0 - a) + _xlogy(e3, b) + _xlogy(e4, 1.0 - b)
    )
    return np.exp(logsumexp(log_terms, axis=-1))


def log_kernel_matrix(alpha, beta, N: int) -> np.ndarray:
    """Elementwise log of :func:`kernel_matrix`, computed in log space for large N."""
    if N <= LOG_SPACE_THRESHOLD:
        with np.errstate(divide="ignore"):
            return np.log(kernel_matrix(alpha, beta, N))
    a = np.asarray(alpha, dtype=float)[..., None, None, None]
    b = np.asarray(beta, dtype=float)[..., None, None, None]
    _, e1, e2, e3, e4, _, log_j0 = _layout(N)
    log_terms = (
        log_j0 + _xlogy(e1, a) + _xlogy(e2, 1.0 - a) + _xlogy(e3, b) + _xlogy(e4, 1.0 - b)
    )
    return logsumexp(log_terms, axis=-1)


def transition_matrix(params: BarParams, N: int, h: int = 1) -> np.ndarray:
    """Full ``(N+1) x (N+1)`` h-step transition matrix."""
    a, b = params.thinning(h)
    return kernel_matrix(a, b, N)


def kernel_log_derivatives(alpha, beta, N: int):
    """Log transition probabilities with first and second derivatives.

    Derivatives are taken with respect to the thinning probabilities
    ``(alpha, beta)``.  Each survivor term of the convolution is a product
    of four powers, so its log-derivative is a sum of four simple
    fractions; the kernel's log-derivatives are term-weighted averages.

    Returns
    -------
    log_prob : ndarray, shape ``S + (N+1, N+1)``
    grad : ndarray, shape ``S + (N+1, N+1, 2)``
    hess : ndarray, shape ``S + (N+1, N+1, 2, 2)``
    """
    log_prob, w = _term_weights(alpha, beta, N)
    a = np.asarray(alpha, dtype=float)[..., None, None, None]
    b = np.asarray(beta, dtype=float)[..., None, None, None]
    _, e1, e2, e3, e4, _, _ = _layout(N)
    da = e1 / a - e2 / (1.0 - a)
    db = e3 / b - e4 / (1.0 - b)
    dda = -e1 / a**2 - e2 / (1.0 - a) ** 2
    ddb = -e3 / b**2 - e4 / (1.0 - b) ** 2
    ga = (w * da).sum(-1)
    gb = (w * db).sum(-1)
    haa = (w * (da * da + dda)).sum(-1) - ga * ga
    hab = (w * da * db).sum(-1) - ga * gb
    hbb = (w * (db * db + ddb)).sum(-1) - gb * gb
    grad = np.stack([ga, gb], axis=-1)
    hess = np.stack([np.stack([haa, hab], -1), np.stack([hab, hbb], -1)], -2)
    return log_prob, grad, hess


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


def spawn_generators(seed, count: int) -> list[np.random.Generator]:
    """Independent generators derived from one master seed.

    Children are ``SeedSequence(seed).spawn(count)``; stream ``i`` depends
    only on ``(seed, i)``, so results do not change with the worker count.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(count)]


def simulate_bar(
    params: BarParams,
    N: int,
    n: int,
    rng: np.random.Generator,
    init: int | None = None,
) -> BoundedSeries:
    """Simulate ``x_1..x_n``; ``X_0`` is Binomial(N, p) unless ``init`` is given."""
    if n < 2:
        raise ValueError("n must be at least 2")
    x = int(rng.binomial(N, params.p)) if init is None else int(init)
    if not 0 <= x <= N:
        raise ValueError(f"init must lie in [0, {N}]")
    x0 = x
    a, b = params.alpha, params.beta
    out = np.empty(n, dtype=np.int64)
    for t in range(n):
        x = binomial_thin(x, a, rng) + binomial_thin(N - x, b, rng)
        out[t] = x
    return BoundedSeries(out, N, initial=x0)


def simulate_mcp_bar(
    model: SegmentedModel,
    n: int,
    rng: np.random.Generator,
    restart: bool = False,
    init: int | None = None,
) -> BoundedSeries:
    """Simulate a piecewise BAR(1) path of length ``n``.

    By default the path is continuous: the first value of a new regime
    evolves from the last value of the previous one under the new
    parameters.  With ``restart=True`` the first value of each later regime
    is drawn from its stationary Binomial(N, p_j) marginal instead.
    """
    if model.change_points and model.change_points[-1] >= n:
        raise ValueError(f"last change-point {model.change_points[-1]} must be < n={n}")
    N = model.upper_bound
    first = model.segment_params[0]
    x = int(rng.binomial(N, first.p)) if init is None else int(init)
    x0 = x
    bounds = (0,) + model.change_points + (n,)
    out = np.empty(n, dtype=np.int64)
    for j, prm in enumerate(model.segment_params):
        a, b = prm.alpha, prm.beta
        start, stop = bounds[j], bounds[j + 1]
        for t in range(start, stop):
            if restart and j > 0 and t == start:
                x = int(rng.binomial(N, prm.p))
            else:
                x = binomial_thin(x, a, rng) + binomial_thin(N - x, b, rng)
            out[t] = x
    return BoundedSeries(out, N, initial=x0)
