"""MDL segmentation of bounded count series with a genetic-algorithm search.

Change-points are 1-based observation indices.  With ``tau_0 = 0`` and
``tau_{m+1} = n``, segment ``j`` holds observations ``tau_{j-1}+1..tau_j``.
Its likelihood and estimates use the transitions into those observations,
so segment ``j > 1`` conditions on ``x_{tau_{j-1}}`` and every transition
``t = 2..n`` belongs to exactly one segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .bar_model import BarParams, BoundedSeries, log_kernel_matrix
from .errors import DegenerateSeries, Infeasible
from .estimation import (
    DELTA,
    ParamEstimate,
    _finish,
    _to_ab,
    clamp_to_box,
    cls_closed_form,
    cls_estimate,
    cml_estimate,
    cml_loglik,
    loglik_from_counts,
    maximize_counts,
)

__all__ = [
    "Likelihood",
    "GaConfig",
    "MdlFit",
    "SegmentScorer",
    "min_spacing",
    "max_feasible_m",
    "mdl_penalty",
    "mdl_value",
    "fit_segments",
    "ga_search",
    "s_ga",
    "exhaustive_m_sweep",
]

# Above this many cells the cumulative transition-count tensor is not built.
_CUMULATIVE_LIMIT = 20_000_000


class Likelihood(str, Enum):
    CLS_PLUGIN = "cls_plugin"
    FULL_CML = "full_cml"


@dataclass(frozen=True)
class GaConfig:
    """Search settings.

    ``population_size`` of ``None`` means ``population_scale * m``.
    ``epsilon_lambda`` of ``None`` means ``10 / n``.
    """

    population_size: int | None = None
    population_scale: int = 10
    crossover_fraction: float = 0.55
    max_generations: int = 300
    stall_generations: int = 50
    epsilon_lambda: float | None = None
    max_changepoints_cap: int = 10
    seed: int = 0
    tournament_size: int = 3
    mutation_rate: float = 0.1
    elite_count: int = 1
    compare_m0: bool = False
    likelihood: Likelihood = Likelihood.CLS_PLUGIN

    def __post_init__(self) -> None:
        if self.population_size is not None and self.population_size < 4:
            raise ValueError("population_size must be at least 4")
        if self.population_scale < 1:
            raise ValueError("population_scale must be positive")
        if not 0 < self.crossover_fraction < 1:
            raise ValueError("crossover_fraction must lie in (0, 1)")
        if self.epsilon_lambda is not None and not 0 < self.epsilon_lambda < 1:
            raise ValueError("epsilon_lambda must lie in (0, 1)")
        if self.max_generations < 1 or self.max_changepoints_cap < 1:
            raise ValueError("max_generations and max_changepoints_cap must be positive")
        object.__setattr__(self, "likelihood", Likelihood(self.likelihood))

    def epsilon(self, n: int) -> float:
        return self.epsilon_lambda if self.epsilon_lambda is not None else 10.0 / n

    def population(self, m: int) -> int:
        if self.population_size is not None:
            return self.population_size
        return max(4, self.population_scale * m)


@dataclass(frozen=True)
class MdlFit:
    """Selected segmentation.

    ``search_log`` maps each searched ``m`` to the best MDL per generation;
    ``mdl_by_m`` to the best MDL found for that ``m``.
    """

    m_hat: int
    tau_hat: tuple[int, ...]
    lambda_hat: tuple[float, ...]
    segment_estimates: tuple[ParamEstimate, ...]
    mdl: float
    per_segment_loglik: tuple[float, ...]
    n: int
    likelihood: Likelihood = Likelihood.CLS_PLUGIN
    mdl_by_m: dict = field(default_factory=dict)
    search_log: dict = field(default_factory=dict, repr=False)

    @property
    def loglik(self) -> float:
        return float(sum(self.per_segment_loglik))

    def segments(self) -> list[tuple[int, int]]:
        """1-based inclusive observation ranges."""
        b = (0,) + self.tau_hat + (self.n,)
        return [(b[j] + 1, b[j + 1]) for j in range(len(b) - 1)]


# --------------------------------------------------------------------------
# MDL
# --------------------------------------------------------------------------


def min_spacing(n: int, epsilon_lambda: float) -> int:
    # Guard against 10/n * n rounding just above an integer.
    return max(2, math.ceil(n * epsilon_lambda - 1e-9))


def max_feasible_m(n: int, spacing: int) -> int:
    return n // spacing - 1


def _with_predecessor(series: BoundedSeries, start: int, stop: int) -> BoundedSeries:
    """Observations ``start..stop-1`` plus the one before ``start``, if any."""
    return series.segment(max(start - 1, 0), stop)


def _spacing_ok(taus, n: int, spacing: int) -> bool:
    b = np.concatenate([[0], np.asarray(taus, dtype=np.int64), [n]])
    return bool(np.all(np.diff(b) >= spacing))


def mdl_penalty(n: int, taus) -> float:
    """Code length of the segmentation itself; ``m = 0`` drops ``log m``."""
    taus = tuple(int(t) for t in taus)
    m = len(taus)
    sizes = np.diff(np.array((0,) + taus + (n,)))
    return (math.log(m) if m else 0.0) + (m + 1) * math.log(n) + float(np.log(sizes).sum())


def mdl_value(
    series: BoundedSeries,
    taus,
    estimates,
    epsilon_lambda: float | None = None,
) -> float:
    """Penalty minus the summed per-segment conditional log-likelihoods.

    Returns ``inf`` when the spacing rule is violated.
    """
    n = series.n
    taus = tuple(int(t) for t in taus)
    spacing = min_spacing(n, epsilon_lambda if epsilon_lambda is not None else 10.0 / n)
    if list(taus) != sorted(set(taus)) or not _spacing_ok(taus, n, spacing):
        return math.inf
    if len(estimates) != len(taus) + 1:
        raise ValueError("need one estimate per segment")
    b = (0,) + taus + (n,)
    ll = sum(
        cml_loglik(_with_predecessor(series, b[j], b[j + 1]), est.params)
        for j, est in enumerate(estimates)
    )
    return mdl_penalty(n, taus) - ll


def fit_segments(
    series: BoundedSeries, taus, likelihood_eval: Likelihood | str = Likelihood.CLS_PLUGIN
) -> list[ParamEstimate]:
    """Per-segment estimates with absolute ``sample_range`` and ``loglik`` set.

    Raises
    ------
    DegenerateSeries
        When any segment cannot be estimated.
    """
    mode = Likelihood(likelihood_eval)
    taus = tuple(int(t) for t in taus)
    b = (0,) + taus + (series.n,)
    out = []
    for j in range(len(b) - 1):
        seg = _with_predecessor(series, b[j], b[j + 1])
        if mode is Likelihood.CLS_PLUGIN:
            est = cls_estimate(seg)
            est = replace(est, loglik=cml_loglik(seg, est.params))
        else:
            est = cml_estimate(seg)
        out.append(replace(est, sample_range=(b[j] + 1, b[j + 1])))
    return out


class SegmentScorer:
    """Cached per-segment log-likelihoods for one series.

    Segment ``[a, b)`` (0-based observations) is scored with transitions
    ``max(a, 1)..b-1``, transition ``t`` leading into observation ``t``.  Uncached segments are evaluated in batches: CLS closed
    forms from cumulative sums, then the log-likelihood from transition
    counts and a batched kernel.
    """

    def __init__(
        self,
        series: BoundedSeries,
        likelihood: Likelihood | str = Likelihood.CLS_PLUGIN,
    ) -> None:
        self.series = series
        self.likelihood = Likelihood(likelihood)
        self.n = series.n
        self.N = series.upper_bound
        x = series.counts
        prev, curr = x[:-1], x[1:]
        z = np.zeros(1, dtype=np.int64)
        self._sx = np.concatenate([z, np.cumsum(prev)])
        self._sy = np.concatenate([z, np.cumsum(curr)])
        self._sxy = np.concatenate([z, np.cumsum(prev * curr)])
        self._sxx = np.concatenate([z, np.cumsum(prev * prev)])
        K = (self.N + 1) ** 2
        self._flat = prev * (self.N + 1) + curr
        if self.n * K <= _CUMULATIVE_LIMIT:
            onehot = np.zeros((prev.size + 1, K), dtype=np.int32)
            onehot[np.arange(1, prev.size + 1), self._flat] = 1
            self._cum = np.cumsum(onehot, axis=0)
        else:
            self._cum = None
        self._cache: dict[tuple[int, int], float] = {}
        self.evaluations = 0

    def _counts(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        K = (self.N + 1) ** 2
        if self._cum is not None:
            return self._cum[hi] - self._cum[lo]
        return np.stack(
            [np.bincount(self._flat[i:j], minlength=K) for i, j in zip(lo, hi)]
        )

    def _compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.evaluations += a.size
        lo, hi = np.maximum(a - 1, 0), b - 1
        rho, p, bad = cls_closed_form(
            hi - lo,
            self._sx[hi] - self._sx[lo],
            self._sy[hi] - self._sy[lo],
            self._sxy[hi] - self._sxy[lo],
            self._sxx[hi] - self._sxx[lo],
            self.N,
        )
        rho, p, _ = clamp_to_box(rho, p)
        counts = self._counts(lo, hi).reshape(a.size, self.N + 1, self.N + 1)
        if self.likelihood is Likelihood.CLS_PLUGIN:
            beta = p * (1.0 - rho)
            logP = log_kernel_matrix(beta + rho, beta, self.N)
            ll = np.where(counts > 0, counts * logP, 0.0).sum(axis=(1, 2))
        else:
            ll = np.empty(a.size)
            for s in range(a.size):
                if bad[s]:
                    continue
                start = _to_ab(BarParams(float(p[s]), float(rho[s])))
                ab, _, _ = maximize_counts(counts[s], start)
                ll[s] = loglik_from_counts(counts[s], _finish(ab, DELTA, counts[s])[0])
        return np.where(bad, -np.inf, ll)

    def loglik(self, a, b) -> np.ndarray:
        """Log-likelihoods of segments ``[a_i, b_i)``; ``-inf`` if degenerate."""
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        b = np.atleast_1d(np.asarray(b, dtype=np.int64))
        keys = list(zip(a.tolist(), b.tolist()))
        missing = sorted({k for k in keys if k not in self._cache})
        if missing:
            ma = np.array([k[0] for k in missing], dtype=np.int64)
            mb = np.array([k[1] for k in missing], dtype=np.int64)
            for k, v in zip(missing, self._compute(ma, mb)):
                self._cache[k] = float(v)
        return np.array([self._cache[k] for k in keys])

    def mdl_many(self, taus: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
        """MDL for each row of ``taus`` (shape ``(P, m)``); invalid rows get ``inf``."""
        taus = np.asarray(taus, dtype=np.int64)
        P, m = taus.shape
        valid = np.ones(P, dtype=bool) if valid is None else valid
        out = np.full(P, np.inf)
        if not valid.any():
            return out
        t = taus[valid]
        bounds = np.column_stack([np.zeros(len(t), np.int64), t, np.full(len(t), self.n)])
        a, b = bounds[:, :-1].ravel(), bounds[:, 1:].ravel()
        ll = self.loglik(a, b).reshape(len(t), m + 1).sum(axis=1)
        sizes = np.diff(bounds, axis=1)
        pen = (math.log(m) if m else 0.0) + (m + 1) * math.log(self.n) + np.log(sizes).sum(1)
        out[valid] = pen - ll
        return out

    def mdl(self, taus) -> float:
        taus = np.asarray(tuple(taus), dtype=np.int64).reshape(1, -1)
        return float(self.mdl_many(taus)[0])


# --------------------------------------------------------------------------
# genetic algorithm
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaResult:
    taus: tuple[int, ...]
    mdl: float
    history: tuple[float, ...]
    generations: int


def _m_rng(seed, m: int) -> np.random.Generator:
    """Stream for level ``m``; identical whichever sweep asks for it."""
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(m,)))


def _initial_population(rng, P: int, m: int, n: int, L: int) -> np.ndarray:
    slack = n - (m + 1) * L
    u = np.sort(rng.integers(0, slack + 1, size=(P, m)), axis=1)
    return u + L * np.arange(1, m + 1)


def _repair(pop: np.ndarray, n: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    pop = np.sort(np.clip(pop, L, n - L), axis=1)
    bounds = np.column_stack([np.zeros(len(pop), np.int64), pop, np.full(len(pop), n)])
    return pop, np.all(np.diff(bounds, axis=1) >= L, axis=1)


def _tournament(rng, fitness: np.ndarray, count: int, size: int) -> np.ndarray:
    entrants = rng.integers(0, fitness.size, size=(count, size))
    # argmin picks the first entrant on ties.
    return entrants[np.arange(count), np.argmin(fitness[entrants], axis=1)]


def ga_search(
    series: BoundedSeries,
    m: int,
    config: GaConfig = GaConfig(),
    rng=None,
    scorer: SegmentScorer | None = None,
) -> GaResult:
    """Minimize MDL over ``m`` change-points with a generational GA.

    Tournament selection, one elite, one-point crossover on sorted
    chromosomes for a ``crossover_fraction`` share of each new generation,
    and per-gene geometric jitter for the rest.  Repaired children that
    still violate the spacing rule score ``inf``.  Stops after
    ``max_generations`` or ``stall_generations`` without improvement.

    Raises
    ------
    Infeasible
        If ``m`` change-points cannot respect the spacing rule.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    n = series.n
    L = min_spacing(n, config.epsilon(n))
    if (m + 1) * L > n:
        raise Infeasible(f"{m} change-points need n >= {(m + 1) * L}, got {n}")
    scorer = scorer if scorer is not None else SegmentScorer(series, config.likelihood)
    rng = rng if isinstance(rng, np.random.Generator) else _m_rng(config.seed if rng is None else rng, m)

    P = config.population(m)
    n_elite = min(config.elite_count, P - 1)
    n_cross = int(round(config.crossover_fraction * (P - n_elite)))
    n_mut = P - n_elite - n_cross
    slack = n - (m + 1) * L
    scale0 = max(1.0, slack / (2.0 * (m + 1)))

    pop = _initial_population(rng, P, m, n, L)
    fit = scorer.mdl_many(pop)
    best_i = int(np.argmin(fit))
    best, best_fit = pop[best_i].copy(), float(fit[best_i])
    history = [best_fit]
    stall = 0
    gen = 0
    for gen in range(1, config.max_generations + 1):
        order = np.argsort(fit, kind="stable")
        elite = pop[order[:n_elite]]

        parents = pop[_tournament(rng, fit, 2 * n_cross, config.tournament_size)]
        p1, p2 = parents[:n_cross], parents[n_cross:]
        if m > 1:
            cut = rng.integers(1, m, size=n_cross)[:, None]
            cross = np.where(np.arange(m) < cut, p1, p2)
        else:
            cross = np.where(rng.random((n_cross, 1)) < 0.5, p1, p2)

        base = pop[_tournament(rng, fit, n_mut, config.tournament_size)]
        scale = 1.0 + (scale0 - 1.0) * (1.0 - (gen - 1) / config.max_generations)
        hit = rng.random(base.shape) < config.mutation_rate
        hit[np.arange(n_mut), rng.integers(0, m, size=n_mut)] |= ~hit.any(axis=1)
        size = rng.geometric(1.0 / scale, size=base.shape)
        sign = np.where(rng.random(base.shape) < 0.5, -1, 1)
        mutants = base + np.where(hit, sign * size, 0)

        children, ok = _repair(np.vstack([cross, mutants]), n, L)
        # Copies of chromosomes already in the generation are swapped for
        # random immigrants to keep the population diverse.
        _, first = np.unique(np.vstack([elite, children]), axis=0, return_index=True)
        dup = np.ones(n_elite + len(children), dtype=bool)
        dup[first] = False
        dup = dup[n_elite:]
        if dup.any():
            children[dup] = _initial_population(rng, int(dup.sum()), m, n, L)
            ok[dup] = True
        pop = np.vstack([elite, children])
        fit = np.concatenate([fit[order[:n_elite]], scorer.mdl_many(children, ok)])

        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best, best_fit = pop[i].copy(), float(fit[i])
            stall = 0
        else:
            stall += 1
        history.append(best_fit)
        if stall >= config.stall_generations:
            break
    return GaResult(tuple(int(t) for t in best), best_fit, tuple(history), gen)


# --------------------------------------------------------------------------
# sweeps over m
# --------------------------------------------------------------------------


def _m_limit(n: int, config: GaConfig) -> tuple[int, int]:
    eps = config.epsilon(n)
    L = min_spacing(n, eps)
    m0 = math.floor(1.0 / eps) + 1
    return L, min(m0, max_feasible_m(n, L), config.max_changepoints_cap)


def _build_fit(series, taus, config, mdl_by_m, log) -> MdlFit:
    n = series.n
    ests = fit_segments(series, taus, config.likelihood)
    lls = tuple(float(e.loglik) for e in ests)
    mdl = mdl_penalty(n, taus) - sum(lls)
    return MdlFit(
        m_hat=len(taus),
        tau_hat=tuple(taus),
        lambda_hat=tuple(t / n for t in taus),
        segment_estimates=tuple(ests),
        mdl=mdl,
        per_segment_loglik=lls,
        n=n,
        likelihood=config.likelihood,
        mdl_by_m=dict(mdl_by_m),
        search_log=dict(log),
    )


def _sweep(series, config, seed, early_stop: bool) -> MdlFit:
    scorer = SegmentScorer(series, config.likelihood)
    seed = config.seed if seed is None else seed
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    n = series.n
    _, m_max = _m_limit(n, config)
    mdl_by_m: dict[int, float] = {}
    log: dict[int, tuple[float, ...]] = {}
    best_taus: tuple[int, ...] = ()
    best = math.inf
    if config.compare_m0 or m_max < 1:
        mdl_by_m[0] = scorer.mdl(())
    for m in range(1, m_max + 1):
        res = ga_search(series, m, config, _m_rng(seed, m), scorer)
        mdl_by_m[m] = res.mdl
        log[m] = res.history
        if res.mdl < best:
            best, best_taus = res.mdl, res.taus
        elif early_stop:
            break
    if 0 in mdl_by_m and (mdl_by_m[0] <= best or m_max < 1):
        best_taus = ()
    if not best_taus and 0 not in mdl_by_m:
        raise DegenerateSeries("no segmentation with finite MDL was found")
    return _build_fit(series, best_taus, config, mdl_by_m, log)


def s_ga(series: BoundedSeries, config: GaConfig = GaConfig(), rng=None) -> MdlFit:
    """Early-stopping sweep: ``m = 1, 2, ...`` until the best MDL stops falling.

    Ties keep the smaller ``m``.  With ``config.compare_m0`` the no-change
    model competes as well.  ``rng`` (a seed or Generator) overrides
    ``config.seed``; level ``m`` always uses the stream derived from
    ``(seed, m)``.
    """
    return _sweep(series, config, rng, early_stop=True)


def exhaustive_m_sweep(series: BoundedSeries, config: GaConfig = GaConfig(), rng=None) -> MdlFit:
    """Evaluate every feasible ``m`` up to the cap and keep the best."""
    return _sweep(series, config, rng, early_stop=False)
