"""Scenario registry, accuracy metrics and Monte Carlo harnesses."""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bar_model import BarParams, BoundedSeries, SegmentedModel, simulate_mcp_bar
from .cusum import critical_value, cusum, simulate_critical_value
from .errors import BoundedCPError, EmptySet, UnsupportedLevel
from .estimation import Method, OptimizerWarning
from .segmentation import GaConfig, MdlFit, s_ga

__all__ = [
    "Scenario",
    "SCENARIOS",
    "get_scenario",
    "ExperimentConfig",
    "MetricReport",
    "FitStats",
    "zeta",
    "distance_d",
    "size_power_experiment",
    "segmentation_experiment",
    "model_fit_stats",
]

UPPER_BOUND = 10


@dataclass(frozen=True)
class Scenario:
    """A simulation design.

    ``params`` lists ``(rho, p)`` per regime.  Change-points are either
    fractions of ``n`` or an explicit table keyed by ``n``.
    """

    id: str
    params: tuple[tuple[float, float], ...]
    fractions: tuple[float, ...] = ()
    taus_by_n: dict = field(default_factory=dict)
    upper_bound: int = UPPER_BOUND

    @property
    def m(self) -> int:
        return len(self.params) - 1

    def change_points(self, n: int) -> tuple[int, ...]:
        if self.m == 0:
            return ()
        if n in self.taus_by_n:
            return tuple(self.taus_by_n[n])
        if self.fractions:
            return tuple(int(round(f * n)) for f in self.fractions)
        raise ValueError(
            f"scenario {self.id} defines change-points only for n in {sorted(self.taus_by_n)}"
        )

    def model(self, n: int) -> SegmentedModel:
        segs = tuple(BarParams(p=p, rho=rho) for rho, p in self.params)
        return SegmentedModel(self.upper_bound, self.change_points(n), segs)


def _t(id_, before, after=None):
    if after is None:
        return Scenario(id_, (before,))
    return Scenario(id_, (before, after), fractions=(0.5,))


_A_TAUS = {200: (70, 140), 500: (150, 350), 800: (300, 450)}
_B_TAUS = {200: (50, 100, 150), 500: (100, 225, 390), 800: (200, 400, 650)}

SCENARIOS: dict[str, Scenario] = {
    s.id: s
    for s in [
        _t("T1", (-0.1, 0.6)),
        _t("T2", (0.1, 0.3)),
        _t("T3", (0.4, 0.3)),
        _t("T11", (-0.1, 0.6), (0.5, 0.6)),
        _t("T12", (-0.1, 0.6), (-0.1, 0.3)),
        _t("T13", (-0.1, 0.6), (0.1, 0.3)),
        _t("T21", (0.1, 0.3), (0.5, 0.3)),
        _t("T22", (0.1, 0.3), (0.1, 0.6)),
        _t("T23", (0.1, 0.3), (0.3, 0.5)),
        _t("T31", (0.4, 0.3), (-0.2, 0.3)),
        _t("T32", (0.4, 0.3), (0.4, 0.6)),
        _t("T33", (0.4, 0.3), (-0.2, 0.6)),
        Scenario("A1", ((-0.2, 0.5), (0.6, 0.5), (0.1, 0.5)), taus_by_n=_A_TAUS),
        Scenario("A2", ((0.2, 0.3), (0.2, 0.5), (0.2, 0.7)), taus_by_n=_A_TAUS),
        Scenario("A3", ((-0.2, 0.3), (0.6, 0.5), (0.3, 0.7)), taus_by_n=_A_TAUS),
        Scenario("B1", ((-0.2, 0.5), (0.6, 0.5), (0.1, 0.5), (0.4, 0.5)), taus_by_n=_B_TAUS),
        Scenario("B2", ((0.3, 0.2), (0.3, 0.4), (0.3, 0.6), (0.3, 0.8)), taus_by_n=_B_TAUS),
        Scenario("B3", ((-0.2, 0.3), (-0.1, 0.4), (0.2, 0.6), (0.4, 0.8)), taus_by_n=_B_TAUS),
    ]
}


def get_scenario(scenario_id: str) -> Scenario:
    try:
        return SCENARIOS[scenario_id]
    except KeyError:
        raise KeyError(
            f"unknown scenario {scenario_id!r}; valid ids: {', '.join(SCENARIOS)}"
        ) from None


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _as_set(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise EmptySet(f"{name} is empty")
    return arr


def zeta(a_set, b_set) -> float:
    """``sup_{b in b_set} inf_{a in a_set} |a - b|``."""
    a = _as_set(a_set, "a_set")
    b = _as_set(b_set, "b_set")
    return float(np.abs(b[:, None] - a[None, :]).min(axis=1).max())


def distance_d(est, truth) -> float:
    """Mean over true locations of the distance to the nearest estimate."""
    e = _as_set(est, "est")
    t = _as_set(truth, "truth")
    return float(np.abs(t[:, None] - e[None, :]).min(axis=1).mean())


@dataclass(frozen=True)
class FitStats:
    aic: float
    bic: float
    rms: float
    k: int
    loglik: float


def model_fit_stats(series: BoundedSeries, fit: MdlFit) -> FitStats:
    """AIC, BIC and the summed per-segment one-step residual RMS.

    ``k = 2 (m + 1) + m`` counts two parameters per segment plus each
    change-point location.
    """
    N = series.upper_bound
    rms = 0.0
    for (lo, hi), est in zip(fit.segments(), fit.segment_estimates):
        x = series.counts[lo - 1 : hi].astype(float)
        prm = est.params
        resid = x[1:] - prm.rho * x[:-1] - N * prm.p * (1.0 - prm.rho)
        rms += math.sqrt(math.fsum(resid**2) / resid.size)
    k = 2 * (fit.m_hat + 1) + fit.m_hat
    L = fit.loglik
    return FitStats(-2 * L + 2 * k, -2 * L + k * math.log(series.n), rms, k, L)


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo cell: a scenario at one sample size."""

    scenario: str
    n: int
    replications: int = 1000
    seed: int = 0
    methods: tuple[Method, ...] = (Method.CLS, Method.MQL, Method.CML)
    gammas: tuple[float, ...] = (0.01, 0.05)
    k0: int = 10
    ga: GaConfig = field(default_factory=GaConfig)
    model: SegmentedModel | None = None
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        for g in self.gammas:
            if not 0 < g < 1:
                raise ValueError(f"gamma must lie in (0, 1), got {g}")
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))

    def true_model(self) -> SegmentedModel:
        return self.model if self.model is not None else get_scenario(self.scenario).model(self.n)


@dataclass(frozen=True)
class MetricReport:
    """Aggregated results of one experiment cell.

    ``size_or_power`` maps ``"METHOD@gamma"`` to a rejection rate.
    Location bias and MSE use only replications with the correct count.
    """

    scenario: str
    n: int
    replications: int
    skipped: int = 0
    size_or_power: dict = field(default_factory=dict)
    skipped_by_method: dict = field(default_factory=dict)
    critical_values: dict = field(default_factory=dict)
    cr_m: float | None = None
    m_hat_counts: dict = field(default_factory=dict)
    zeta_under: float | None = None
    zeta_over: float | None = None
    d_mean: float | None = None
    bias: tuple[float, ...] = ()
    mse: tuple[float, ...] = ()
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _replication_seeds(seed: int, r: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(r)


def _run(fn: Callable, jobs: list, n_jobs: int) -> list:
    if n_jobs == 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _cusum_rep(model, n, methods, k0, ss):
    rng = np.random.default_rng(ss)
    series = simulate_mcp_bar(model, n, rng)
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizerWarning)
        for method in methods:
            try:
                out[method.value] = cusum(series, method, k0).statistic
            except BoundedCPError:
                out[method.value] = None
    return out


def _critical(gamma: float, seed: int) -> float:
    try:
        return critical_value(gamma)
    except UnsupportedLevel:
        return simulate_critical_value(gamma, 2000, 20_000, np.random.default_rng(seed))


def size_power_experiment(config: ExperimentConfig) -> MetricReport:
    """Rejection frequencies of each CUSUM test over simulated replications.

    Replications whose statistic cannot be computed are counted per method
    and excluded from that method's denominator.
    """
    t0 = time.perf_counter()
    model = config.true_model()
    seeds = _replication_seeds(config.seed, config.replications)
    jobs = [(model, config.n, config.methods, config.k0, ss) for ss in seeds]
    stats = _run(_cusum_rep, jobs, config.n_jobs)
    crit = {g: _critical(g, config.seed) for g in config.gammas}
    rates, skipped = {}, {}
    for method in config.methods:
        vals = np.array([s[method.value] for s in stats if s[method.value] is not None])
        skipped[method.value] = config.replications - vals.size
        for g, c in crit.items():
            rates[f"{method.value}@{g:g}"] = float(np.mean(vals > c)) if vals.size else math.nan
    return MetricReport(
        scenario=config.scenario,
        n=config.n,
        replications=config.replications,
        skipped=max(skipped.values(), default=0),
        size_or_power=rates,
        skipped_by_method=skipped,
        critical_values={f"{g:g}": c for g, c in crit.items()},
        elapsed=time.perf_counter() - t0,
    )


def _segment_rep(model, n, ga, ss):
    rng = np.random.default_rng(ss)
    series = simulate_mcp_bar(model, n, rng)
    try:
        fit = s_ga(series, ga, int(rng.integers(2**63)))
    except BoundedCPError:
        return None
    return fit.tau_hat


def segmentation_experiment(config: ExperimentConfig) -> MetricReport:
    """S-GA accuracy: CR(m), the two segmentation errors, d, and location Bias/MSE."""
    t0 = time.perf_counter()
    model = config.true_model()
    n = config.n
    truth = np.array(model.change_points, dtype=float) / n
    m0 = truth.size
    seeds = _replication_seeds(config.seed, config.replications)
    jobs = [(model, n, config.ga, ss) for ss in seeds]
    taus = _run(_segment_rep, jobs, config.n_jobs)

    done = [t for t in taus if t is not None]
    counts: dict[int, int] = {}
    under, over, dist = [], [], []
    hits = []
    for t in done:
        counts[len(t)] = counts.get(len(t), 0) + 1
        lam = np.array(t, dtype=float) / n
        if lam.size and m0:
            under.append(zeta(truth, lam))
            over.append(zeta(lam, truth))
            dist.append(distance_d(lam, truth))
        if lam.size == m0:
            hits.append(lam)
    bias, mse = (), ()
    if hits and m0:
        err = np.array(hits) - truth
        bias = tuple(math.fsum(col) / len(hits) for col in err.T)
        mse = tuple(math.fsum(col**2) / len(hits) for col in err.T)
    mean = lambda v: math.fsum(v) / len(v) if v else math.nan  # noqa: E731
    return MetricReport(
        scenario=config.scenario,
        n=n,
        replications=config.replications,
        skipped=config.replications - len(done),
        cr_m=len(hits) / len(done) if done else math.nan,
        m_hat_counts=dict(sorted(counts.items())),
        zeta_under=mean(under),
        zeta_over=mean(over),
        d_mean=mean(dist),
        bias=bias,
        mse=mse,
        elapsed=time.perf_counter() - t0,
    )
