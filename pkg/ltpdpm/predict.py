"""
Posterior-predictive simulation and the summaries derived from it.

For each retained draw b the field at a target week t0 is

    Y_b = mu_b(t0) + sigma (H Z + eta),  g ~ pi_b, sigma2 ~ InvGamma(a_g/2, a_g/2 - 1),
    Z ~ Normal_L(0, Phi_g), eta ~ Normal_N(0, tau2_g I).

Noise is drawn in fixed chunks of draws, each chunk with its own child of the
run's SeedSequence, so the ensemble is the same for any number of threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ltpdpm.basis import BasisSet
from ltpdpm.config import ENSEMBLE_CHUNK_SIZE
from ltpdpm.ingest import CovariateSeries, time_to_year_week
from ltpdpm.model import mean_surfaces, mixture_quantile
from ltpdpm.sampler import PosteriorSamples

logger = logging.getLogger(__name__)

EXCEEDANCE_MODES = ("union", "intersection")
THRESHOLD_KINDS = ("fixed", "quantile")


@dataclass
class PredictiveEnsemble:
    """B predictive fields at one target week.

    Attributes:
        draws: B x N predictive samples
        means: B x N mean surfaces mu_b(t0) the samples were drawn around
        t0: 1-based target week index
        weeks_per_year: T2
    """

    draws: np.ndarray
    means: np.ndarray
    t0: int
    weeks_per_year: int = 52

    def __post_init__(self):
        if self.draws.ndim != 2 or len(self.draws) < 2:
            raise ValueError(f"an ensemble needs at least 2 draws of an N-vector, got shape {self.draws.shape}")
        if self.means.shape != self.draws.shape:
            raise ValueError(f"means {self.means.shape} and draws {self.draws.shape} differ in shape")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def n_sites(self) -> int:
        return self.draws.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    @property
    def year(self) -> int:
        return time_to_year_week(self.t0, self.weeks_per_year)[0]

    @property
    def week(self) -> int:
        return time_to_year_week(self.t0, self.weeks_per_year)[1]


def _target_row(basis: BasisSet, t0: int, covariate: Optional[CovariateSeries]):
    t1, t2 = time_to_year_week(t0, basis.weeks_per_year)
    return basis.covariate_row(t1, covariate), basis.X1[t2 - 1]


def predictive_means(samples: PosteriorSamples, basis: BasisSet, t0: int, covariate: Optional[CovariateSeries] = None) -> np.ndarray:
    """
    B x N mean surfaces at week t0, one per retained draw.

    Raises:
        CoverageError: If the covariate does not reach the year of t0
    """
    x0, x1 = _target_row(basis, t0, covariate)
    return mean_surfaces(samples["beta"], basis.X21, basis.X22, x0, x1)


def _noise_chunk(samples: PosteriorSamples, H: np.ndarray, start: int, stop: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    n = stop - start
    n_sites, n_eofs = H.shape
    rows = np.arange(start, stop)

    cumulative = np.cumsum(samples.pi[start:stop], axis=1)
    uniforms = rng.random(n) * cumulative[:, -1]
    labels = np.minimum((cumulative <= uniforms[:, None]).sum(axis=1), cumulative.shape[1] - 1)

    df = samples["df_tenths"][rows, labels] / 10.0
    sigma2 = (df / 2.0 - 1.0) / rng.standard_gamma(df / 2.0)
    values, vectors = np.linalg.eigh(samples["phi"][rows, labels])
    roots = vectors * np.sqrt(np.clip(values, 0.0, None))[:, None, :]
    Z = np.einsum("blm,bm->bl", roots, rng.standard_normal((n, n_eofs)))
    eta = np.sqrt(samples["tau2"][rows, labels])[:, None] * rng.standard_normal((n, n_sites))
    return np.sqrt(sigma2)[:, None] * (Z @ H.T + eta)


def posterior_predictive(
    samples: PosteriorSamples,
    basis: BasisSet,
    t0: int,
    covariate: Optional[CovariateSeries] = None,
    seed: int = 0,
    threads: int = 1,
) -> PredictiveEnsemble:
    """
    Draw one predictive field per retained draw at week t0.

    Args:
        samples: Posterior draws
        basis: Design matrices of the fit
        t0: 1-based week index, past the fit window for forecasts
        covariate: Series covering the year of t0; the basis' own series when omitted
        seed: Root seed of the noise substreams
        threads: Worker threads for the noise chunks

    Returns:
        PredictiveEnsemble at t0

    Raises:
        CoverageError: If the covariate does not reach the year of t0
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    means = predictive_means(samples, basis, t0, covariate)
    B = samples.n_draws
    starts = list(range(0, B, ENSEMBLE_CHUNK_SIZE))
    children = np.random.SeedSequence(seed).spawn(len(starts))
    jobs = [(s, min(s + ENSEMBLE_CHUNK_SIZE, B), child) for s, child in zip(starts, children)]

    with ThreadPoolExecutor(max_workers=threads) as executor:
        chunks = list(executor.map(lambda job: _noise_chunk(samples, basis.H, *job), jobs))

    ensemble = PredictiveEnsemble(
        draws=means + np.concatenate(chunks, axis=0),
        means=means,
        t0=t0,
        weeks_per_year=basis.weeks_per_year,
    )
    logger.info(f"Drew {B} predictive fields at t0={t0} (year {ensemble.year}, week {ensemble.week})")
    return ensemble


@dataclass
class RateOfChange:
    """Per-draw decadal rates and their posterior summary."""

    draws: np.ndarray
    mean: np.ndarray
    t_stat: np.ndarray


def _rate_summary(draws: np.ndarray) -> RateOfChange:
    mean = draws.mean(axis=0)
    sd = draws.std(axis=0, ddof=1) if len(draws) > 1 else np.zeros_like(mean)
    t_stat = np.divide(mean, sd, out=np.full_like(mean, np.nan), where=sd > 0)
    return RateOfChange(draws=draws, mean=mean, t_stat=t_stat)


def _decadal_draws(samples: PosteriorSamples, basis: BasisSet, x1: np.ndarray) -> np.ndarray:
    step = basis.X0[-1] - basis.X0[0]
    change = mean_surfaces(samples["beta"], basis.X21, basis.X22, step, x1)
    return 10.0 * change / (basis.n_years - 1)


def decadal_rate_of_change(samples: PosteriorSamples, basis: BasisSet, week: int) -> RateOfChange:
    """
    10 (mu(T1, week) - mu(1, week)) / (T1 - 1) per draw, over the fitted years.

    |t_stat| > 2 marks a rate that is clearly non-zero; t_stat is nan where the
    posterior SD is zero.
    """
    if not 1 <= week <= basis.weeks_per_year:
        raise ValueError(f"week must lie in [1, {basis.weeks_per_year}], got {week}")
    return _rate_summary(_decadal_draws(samples, basis, basis.X1[week - 1]))


def overall_decadal_rate_of_change(samples: PosteriorSamples, basis: BasisSet) -> RateOfChange:
    """Decadal rate of change averaged over the weeks of the year."""
    per_week = [_decadal_draws(samples, basis, basis.X1[w]) for w in range(basis.weeks_per_year)]
    return _rate_summary(np.mean(per_week, axis=0))


def _return_window_row(basis: BasisSet, covariate: Optional[CovariateSeries], reference_year: int, n_years: int) -> np.ndarray:
    covariate = covariate or basis.covariate
    start = covariate.year_index(reference_year)
    return basis.scaler.row(covariate.window_mean(start, n_years))


def _site_quantiles(samples: PosteriorSamples, basis: BasisSet, site: int, p) -> np.ndarray:
    """Per-draw residual quantile(s) at one site; shape (B,) or p's shape + (B,)."""
    h = basis.H[site]
    dfs = samples["df_tenths"] / 10.0
    variance = np.einsum("l,bklm,m->bk", h, samples["phi"], h) + samples["tau2"]
    scales = np.sqrt((dfs - 2.0) / dfs * variance)
    p = np.asarray(p, dtype=np.float64)
    return mixture_quantile(p[..., None], samples.pi, scales, dfs)


def _check_return_period(n_years: int):
    if n_years < 1:
        raise ValueError(f"return period must be at least one year, got {n_years}")


def return_level(
    samples: PosteriorSamples,
    basis: BasisSet,
    site: int,
    week: int,
    n_years: int,
    reference_year: int,
    covariate: Optional[CovariateSeries] = None,
) -> float:
    """
    Posterior mean of the n_years return level at one site and week.

    The mean surface uses the covariate averaged over calendar years
    [reference_year, reference_year + n_years); the residual part is the
    1 - 1/(52 n_years) quantile of the site's mixture marginal.

    Raises:
        CoverageError: If the covariate does not cover the return window
    """
    _check_return_period(n_years)
    if not 0 <= site < basis.n_sites:
        raise ValueError(f"site index {site} outside [0, {basis.n_sites})")
    if not 1 <= week <= basis.weeks_per_year:
        raise ValueError(f"week must lie in [1, {basis.weeks_per_year}], got {week}")
    x0 = _return_window_row(basis, covariate, reference_year, n_years)
    level = 1.0 - 1.0 / (basis.weeks_per_year * n_years)
    means = mean_surfaces(samples["beta"], basis.X21[site:site + 1], basis.X22[site:site + 1], x0, basis.X1[week - 1])[:, 0]
    return float(np.mean(means + _site_quantiles(samples, basis, site, level)))


def return_level_map(
    samples: PosteriorSamples,
    basis: BasisSet,
    week: int,
    n_years: int,
    reference_year: int,
    covariate: Optional[CovariateSeries] = None,
) -> np.ndarray:
    """return_level at every site."""
    _check_return_period(n_years)
    if not 1 <= week <= basis.weeks_per_year:
        raise ValueError(f"week must lie in [1, {basis.weeks_per_year}], got {week}")
    x0 = _return_window_row(basis, covariate, reference_year, n_years)
    level = 1.0 - 1.0 / (basis.weeks_per_year * n_years)
    means = mean_surfaces(samples["beta"], basis.X21, basis.X22, x0, basis.X1[week - 1])
    levels = np.array([np.mean(means[:, n] + _site_quantiles(samples, basis, n, level)) for n in range(basis.n_sites)])
    logger.info(f"Computed {n_years}-year return levels for week {week} at {basis.n_sites} sites")
    return levels


@dataclass
class ExceedanceThreshold:
    """A fixed level u, or a site-specific quantile level p of the marginal law.

    Attributes:
        kind: "fixed" or "quantile"
        value: u in data units, or p in (0, 1)
    """

    kind: str
    value: float

    def __post_init__(self):
        """Validate the threshold."""
        if self.kind not in THRESHOLD_KINDS:
            raise ValueError(f"threshold kind must be one of: {THRESHOLD_KINDS}")
        if self.kind == "quantile" and not 0.0 < self.value < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {self.value}")
        if self.kind == "fixed" and math.isnan(self.value):
            raise ValueError("fixed threshold must not be nan")

    @classmethod
    def fixed(cls, u: float) -> "ExceedanceThreshold":
        return cls("fixed", float(u))

    @classmethod
    def quantile(cls, p: float) -> "ExceedanceThreshold":
        return cls("quantile", float(p))


@dataclass
class ExceedanceEstimate:
    """Monte Carlo estimate of a joint exceedance probability."""

    probability: float
    mc_se: float
    mode: str
    threshold: ExceedanceThreshold
    n_draws: int


def site_thresholds(
    samples: PosteriorSamples,
    basis: BasisSet,
    ensemble: PredictiveEnsemble,
    sites: np.ndarray,
    threshold: ExceedanceThreshold,
) -> np.ndarray:
    """
    B x |sites| thresholds: the constant u, or mu_b(t0, s_n) + Q_b^(n)(p).

    Quantiles are recomputed for every retained draw, so parameter uncertainty
    carries into the event.
    """
    if threshold.kind == "fixed":
        return np.full((ensemble.n_draws, len(sites)), threshold.value)
    quantiles = np.stack([_site_quantiles(samples, basis, n, threshold.value) for n in sites], axis=1)
    return ensemble.means[:, sites] + quantiles


def _check_sites(sites: Sequence[int], n_sites: int) -> np.ndarray:
    sites = np.unique(np.asarray(sites, dtype=np.int64))
    if len(sites) == 0:
        raise ValueError("the site set D0 is empty")
    if sites[0] < 0 or sites[-1] >= n_sites:
        raise ValueError(f"site indices must lie in [0, {n_sites})")
    return sites


def _event_frequency(exceed: np.ndarray, mode: str) -> Tuple[float, float]:
    event = exceed.any(axis=1) if mode == "union" else exceed.all(axis=1)
    B = len(event)
    p = np.count_nonzero(event) / B
    return p, math.sqrt(p * (1.0 - p) / B)


def joint_exceedance_prob(
    samples: PosteriorSamples,
    basis: BasisSet,
    sites: Sequence[int],
    threshold: ExceedanceThreshold,
    mode: str,
    t0: int,
    covariate: Optional[CovariateSeries] = None,
    seed: int = 0,
    threads: int = 1,
    ensemble: Optional[PredictiveEnsemble] = None,
) -> ExceedanceEstimate:
    """
    Probability that at least one (union) or every (intersection) site in D0
    exceeds its threshold at week t0.

    Args:
        sites: Site indices of D0
        threshold: Fixed u or quantile level p
        mode: "union" or "intersection"
        ensemble: Reuse an ensemble already drawn at t0

    Raises:
        ValueError: If D0 is empty or mode is unknown
    """
    if mode not in EXCEEDANCE_MODES:
        raise ValueError(f"mode must be one of: {EXCEEDANCE_MODES}")
    sites = _check_sites(sites, basis.n_sites)
    if ensemble is None:
        ensemble = posterior_predictive(samples, basis, t0, covariate, seed, threads)
    limits = site_thresholds(samples, basis, ensemble, sites, threshold)
    probability, mc_se = _event_frequency(ensemble.draws[:, sites] > limits, mode)
    logger.info(f"{mode} exceedance of {threshold.kind} {threshold.value} over {len(sites)} sites: {probability:.4f} (se {mc_se:.4f})")
    return ExceedanceEstimate(probability, mc_se, mode, threshold, ensemble.n_draws)


def exceedance_curve(
    samples: PosteriorSamples,
    basis: BasisSet,
    sites: Sequence[int],
    thresholds: Sequence[ExceedanceThreshold],
    t0: int,
    covariate: Optional[CovariateSeries] = None,
    seed: int = 0,
    threads: int = 1,
) -> pd.DataFrame:
    """
    Union and intersection probabilities for a list of thresholds, all from
    one predictive ensemble.

    Returns:
        DataFrame with columns kind, level, mode, probability, mc_se
    """
    sites = _check_sites(sites, basis.n_sites)
    ensemble = posterior_predictive(samples, basis, t0, covariate, seed, threads)
    rows: List[dict] = []
    for threshold in thresholds:
        limits = site_thresholds(samples, basis, ensemble, sites, threshold)
        exceed = ensemble.draws[:, sites] > limits
        for mode in EXCEEDANCE_MODES:
            probability, mc_se = _event_frequency(exceed, mode)
            rows.append({
                "kind": threshold.kind, "level": threshold.value, "mode": mode,
                "probability": probability, "mc_se": mc_se,
            })
    return pd.DataFrame(rows, columns=["kind", "level", "mode", "probability", "mc_se"])
