"""
Exceedance regions with family-wise error control.

Each site gets the statistic sqrt(B) (mean_n - u) / sd_n of its predictive
draws. The critical value is the lower alpha-quantile over draws b of the
smallest statistic among the sites where draw b exceeds u, and the region is
every site whose statistic reaches it.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from ltpdpm.basis import BasisSet
from ltpdpm.config import ENSEMBLE_CHUNK_SIZE
from ltpdpm.errors import DegeneracyError, UndefinedRegionError
from ltpdpm.ingest import CovariateSeries
from ltpdpm.predict import PredictiveEnsemble, posterior_predictive
from ltpdpm.sampler import PosteriorSamples
from ltpdpm.storage import write_site_geojson, write_site_table

logger = logging.getLogger(__name__)


class HotspotSummary(BaseModel):
    """Scalar outcome of a hotspot run, as written to JSON."""
    threshold: float
    alpha: float
    critical_value: float
    region_size: int
    n_sites: int
    n_draws: int
    t0: int


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


@dataclass
class HotspotResult:
    """Estimated exceedance region at week t0.

    Attributes:
        region: Sorted site indices with test_stats >= critical_value
        critical_value: Family-wise critical value
        test_stats: Per-site statistic
        alpha: Family-wise error level
        threshold: Exceedance level u
        t0: Target week index
        n_draws: Ensemble size behind the statistics
    """

    region: np.ndarray
    critical_value: float
    test_stats: np.ndarray
    alpha: float
    threshold: float
    t0: int
    n_draws: int

    def __post_init__(self):
        _check_alpha(self.alpha)

    @property
    def in_region(self) -> np.ndarray:
        mask = np.zeros(len(self.test_stats), dtype=bool)
        mask[self.region] = True
        return mask

    def summary(self) -> HotspotSummary:
        return HotspotSummary(
            threshold=self.threshold,
            alpha=self.alpha,
            critical_value=self.critical_value,
            region_size=len(self.region),
            n_sites=len(self.test_stats),
            n_draws=self.n_draws,
            t0=self.t0,
        )


def standardized_statistic(mean: np.ndarray, sd: np.ndarray, n_draws: int, u: float) -> np.ndarray:
    """sqrt(n_draws) (mean - u) / sd, refusing sites with zero spread."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    flat = np.flatnonzero(~(sd > 0))
    if len(flat):
        raise DegeneracyError(f"predictive SD is zero at site {flat[0]}; the test statistic is undefined there")
    return math.sqrt(n_draws) * (mean - u) / sd


def test_statistic(ensemble: PredictiveEnsemble, u: float) -> np.ndarray:
    """
    Per-site statistic of an ensemble against threshold u.

    Raises:
        DegeneracyError: If any site's predictive SD is zero
    """
    return standardized_statistic(ensemble.mean, ensemble.sd, ensemble.n_draws, u)


# Keep pytest from collecting the module-level function above as a test
test_statistic.__test__ = False


def _draw_minima(draws: np.ndarray, test_stats: np.ndarray, u: float) -> np.ndarray:
    masked = np.where(draws >= u, test_stats[None, :], np.inf)
    return masked.min(axis=1)


def exceedance_minima(ensemble: PredictiveEnsemble, test_stats: np.ndarray, u: float, threads: int = 1) -> np.ndarray:
    """Per draw, the smallest statistic over the sites where the draw reaches u (inf when none do)."""
    draws = ensemble.draws
    starts = range(0, len(draws), ENSEMBLE_CHUNK_SIZE)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        pieces = executor.map(lambda s: _draw_minima(draws[s:s + ENSEMBLE_CHUNK_SIZE], test_stats, u), starts)
        return np.concatenate(list(pieces))


def lower_quantile(values: np.ndarray, alpha: float) -> float:
    """Type-1 (inverted empirical CDF) alpha-quantile: the smallest x with F(x) >= alpha."""
    ordered = np.sort(values)
    index = max(math.ceil(alpha * len(ordered) - 1e-9), 1) - 1
    return float(ordered[index])


def critical_value(ensemble: PredictiveEnsemble, test_stats: np.ndarray, u: float, alpha: float, threads: int = 1) -> float:
    """
    Empirical alpha-quantile of the per-draw exceedance minima.

    Draws that exceed u nowhere contribute +inf.

    Raises:
        UndefinedRegionError: If no draw exceeds u at any site
    """
    _check_alpha(alpha)
    minima = exceedance_minima(ensemble, np.asarray(test_stats, dtype=np.float64), u, threads)
    if np.all(np.isinf(minima)):
        raise UndefinedRegionError(
            f"no predictive draw exceeds u={u} at any site; the threshold is unreachable"
        )
    empty = np.count_nonzero(np.isinf(minima))
    if empty:
        logger.debug(f"{empty} of {len(minima)} draws exceed u={u} nowhere")
    return lower_quantile(minima, alpha)


def hotspot_from_ensemble(ensemble: PredictiveEnsemble, u: float, alpha: float, threads: int = 1) -> HotspotResult:
    """Region estimate from an existing ensemble."""
    _check_alpha(alpha)
    stats = test_statistic(ensemble, u)
    c_alpha = critical_value(ensemble, stats, u, alpha, threads)
    region = np.flatnonzero(stats >= c_alpha)
    return HotspotResult(
        region=region,
        critical_value=c_alpha,
        test_stats=stats,
        alpha=alpha,
        threshold=u,
        t0=ensemble.t0,
        n_draws=ensemble.n_draws,
    )


def estimate_hotspot(
    samples: PosteriorSamples,
    basis: BasisSet,
    t0: int,
    u: float,
    alpha: float,
    seed: int = 0,
    covariate: Optional[CovariateSeries] = None,
    threads: int = 1,
) -> HotspotResult:
    """
    Estimate the region that contains every site exceeding u at week t0 with
    probability about 1 - alpha.

    Args:
        samples: Posterior draws
        basis: Design matrices of the fit
        t0: Target week index
        u: Exceedance threshold
        alpha: Family-wise error level in (0, 1)
        seed: Seed of the predictive ensemble

    Returns:
        HotspotResult

    Raises:
        UndefinedRegionError: If no predictive draw exceeds u anywhere
        DegeneracyError: If a site has zero predictive spread
    """
    ensemble = posterior_predictive(samples, basis, t0, covariate, seed, threads)
    result = hotspot_from_ensemble(ensemble, u, alpha, threads)
    logger.info(
        f"Hotspot at t0={t0}, u={u}, alpha={alpha}: critical value {result.critical_value:.4f}, "
        f"{len(result.region)} of {basis.n_sites} sites"
    )
    return result


def write_hotspot(
    result: HotspotResult,
    directory: Union[str, Path],
    coords: np.ndarray,
    site_ids: Sequence,
    stem: str = "hotspot",
) -> Dict[str, Path]:
    """Write <stem>.geojson, <stem>.csv and <stem>_summary.json under directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    columns = {"test_stat": result.test_stats, "in_region": result.in_region}
    paths = {
        "geojson": write_site_geojson(directory / f"{stem}.geojson", coords, site_ids, columns),
        "csv": write_site_table(directory / f"{stem}.csv", site_ids, columns),
    }
    summary_path = directory / f"{stem}_summary.json"
    summary_path.write_text(json.dumps(result.summary().model_dump(), indent=2, sort_keys=True))
    paths["summary"] = summary_path
    return paths
