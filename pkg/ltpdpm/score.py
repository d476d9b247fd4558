"""
Held-out scoring: Brier score, threshold-weighted CRPS and skill against a
Gaussian benchmark.

Predictive distributions are the empirical step CDFs of ensemble draws, so
both scores are exact finite sums.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ltpdpm.basis import BasisSet
from ltpdpm.config import (
    DF_TENTHS_MAX,
    SCORE_N_THRESHOLDS,
    SCORE_QUANTILE_HI,
    SCORE_QUANTILE_LO,
    MCMCConfig,
)
from ltpdpm.errors import UndefinedSkillError
from ltpdpm.ingest import CovariateSeries, GriddedDataset
from ltpdpm.predict import posterior_predictive
from ltpdpm.sampler import PosteriorSamples

logger = logging.getLogger(__name__)

BENCHMARK_NAME = "lgp"


@dataclass
class PredictiveCdf:
    """Right-continuous empirical CDF of predictive draws for one cell."""

    draws: np.ndarray

    def __post_init__(self):
        self.draws = np.sort(np.asarray(self.draws, dtype=np.float64).ravel())
        if len(self.draws) == 0:
            raise ValueError("a predictive CDF needs at least one draw")
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("predictive draws must be finite")

    def __call__(self, x) -> np.ndarray:
        return np.searchsorted(self.draws, x, side="right") / len(self.draws)

    def survival(self, x) -> np.ndarray:
        return 1.0 - self(x)


def brier_scores(observed: np.ndarray, sorted_draws: np.ndarray, u: float) -> np.ndarray:
    """(1{y > u} - Fbar(u))^2 per cell; sorted_draws is cells x B, ascending along axis 1."""
    observed = np.asarray(observed, dtype=np.float64)
    survival = np.mean(sorted_draws > u, axis=-1)
    return ((observed > u).astype(np.float64) - survival) ** 2


def _step_integral(sorted_draws: np.ndarray, lo: np.ndarray, hi: np.ndarray, power: int) -> np.ndarray:
    """Integral of F(x)^power over [lo, hi] for the step CDF of each row."""
    n = sorted_draws.shape[-1]
    clipped = np.clip(sorted_draws, lo[..., None], hi[..., None])
    edges = np.concatenate([clipped, hi[..., None]], axis=-1)
    heights = (np.arange(1, n + 1) / n) ** power
    return np.sum(heights * np.diff(edges, axis=-1), axis=-1)


def twcrps_scores(observed: np.ndarray, sorted_draws: np.ndarray, u: float) -> np.ndarray:
    """
    Integral over (u, inf) of (F(x) - 1{y <= x})^2 per cell.

    The integrand vanishes beyond the larger of y and the top draw; below that
    point the square expands into step-function integrals of F^2 and F.
    """
    observed = np.asarray(observed, dtype=np.float64)
    sorted_draws = np.asarray(sorted_draws, dtype=np.float64)
    top = np.maximum(np.maximum(sorted_draws[..., -1], observed), u)
    lo = np.full_like(top, u)
    y_start = np.maximum(observed, u)
    total = (
        _step_integral(sorted_draws, lo, top, 2)
        - 2.0 * _step_integral(sorted_draws, y_start, top, 1)
        + (top - y_start)
    )
    return np.maximum(total, 0.0)


def brier_score(y: float, F: PredictiveCdf, u: float) -> float:
    """Brier score of the event {Y > u}."""
    return float(brier_scores(np.array([y]), F.draws[None, :], u)[0])


def twcrps(y: float, F: PredictiveCdf, u: float) -> float:
    """Threshold-weighted CRPS with weight 1{x > u}."""
    return float(twcrps_scores(np.array([y]), F.draws[None, :], u)[0])


@dataclass
class CellScores:
    """Per-cell scores of one model at one threshold."""

    brier: np.ndarray
    twcrps: np.ndarray

    @classmethod
    def concatenate(cls, parts: Iterable["CellScores"]) -> "CellScores":
        parts = list(parts)
        return cls(np.concatenate([p.brier for p in parts]), np.concatenate([p.twcrps for p in parts]))


@dataclass
class SkillScores:
    """Percent improvement over the benchmark."""

    bss: float
    twcrpss: float


def skill_score(model: np.ndarray, benchmark: np.ndarray) -> float:
    """100 (mean_benchmark - mean_model) / mean_benchmark over aligned cells."""
    model = np.asarray(model, dtype=np.float64)
    benchmark = np.asarray(benchmark, dtype=np.float64)
    if model.shape != benchmark.shape:
        raise ValueError(f"score vectors are not aligned: {model.shape} vs {benchmark.shape}")
    reference = benchmark.mean()
    if reference == 0.0:
        raise UndefinedSkillError("benchmark mean score is zero; skill is undefined")
    return float(100.0 * (reference - model.mean()) / reference)


def skill_scores(model: CellScores, benchmark: CellScores) -> SkillScores:
    """(BSS %, TWCRPSS %) of model against benchmark, flat-averaged over test cells."""
    return SkillScores(
        bss=skill_score(model.brier, benchmark.brier),
        twcrpss=skill_score(model.twcrps, benchmark.twcrps),
    )


def chronological_split(data: GriddedDataset, cut: int) -> Tuple[GriddedDataset, GriddedDataset]:
    """
    Weeks 1..cut for training and cut+1..T for testing.

    Raises:
        ValueError: If cut is not an interior year boundary
    """
    if not 1 < cut < data.n_weeks or cut % data.weeks_per_year != 0:
        raise ValueError(
            f"cut must be a multiple of {data.weeks_per_year} strictly inside (1, {data.n_weeks}), got {cut}"
        )
    return data.select_weeks(1, cut), data.select_weeks(cut + 1, data.n_weeks)


def score_thresholds(train: GriddedDataset, n_thresholds: int = SCORE_N_THRESHOLDS) -> np.ndarray:
    """Levels u from the 95% to the 99.9% empirical quantile of the training data."""
    levels = np.linspace(SCORE_QUANTILE_LO, SCORE_QUANTILE_HI, n_thresholds)
    return np.quantile(train.values.ravel(), levels)


def benchmark_config(cfg: MCMCConfig) -> MCMCConfig:
    """The single-component Gaussian surrogate run with cfg's schedule and priors."""
    return dataclasses.replace(cfg, n_components=1, fixed_df_tenths=DF_TENTHS_MAX)


def forecast_scores(
    samples: PosteriorSamples,
    basis: BasisSet,
    test: GriddedDataset,
    first_week: int,
    thresholds: np.ndarray,
    covariate: Optional[CovariateSeries] = None,
    seed: int = 0,
    threads: int = 1,
) -> Dict[float, CellScores]:
    """
    Score predictive ensembles against every held-out week.

    Args:
        test: Held-out data; its column j is global week first_week + j
        thresholds: Levels u to score at

    Returns:
        Mapping u -> CellScores over all (site, week) cells
    """
    parts: Dict[float, list] = {float(u): [] for u in thresholds}
    for j in range(test.n_weeks):
        ensemble = posterior_predictive(samples, basis, first_week + j, covariate, seed + j, threads)
        sorted_draws = np.sort(ensemble.draws.T, axis=1)
        observed = test.values[:, j]
        for u in parts:
            parts[u].append(CellScores(brier_scores(observed, sorted_draws, u), twcrps_scores(observed, sorted_draws, u)))
    logger.info(f"Scored {test.n_weeks} held-out weeks at {len(parts)} thresholds")
    return {u: CellScores.concatenate(p) for u, p in parts.items()}


def score_table(model_name: str, model: Dict[float, CellScores], benchmark: Dict[float, CellScores]) -> pd.DataFrame:
    """Rows (model, u, BSS, TWCRPSS), one per threshold."""
    rows = []
    for u in model:
        skill = skill_scores(model[u], benchmark[u])
        rows.append({"model": model_name, "u": u, "BSS": skill.bss, "TWCRPSS": skill.twcrpss})
    return pd.DataFrame(rows, columns=["model", "u", "BSS", "TWCRPSS"])


def write_score_table(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.10g")
    return path
