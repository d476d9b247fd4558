"""Convergence summaries of posterior traces."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Union

import numpy as np
import pandas as pd

from ltpdpm.sampler import PosteriorSamples

logger = logging.getLogger(__name__)

MIN_DRAWS = 100
RHAT_LIMIT = 1.1


def autocorrelation(trace: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation at lags 0..n-1, computed by FFT."""
    x = np.asarray(trace, dtype=np.float64)
    n = len(x)
    centered = x - x.mean()
    spectrum = np.fft.rfft(centered, n=2 * n)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), n=2 * n)[:n] / n
    if acov[0] <= 0:
        return np.concatenate([[1.0], np.zeros(n - 1)])
    return acov / acov[0]


def effective_sample_size(trace: np.ndarray) -> float:
    """
    Geyer initial-monotone-sequence estimate of the effective sample size.

    A constant trace carries no information and gets an ESS of 1.
    """
    x = np.asarray(trace, dtype=np.float64)
    n = len(x)
    if n < 4:
        raise ValueError(f"need at least 4 draws, got {n}")
    if np.ptp(x) == 0:
        return 1.0
    rho = autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[:2 * n_pairs:2] + rho[1:2 * n_pairs:2]

    total = 0.0
    previous = np.inf
    for gamma in pairs:
        if gamma <= 0:
            break
        gamma = min(gamma, previous)
        total += gamma
        previous = gamma
    tau = max(-1.0 + 2.0 * total, 1.0 / np.log10(max(n, 10)))
    return float(min(n / tau, n * np.log10(n)))


def split_rhat(trace: np.ndarray) -> float:
    """Potential scale reduction of the two halves of one chain; nan for a constant trace."""
    x = np.asarray(trace, dtype=np.float64)
    half = len(x) // 2
    if half < 2:
        raise ValueError(f"need at least 4 draws, got {len(x)}")
    chains = np.stack([x[:half], x[-half:]])
    within = chains.var(axis=1, ddof=1).mean()
    if within == 0:
        return float("nan")
    between = half * chains.mean(axis=1).var(ddof=1)
    pooled = (half - 1) / half * within + between / half
    return float(np.sqrt(pooled / within))


@dataclass
class DiagnosticsReport:
    """Per-parameter summary table."""

    table: pd.DataFrame
    ess_threshold: float

    @property
    def flagged(self) -> List[str]:
        return self.table.loc[self.table["flagged"], "parameter"].tolist()

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(path, index=False, float_format="%.10g")
        return path


def summarize_traces(traces: Mapping[str, np.ndarray], ess_threshold: float = MIN_DRAWS) -> DiagnosticsReport:
    """
    ESS, split R-hat and quantiles for each named trace.

    A parameter is flagged when its ESS is below ess_threshold or its R-hat
    exceeds 1.1.
    """
    rows = []
    for name, trace in traces.items():
        trace = np.asarray(trace, dtype=np.float64)
        if len(trace) < MIN_DRAWS:
            raise ValueError(f"diagnostics need at least {MIN_DRAWS} draws, {name} has {len(trace)}")
        ess = effective_sample_size(trace)
        rhat = split_rhat(trace)
        q05, q50, q95 = np.quantile(trace, [0.05, 0.5, 0.95])
        rows.append({
            "parameter": name,
            "mean": trace.mean(),
            "sd": trace.std(ddof=1),
            "q05": q05,
            "q50": q50,
            "q95": q95,
            "ess": ess,
            "rhat": rhat,
            "flagged": bool(ess < ess_threshold or (np.isfinite(rhat) and rhat > RHAT_LIMIT)),
        })
    table = pd.DataFrame(rows, columns=["parameter", "mean", "sd", "q05", "q50", "q95", "ess", "rhat", "flagged"])
    report = DiagnosticsReport(table=table, ess_threshold=ess_threshold)
    if report.flagged:
        logger.warning(f"Convergence flags raised for: {', '.join(report.flagged)}")
    return report


def diagnostics(samples: PosteriorSamples, ess_threshold: float = MIN_DRAWS) -> DiagnosticsReport:
    """
    Convergence report over the label-invariant traces of a fit.

    Raises:
        ValueError: If fewer than 100 draws were retained
    """
    if samples.n_draws < MIN_DRAWS:
        raise ValueError(f"diagnostics need at least {MIN_DRAWS} draws, got {samples.n_draws}")
    return summarize_traces(samples.traces(), ess_threshold)
