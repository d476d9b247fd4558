"""Tests for the score module."""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate

from ltpdpm.config import DF_TENTHS_MAX, MCMCConfig
from ltpdpm.errors import UndefinedSkillError
from ltpdpm.ingest import GriddedDataset
from ltpdpm.model import generate_synthetic, make_synthetic_truth
from ltpdpm.sampler import PosteriorSamples, gibbs_fit
from ltpdpm.score import (
    CellScores,
    PredictiveCdf,
    benchmark_config,
    brier_score,
    chronological_split,
    forecast_scores,
    score_table,
    score_thresholds,
    skill_score,
    skill_scores,
    twcrps,
    write_score_table,
)


def twcrps_by_quadrature(y, F, u):
    """Integral of the Brier score over (u, inf), split at every jump."""
    top = max(F.draws[-1], y, u)
    jumps = sorted({x for x in np.append(F.draws, y) if u < x < top})

    def integrand(x):
        return (F(x) - float(y <= x)) ** 2

    value, _ = integrate.quad(integrand, u, top, points=jumps or None, limit=500, epsabs=1e-10)
    return value


class TestPredictiveCdf:
    """Test the empirical step CDF."""

    def test_right_continuous(self):
        """Test F jumps at each draw and is sorted on construction."""
        F = PredictiveCdf([2.0, 0.0, 1.0, 1.0])
        assert_array_equal(F.draws, [0.0, 1.0, 1.0, 2.0])
        assert F(1.0) == 0.75
        assert F(0.999) == 0.25
        assert F.survival(2.0) == 0.0

    def test_non_finite(self):
        """Test non-finite draws are refused."""
        with pytest.raises(ValueError):
            PredictiveCdf([0.0, np.nan])

    def test_empty(self):
        """Test an empty ensemble is refused."""
        with pytest.raises(ValueError):
            PredictiveCdf([])


class TestBrierScore:
    """Test the Brier score."""

    def test_perfect_forecast(self):
        """Test y > u with survival 1 scores 0."""
        assert brier_score(5.0, PredictiveCdf([3.0, 4.0]), 2.0) == 0.0

    def test_arithmetic(self):
        """Test y < u with survival 0.4 scores 0.16."""
        F = PredictiveCdf([0.0, 1.0, 2.0, 3.0, 4.0])
        assert brier_score(0.5, F, 2.5) == pytest.approx(0.16)

    def test_perfect_negative_forecast(self):
        """Test y < u with survival 0 scores 0."""
        assert brier_score(0.0, PredictiveCdf([0.5, 0.7]), 1.0) == 0.0


class TestTwcrps:
    """Test the threshold-weighted CRPS."""

    def test_all_below_threshold(self):
        """Test the weight annihilates the integrand."""
        assert twcrps(0.0, PredictiveCdf([0.1, 0.2, 0.3]), 1.0) == 0.0

    def test_point_mass(self):
        """Test a deterministic forecast at y scores 0."""
        F = PredictiveCdf([2.5, 2.5, 2.5])
        for u in (-1.0, 2.0, 2.5, 3.0):
            assert twcrps(2.5, F, u) == pytest.approx(0.0, abs=1e-15)

    def test_two_draws(self):
        """Test F = {0, 1}, y = 1, u = 0 gives 0.25."""
        assert twcrps(1.0, PredictiveCdf([0.0, 1.0]), 0.0) == pytest.approx(0.25)

    def test_matches_quadrature(self):
        """Test the closed form against piecewise quadrature."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            F = PredictiveCdf(rng.normal(size=20))
            y = rng.normal(scale=1.5)
            u = rng.uniform(-1.5, 1.5)
            assert twcrps(y, F, u) == pytest.approx(twcrps_by_quadrature(y, F, u), abs=1e-6)

    def test_non_increasing_in_threshold(self):
        """Test raising u never increases the score."""
        rng = np.random.default_rng(1)
        F = PredictiveCdf(rng.normal(size=50))
        scores = [twcrps(0.3, F, u) for u in np.linspace(-3, 3, 61)]
        assert np.all(np.diff(scores) <= 1e-12)
        assert min(scores) >= 0


class TestSkill:
    """Test skill scores."""

    def test_self_skill(self):
        """Test a model against itself scores 0%."""
        scores = CellScores(np.array([0.1, 0.2]), np.array([0.3, 0.4]))
        skill = skill_scores(scores, scores)
        assert (skill.bss, skill.twcrpss) == (0.0, 0.0)

    def test_perfect_model(self):
        """Test a zero-score model scores 100%."""
        assert skill_score(np.zeros(3), np.array([0.1, 0.2, 0.3])) == pytest.approx(100.0)

    def test_arithmetic(self):
        """Test means 0.15 against 0.2 give 25%."""
        assert skill_score(np.array([0.1, 0.2]), np.array([0.2, 0.2])) == pytest.approx(25.0)

    def test_scale_invariant(self):
        """Test a common rescaling leaves the skill unchanged."""
        rng = np.random.default_rng(2)
        model, benchmark = rng.uniform(size=30), rng.uniform(size=30)
        assert skill_score(7.0 * model, 7.0 * benchmark) == pytest.approx(skill_score(model, benchmark))

    def test_zero_benchmark(self):
        """Test a perfect benchmark leaves skill undefined."""
        with pytest.raises(UndefinedSkillError):
            skill_score(np.array([0.1]), np.array([0.0]))

    def test_misaligned(self):
        """Test score vectors must be aligned."""
        with pytest.raises(ValueError):
            skill_score(np.zeros(2), np.ones(3))


class TestChronologicalSplit:
    """Test the train/test split."""

    def setup_method(self):
        """Set up a three-year dataset."""
        self.data = GriddedDataset(np.arange(3 * 156, dtype=float).reshape(3, 156), np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))

    def test_partition(self):
        """Test train and test reconstruct the data."""
        train, test = chronological_split(self.data, 104)
        assert (train.n_weeks, test.n_weeks) == (104, 52)
        assert_array_equal(np.hstack([train.values, test.values]), self.data.values)

    def test_year_halves(self):
        """Test cut = 52 on T = 104."""
        two_years = self.data.select_weeks(1, 104)
        train, test = chronological_split(two_years, 52)
        assert train.n_weeks == test.n_weeks == 52

    def test_not_a_year_boundary(self):
        """Test a cut inside a year is refused."""
        with pytest.raises(ValueError):
            chronological_split(self.data, 100)

    def test_cut_at_end(self):
        """Test the cut must leave test weeks."""
        with pytest.raises(ValueError):
            chronological_split(self.data, 156)

    def test_thresholds(self):
        """Test ten increasing levels between the 95% and 99.9% quantiles."""
        train, _ = chronological_split(self.data, 104)
        levels = score_thresholds(train)
        assert len(levels) == 10
        assert np.all(np.diff(levels) > 0)
        assert levels[0] == pytest.approx(np.quantile(train.values, 0.95))


class TestForecastScores:
    """Test held-out scoring end to end."""

    def test_self_comparison(self, small_truth, tmp_path):
        """Test cell counts, a zero self-skill table and its CSV."""
        data, _ = generate_synthetic(
            small_truth.coeffs, small_truth.clusters, small_truth.weights, small_truth.basis, 156, seed=30
        )
        _, test = chronological_split(data, 104)
        samples = PosteriorSamples.from_fixed(small_truth.coeffs, small_truth.clusters, small_truth.weights, 50)
        thresholds = np.quantile(data.values, [0.5, 0.9])
        scores = forecast_scores(samples, small_truth.basis, test, 105, thresholds, seed=1)
        assert set(scores) == set(float(u) for u in thresholds)
        cells = next(iter(scores.values()))
        assert cells.brier.shape == (20 * 52,)
        assert np.all(cells.twcrps >= 0)

        table = score_table("ltp-dpm", scores, scores)
        assert list(table.columns) == ["model", "u", "BSS", "TWCRPSS"]
        assert_allclose(table[["BSS", "TWCRPSS"]].to_numpy(), 0.0)
        written = pd.read_csv(write_score_table(table, tmp_path / "scores.csv"))
        assert len(written) == 2

    def test_benchmark_config(self):
        """Test the benchmark keeps the schedule with one Gaussian component."""
        cfg = benchmark_config(MCMCConfig(n_iter=200, burn_in=100, thin=2, n_components=8, seed=4))
        assert (cfg.n_components, cfg.fixed_df_tenths) == (1, DF_TENTHS_MAX)
        assert (cfg.n_iter, cfg.burn_in, cfg.thin, cfg.seed) == (200, 100, 2, 4)

    @pytest.mark.slow
    def test_heavy_tails_beat_gaussian_benchmark(self):
        """Test the mixture model out-scores the Gaussian benchmark on heavy-tailed data."""
        truth = make_synthetic_truth(
            n_lon=6, n_lat=5, n_years=6, n_future_years=4, n_eofs=3, df_tenths=(25, 30, 30), seed=31
        )
        data, _ = generate_synthetic(truth.coeffs, truth.clusters, truth.weights, truth.basis, 520, seed=32)
        train, test = chronological_split(data, 312)
        config = MCMCConfig(n_iter=2000, burn_in=1000, thin=5, n_components=5, seed=33)
        model = gibbs_fit(train, truth.basis, config)
        benchmark = gibbs_fit(train, truth.basis, benchmark_config(config))

        thresholds = np.quantile(train.values, [0.95, 0.97, 0.99])
        model_scores = forecast_scores(model, truth.basis, test, 313, thresholds, seed=34)
        benchmark_scores = forecast_scores(benchmark, truth.basis, test, 313, thresholds, seed=34)
        for u in model_scores:
            skill = skill_scores(model_scores[u], benchmark_scores[u])
            assert skill.bss > 0, (u, skill)
            assert skill.twcrpss > 0, (u, skill)
