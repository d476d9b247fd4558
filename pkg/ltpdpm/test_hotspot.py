"""Tests for the hotspot module."""

import json
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from ltpdpm.errors import DegeneracyError, UndefinedRegionError
from ltpdpm.hotspot import (
    critical_value,
    estimate_hotspot,
    exceedance_minima,
    hotspot_from_ensemble,
    lower_quantile,
    standardized_statistic,
    test_statistic,
    write_hotspot,
)
from ltpdpm.predict import PredictiveEnsemble
from ltpdpm.sampler import PosteriorSamples


def ensemble_of(draws):
    draws = np.asarray(draws, dtype=np.float64)
    return PredictiveEnsemble(draws=draws, means=np.zeros_like(draws), t0=1)


def gaussian_ensemble(means, n_draws, seed, rho=0.5):
    """Equicorrelated unit-variance Gaussian draws around the given site means."""
    rng = np.random.default_rng(seed)
    n = len(means)
    common = rng.standard_normal((n_draws, 1))
    own = rng.standard_normal((n_draws, n))
    return np.asarray(means) + math.sqrt(rho) * common + math.sqrt(1 - rho) * own


class TestStatistic:
    """Test the per-site statistic."""

    def test_arithmetic(self):
        """Test B=10000, mean 31, u=30, sd 2 gives 50."""
        assert standardized_statistic([31.0], [2.0], 10000, 30.0)[0] == pytest.approx(50.0)

    def test_null_point(self):
        """Test a mean equal to u gives 0."""
        assert standardized_statistic([30.0], [1.5], 400, 30.0)[0] == 0.0

    def test_sqrt_scaling(self):
        """Test doubling B multiplies the statistic by sqrt(2)."""
        one = standardized_statistic([1.0, -2.0], [0.5, 3.0], 1000, 0.2)
        two = standardized_statistic([1.0, -2.0], [0.5, 3.0], 2000, 0.2)
        assert two == pytest.approx(math.sqrt(2.0) * one, rel=1e-14)

    def test_zero_spread(self):
        """Test a site with zero SD is named."""
        with pytest.raises(DegeneracyError) as exc_info:
            standardized_statistic([1.0, 2.0], [1.0, 0.0], 100, 0.0)
        assert "site 1" in str(exc_info.value)

    def test_from_ensemble(self):
        """Test the ensemble entry point uses mean, SD and size."""
        draws = gaussian_ensemble([0.0, 1.0], 200, seed=0)
        stats = test_statistic(ensemble_of(draws), 0.5)
        expected = math.sqrt(200) * (draws.mean(axis=0) - 0.5) / draws.std(axis=0, ddof=1)
        assert stats == pytest.approx(expected)


class TestCriticalValue:
    """Test the family-wise critical value."""

    def test_lower_quantile(self):
        """Test the type-1 quantile picks an order statistic."""
        values = np.arange(1.0, 11.0)
        assert lower_quantile(values, 0.05) == 1.0
        assert lower_quantile(values, 0.25) == 3.0
        assert lower_quantile(values, 0.3) == 3.0
        assert lower_quantile(values[::-1], 0.5) == 5.0

    def test_everything_exceeds(self):
        """Test u below every draw makes every minimum the smallest statistic."""
        ensemble = ensemble_of(gaussian_ensemble([5.0, 6.0, 7.0], 300, seed=1))
        stats = test_statistic(ensemble, -100.0)
        assert critical_value(ensemble, stats, -100.0, 0.05) == stats.min()
        result = hotspot_from_ensemble(ensemble, -100.0, 0.05)
        assert_array_equal(result.region, [0, 1, 2])

    def test_small_alpha_takes_smallest_minimum(self):
        """Test alpha near 0 returns min_b m_b."""
        ensemble = ensemble_of(gaussian_ensemble([0.0, 0.5, 1.0, 1.5], 500, seed=2))
        stats = test_statistic(ensemble, 1.0)
        minima = exceedance_minima(ensemble, stats, 1.0)
        assert critical_value(ensemble, stats, 1.0, 1e-6) == minima.min()

    def test_empty_draws_are_infinite(self):
        """Test draws exceeding u nowhere contribute +inf."""
        draws = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0], [2.0, 3.0]])
        minima = exceedance_minima(ensemble_of(draws), np.array([1.0, -1.0]), 1.0)
        assert_array_equal(minima, [np.inf, 1.0, -1.0, -1.0])

    def test_unreachable_threshold(self):
        """Test no exceedance anywhere is an undefined region."""
        ensemble = ensemble_of(gaussian_ensemble([0.0, 1.0], 100, seed=3))
        with pytest.raises(UndefinedRegionError):
            hotspot_from_ensemble(ensemble, 1e9, 0.05)

    def test_two_site_direct_simulation(self):
        """Test the ensemble critical value against a large direct simulation of the same law."""
        ensemble = ensemble_of(gaussian_ensemble([1.0, 0.0], 2000, seed=4, rho=0.0))
        stats = test_statistic(ensemble, 0.5)
        direct = ensemble_of(gaussian_ensemble([1.0, 0.0], 1_000_000, seed=5, rho=0.0))
        expected = lower_quantile(exceedance_minima(direct, stats, 0.5), 0.05)
        assert critical_value(ensemble, stats, 0.5, 0.05) == expected
        assert expected == stats[1]

    def test_threads_do_not_change_result(self):
        """Test chunked minima are identical across worker counts."""
        ensemble = ensemble_of(gaussian_ensemble(np.linspace(-1, 1, 8), 2500, seed=6))
        stats = test_statistic(ensemble, 0.0)
        assert critical_value(ensemble, stats, 0.0, 0.1, threads=1) == critical_value(ensemble, stats, 0.0, 0.1, threads=4)

    def test_alpha_range(self):
        """Test alpha must lie in (0, 1)."""
        ensemble = ensemble_of(gaussian_ensemble([0.0, 1.0], 100, seed=7))
        with pytest.raises(ValueError):
            critical_value(ensemble, np.zeros(2), 0.0, 1.0)


class TestRegion:
    """Test region estimates."""

    def test_super_level_set(self):
        """Test the region is exactly the sites at or above the critical value."""
        ensemble = ensemble_of(gaussian_ensemble(np.linspace(-2, 2, 30), 1000, seed=8))
        result = hotspot_from_ensemble(ensemble, 0.0, 0.05)
        assert set(result.region) == set(np.flatnonzero(result.test_stats >= result.critical_value))
        assert_array_equal(result.in_region, result.test_stats >= result.critical_value)

    def test_nested_in_alpha(self):
        """Test the alpha=0.05 region contains the alpha=0.5 region."""
        ensemble = ensemble_of(gaussian_ensemble(np.linspace(-2, 2, 30), 1000, seed=9))
        strict = hotspot_from_ensemble(ensemble, 0.0, 0.05)
        loose = hotspot_from_ensemble(ensemble, 0.0, 0.5)
        assert set(loose.region) <= set(strict.region)
        assert strict.critical_value <= loose.critical_value

    def test_pipeline_is_deterministic(self, small_truth):
        """Test the same samples and seed reproduce the region."""
        samples = PosteriorSamples.from_fixed(small_truth.coeffs, small_truth.clusters, small_truth.weights, 400)
        first = estimate_hotspot(samples, small_truth.basis, t0=80, u=28.0, alpha=0.05, seed=3)
        second = estimate_hotspot(samples, small_truth.basis, t0=80, u=28.0, alpha=0.05, seed=3)
        assert_array_equal(first.region, second.region)
        assert first.critical_value == second.critical_value
        assert first.t0 == 80 and first.n_draws == 400

    def test_write(self, tmp_path):
        """Test the GeoJSON, CSV and summary outputs."""
        ensemble = ensemble_of(gaussian_ensemble([0.0, 1.0, 2.0], 500, seed=10))
        result = hotspot_from_ensemble(ensemble, 1.0, 0.05)
        coords = np.array([[35.0, 20.0], [36.0, 20.0], [37.0, 20.0]])
        paths = write_hotspot(result, tmp_path, coords, ["a", "b", "c"])

        table = pd.read_csv(paths["csv"])
        assert list(table.columns) == ["site_id", "test_stat", "in_region"]
        assert list(table["in_region"]) == list(result.in_region)

        features = json.loads(paths["geojson"].read_text())["features"]
        assert features[2]["geometry"]["coordinates"] == [37.0, 20.0]
        assert features[2]["properties"]["site_id"] == "c"

        summary = json.loads(paths["summary"].read_text())
        assert summary["region_size"] == len(result.region)
        assert summary["critical_value"] == pytest.approx(result.critical_value)
        assert summary["alpha"] == 0.05


@pytest.mark.slow
def test_family_wise_coverage():
    """Test the region contains the true exceedance set at about 1 - alpha."""
    means = np.linspace(-1.5, 1.5, 50)
    u, alpha, replicates = 0.0, 0.05, 500
    covered = 0
    for r in range(replicates):
        ensemble = ensemble_of(gaussian_ensemble(means, 2000, seed=1000 + r))
        truth = gaussian_ensemble(means, 1, seed=5000 + r)[0]
        result = hotspot_from_ensemble(ensemble, u, alpha)
        covered += set(np.flatnonzero(truth >= u)) <= set(result.region)
    frequency = covered / replicates
    band = 2.576 * math.sqrt(0.95 * 0.05 / replicates)
    assert frequency >= 0.95 - band
