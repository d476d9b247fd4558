"""Tests for the Gibbs sampler."""

from unittest.mock import patch

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ltpdpm.config import DF_TENTHS_MAX, DF_TENTHS_MIN, MCMCConfig, PriorConfig
from ltpdpm.diagnostics import effective_sample_size
from ltpdpm.errors import SamplerError, ShapeError
from ltpdpm.ingest import GriddedDataset
from ltpdpm.model import (
    MixtureWeights,
    generate_synthetic,
    make_synthetic_truth,
    mean_field,
    model_covariance_matrix,
    stick_breaking,
)
from ltpdpm.sampler import (
    GibbsSampler,
    PosteriorSamples,
    draw_prior_state,
    gibbs_fit,
    simulate_observations,
)

TAME_PRIORS = PriorConfig(
    mean_prior_sd=(1.0, 1.0),
    coef_var_shape=(3.0, 3.0),
    coef_var_rate=(2.0, 2.0),
    tau2_shape=3.0,
    tau2_rate=0.5,
    delta_shape=2.0,
    delta_rate=2.0,
)


@pytest.fixture(scope="module")
def small_data(small_truth):
    data, _ = generate_synthetic(
        small_truth.coeffs, small_truth.clusters, small_truth.weights, small_truth.basis, 104, seed=21
    )
    return data


def short_config(**kwargs):
    settings = dict(n_iter=30, burn_in=10, thin=2, n_components=3, seed=5, log_every=10)
    settings.update(kwargs)
    return MCMCConfig(**settings)


class TestGibbsFit:
    """Test short sampler runs on synthetic data."""

    def test_retained_draws(self, small_truth, small_data):
        """Test the schedule, array shapes and label counts."""
        samples = gibbs_fit(small_data, small_truth.basis, short_config())
        assert samples.n_draws == 10
        assert samples["beta"].shape == (10, 2, 2, 6, 16)
        assert samples["phi"].shape == (10, 3, 3, 3)
        assert_array_equal(samples["counts"].sum(axis=1), 104)
        assert_allclose(samples.pi.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((samples["df_tenths"] >= DF_TENTHS_MIN) & (samples["df_tenths"] <= DF_TENTHS_MAX))
        assert np.all(samples["tau2"] > 0)
        assert np.all(np.isfinite(samples["log_posterior"]))

    def test_same_seed_same_chain(self, small_truth, small_data):
        """Test a fixed seed reproduces every draw."""
        first = gibbs_fit(small_data, small_truth.basis, short_config())
        second = gibbs_fit(small_data, small_truth.basis, short_config())
        for name in ("beta", "phi", "tau2", "df_tenths", "sticks", "delta"):
            assert_array_equal(first[name], second[name])

    def test_different_seed_differs(self, small_truth, small_data):
        """Test the seed drives the chain."""
        first = gibbs_fit(small_data, small_truth.basis, short_config(seed=1))
        second = gibbs_fit(small_data, small_truth.basis, short_config(seed=2))
        assert not np.array_equal(first["beta"], second["beta"])

    def test_gaussian_surrogate(self, small_truth, small_data):
        """Test the lgp family keeps one component at the largest df."""
        cfg = MCMCConfig.for_family("lgp", n_iter=20, burn_in=10, thin=1, seed=3)
        samples = gibbs_fit(small_data, small_truth.basis, cfg)
        assert samples.n_components == 1
        assert np.all(samples["df_tenths"] == DF_TENTHS_MAX)
        assert_allclose(samples.pi, 1.0)

    def test_layout_mismatch(self, small_truth, small_data):
        """Test data and basis must share sites."""
        fewer = GriddedDataset(small_data.values[:10], small_data.coords[:10])
        with pytest.raises(ShapeError):
            gibbs_fit(fewer, small_truth.basis, short_config())

    def test_failing_block_is_named(self, small_truth, small_data):
        """Test a numerical failure reports iteration and block."""
        with patch.object(GibbsSampler, "update_phi", side_effect=np.linalg.LinAlgError("not positive definite")):
            with pytest.raises(SamplerError) as exc_info:
                gibbs_fit(small_data, small_truth.basis, short_config())
        assert exc_info.value.iteration == 1
        assert exc_info.value.block == "phi"

    def test_callback_sees_every_sweep(self, small_truth, small_data):
        """Test the per-sweep callback."""
        seen = []
        GibbsSampler(small_data, small_truth.basis, short_config(n_iter=12, burn_in=2)).run(
            callback=lambda iteration, state: seen.append(iteration)
        )
        assert seen == list(range(1, 13))


class TestPosteriorSamples:
    """Test the posterior draw container."""

    def test_store_round_trip(self, small_truth, small_data, tmp_path):
        """Test a chunked store reloads every array."""
        samples = gibbs_fit(small_data, small_truth.basis, short_config())
        samples.save(tmp_path / "samples", chunk_size=3)
        loaded = PosteriorSamples.load(tmp_path / "samples")
        assert loaded.seed == 5
        for name in ("beta", "phi", "df_tenths", "counts", "log_likelihood"):
            assert_array_equal(loaded[name], samples[name])
        assert loaded.config["n_iter"] == 30

    def test_from_fixed(self, small_truth):
        """Test a point-mass posterior repeats its parameters."""
        samples = PosteriorSamples.from_fixed(small_truth.coeffs, small_truth.clusters, small_truth.weights, 4)
        assert samples.n_draws == 4
        assert_allclose(samples.pi, np.tile([0.3, 0.3, 0.4], (4, 1)), atol=1e-15)
        assert_allclose(samples.ordered_weights()[0], [0.4, 0.3, 0.3], atol=1e-15)
        coeffs, clusters, weights = samples.draw(2)
        assert_array_equal(coeffs.beta, small_truth.coeffs.beta)
        assert [c.df_tenths for c in clusters] == [30, 100, 400]

    def test_traces(self, small_truth):
        """Test scalar traces have one value per draw."""
        traces = PosteriorSamples.from_fixed(small_truth.coeffs, small_truth.clusters, small_truth.weights, 5).traces()
        assert {"log_posterior", "delta", "min_df", "largest_weight", "mu_11", "sigma2_22"} <= set(traces)
        assert all(len(v) == 5 for v in traces.values())
        assert_allclose(traces["min_df"], 3.0)

    def test_label_free_summaries(self, small_truth):
        """Test relabelling the components leaves the label-free summaries unchanged."""
        base = PosteriorSamples.from_fixed(small_truth.coeffs, small_truth.clusters, small_truth.weights, 3)
        pi = small_truth.weights.pi
        for perm in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
            shuffled = PosteriorSamples.from_fixed(
                small_truth.coeffs,
                [small_truth.clusters[k] for k in perm],
                MixtureWeights.from_pi(pi[perm]),
                3,
            )
            assert_allclose(shuffled.ordered_weights(), base.ordered_weights(), atol=1e-12)
            for name in ("min_df", "largest_weight", "mean_tau2"):
                assert_allclose(shuffled.traces()[name], base.traces()[name], atol=1e-12)

    def test_missing_array(self):
        """Test an incomplete array set is refused."""
        with pytest.raises(ShapeError):
            PosteriorSamples(arrays={"beta": np.zeros((2, 2, 2, 1, 1))}, config={}, seed=0)


def _geweke_functionals(state):
    pi = stick_breaking(state.sticks)
    phi0, phi1 = state.phi[0], state.phi[1]
    return np.array([
        *state.mu.ravel(),
        *np.log(state.sigma2_hyper).ravel(),
        state.beta[0, 0, 0, 0],
        state.beta[1, 1, 0, 0],
        state.beta[0, 0].mean(),
        np.log(state.tau2[0]),
        np.log(state.tau2[1]),
        np.log(np.trace(phi0)),
        np.log(np.trace(phi1)),
        phi0[0, 1] / np.sqrt(phi0[0, 0] * phi0[1, 1]),
        state.df_tenths.mean() / 10.0,
        state.df_tenths[0] / 10.0,
        pi.max(),
        pi[0],
        np.mean(state.labels == 0),
        np.log(state.sigma2).mean(),
        np.log(np.mean(state.W ** 2)),
        state.delta,
    ])


def _geweke_z(marginal, successive):
    """z-scores of mean differences, the successive chain's variance scaled by its ESS."""
    z = []
    for j in range(marginal.shape[1]):
        ess = effective_sample_size(successive[:, j])
        se2 = marginal[:, j].var(ddof=1) / len(marginal) + successive[:, j].var(ddof=1) / ess
        z.append((marginal[:, j].mean() - successive[:, j].mean()) / np.sqrt(se2))
    return np.array(z)


class TestJointDistribution:
    """Test the sampler against prior draws of the joint law."""

    def _sampler(self, basis, config):
        rng = np.random.default_rng(config.seed + 1)
        state = draw_prior_state(basis, config, 104, rng)
        data = GriddedDataset(simulate_observations(state, basis, rng), basis.coords)
        return GibbsSampler(data, basis, config), state, rng

    def test_successive_conditionals_stay_finite(self, small_truth):
        """Test alternating data and parameter draws for a few sweeps."""
        config = MCMCConfig(n_iter=10, burn_in=0, thin=1, n_components=2, fixed_df_tenths=100, priors=TAME_PRIORS, seed=7)
        sampler, state, rng = self._sampler(small_truth.basis, config)
        for _ in range(10):
            sampler.set_observations(simulate_observations(state, small_truth.basis, rng))
            sampler.sweep(state)
        assert np.all(np.isfinite(_geweke_functionals(state)))
        assert state.labels.max() < 2

    @pytest.mark.slow
    def test_geweke(self, small_truth):
        """Test marginal-conditional and successive-conditional simulators agree."""
        config = MCMCConfig(n_iter=10, burn_in=0, thin=1, n_components=2, priors=TAME_PRIORS, seed=8)
        basis = small_truth.basis
        sampler, state, rng = self._sampler(basis, config)

        marginal = np.array([_geweke_functionals(draw_prior_state(basis, config, 104, rng)) for _ in range(2000)])
        successive = []
        for _ in range(4000):
            sampler.set_observations(simulate_observations(state, basis, rng))
            sampler.sweep(state)
            successive.append(_geweke_functionals(state))
        z = _geweke_z(marginal, np.array(successive))
        assert len(z) >= 20
        assert np.mean(np.abs(z) <= 4.0) >= 0.95, z

    @pytest.mark.slow
    def test_recovers_truth(self):
        """Test mean field, covariance and heaviest tail land near an eight-year truth."""
        truth = make_synthetic_truth(n_lon=6, n_lat=5, n_years=8, n_eofs=4, seed=23)
        basis = truth.basis
        data, _ = generate_synthetic(truth.coeffs, truth.clusters, truth.weights, basis, 416, seed=22)
        samples = gibbs_fit(data, basis, MCMCConfig(n_iter=1500, burn_in=500, thin=5, n_components=3, seed=9))

        fitted = mean_field(samples["beta"].mean(axis=0), basis)
        expected = mean_field(truth.coeffs.beta, basis)
        assert np.sqrt(np.mean((fitted - expected) ** 2)) < 0.5

        covariances = []
        for b in range(samples.n_draws):
            _, clusters, _ = samples.draw(b)
            covariances.append(model_covariance_matrix(clusters, samples.pi[b], basis.H))
        covariances = np.array(covariances)
        upper = np.triu_indices(basis.H.shape[0])
        target = model_covariance_matrix(truth.clusters, truth.weights.pi, basis.H)[upper]
        center = covariances.mean(axis=0)[upper]
        spread = covariances.std(axis=0, ddof=1)[upper]
        assert np.mean(np.abs(center - target) <= 3.0 * spread) >= 0.9

        occupied = samples["counts"] >= 0.05 * data.n_weeks
        min_df = np.where(occupied, samples["df_tenths"] / 10.0, np.inf).min(axis=1)
        assert np.all(np.isfinite(min_df))
        assert abs(min_df.mean() - 3.0) <= 3.0 * max(min_df.std(ddof=1), 0.1)
