"""
Gibbs sampler for the truncated mixture of low-rank t processes.

One sweep updates, in order: the mean coefficients, their hyperparameters,
the per-week scales and EOF coefficients (sigma2_t collapsed over W_t, then
W_t given sigma2_t), the labels, the component dispersions, nuggets and
degrees of freedom, the sticks and the concentration.

The EOF coefficients are carried as W_t = sigma_t Z_t so that, given the
label, W_t ~ Normal_L(0, sigma2_t Phi_k) and the data layer is
Y_t = mu_t + H W_t + e_t with e_t ~ Normal_N(0, sigma2_t tau2_k I).
"""

import dataclasses
import functools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import linalg, special, stats

from ltpdpm.basis import BasisSet, preliminary_fit
from ltpdpm.config import (
    DF_GRID,
    DF_GRID_TENTHS,
    SAMPLER_VARIANCE_FLOOR,
    SAMPLES_CHUNK_SIZE,
    MCMCConfig,
    PriorConfig,
)
from ltpdpm.errors import SamplerError, ShapeError
from ltpdpm.ingest import GriddedDataset
from ltpdpm.model import (
    ClusterParams,
    MeanCoefficients,
    MixtureWeights,
    dpm_logdensity,
    stick_breaking,
)
from ltpdpm.storage import read_samples_store, write_samples_store

logger = logging.getLogger(__name__)

SAMPLE_ARRAYS = (
    "beta", "mu", "sigma2_hyper", "phi", "tau2", "df_tenths", "sticks", "delta",
    "counts", "sigma2_mean", "log_likelihood", "log_posterior",
)


@dataclass
class GibbsState:
    """Every quantity the sweep updates. Labels are 0-based."""

    beta: np.ndarray
    mu: np.ndarray
    sigma2_hyper: np.ndarray
    labels: np.ndarray
    sigma2: np.ndarray
    W: np.ndarray
    phi: np.ndarray
    tau2: np.ndarray
    df_tenths: np.ndarray
    sticks: np.ndarray
    delta: float

    def copy(self) -> "GibbsState":
        return dataclasses.replace(self, **{
            f.name: np.array(getattr(self, f.name), copy=True) if isinstance(getattr(self, f.name), np.ndarray) else getattr(self, f.name)
            for f in dataclasses.fields(self)
        })

    @property
    def n_components(self) -> int:
        return len(self.tau2)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_components)

    def coefficients(self) -> MeanCoefficients:
        return MeanCoefficients(self.beta, self.mu, self.sigma2_hyper)

    def clusters(self) -> List[ClusterParams]:
        return [ClusterParams(self.phi[k], self.tau2[k], int(self.df_tenths[k])) for k in range(self.n_components)]

    def weights(self) -> MixtureWeights:
        return MixtureWeights(self.sticks, self.delta)


def _log_inverse_gamma(x, shape, scale):
    return shape * np.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x


def _categorical(rng: np.random.Generator, log_weights: np.ndarray) -> np.ndarray:
    """One draw per row of an unnormalized log-weight matrix."""
    probabilities = special.softmax(log_weights, axis=-1)
    cumulative = np.cumsum(probabilities, axis=-1)
    u = rng.random(log_weights.shape[:-1])[..., None] * cumulative[..., -1:]
    return np.minimum(np.sum(cumulative < u, axis=-1), log_weights.shape[-1] - 1)


def _inverse_wishart(rng: np.random.Generator, df: float, scale: np.ndarray) -> np.ndarray:
    draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    draw = np.atleast_2d(draw)
    return (draw + draw.T) / 2.0


def _design_rows(basis: BasisSet) -> np.ndarray:
    """T x 2 P_T matrix whose row t is kron(X0[t1], X1[t2])."""
    rows = np.einsum("ai,bp->abip", basis.X0, basis.X1)
    return rows.reshape(basis.n_years * basis.weeks_per_year, 2 * basis.n_seasonal)


class GibbsSampler:
    """
    Full-conditional updates over one dataset and basis.

    The update_* methods act on a GibbsState in place and draw from the
    sampler's own generator, so a fixed seed gives a fixed chain.
    """

    def __init__(self, data: GriddedDataset, basis: BasisSet, config: MCMCConfig):
        if data.n_sites != basis.n_sites:
            raise ShapeError(f"dataset has {data.n_sites} sites, basis has {basis.n_sites}")
        if data.n_years != basis.n_years or data.weeks_per_year != basis.weeks_per_year:
            raise ShapeError(
                f"dataset spans {data.n_years} x {data.weeks_per_year} weeks, basis {basis.n_years} x {basis.weeks_per_year}"
            )
        self.data = data
        self.basis = basis
        self.config = config
        self.priors: PriorConfig = config.priors
        self.rng = np.random.Generator(np.random.PCG64(config.seed))

        self.H = basis.H
        self.n_sites, self.n_eofs = basis.H.shape
        self.delta_prior = np.diag(basis.eigenvalues)
        self.design = _design_rows(basis)
        self.HX2 = basis.H.T @ basis.X2
        self._spatial_eigen = []
        for X2j in (basis.X21, basis.X22):
            values, vectors = linalg.eigh(X2j.T @ X2j)
            self._spatial_eigen.append((np.clip(values, 0.0, None), vectors))
        self.set_observations(data.values)
        self.iteration = 0

    def set_observations(self, values: np.ndarray):
        """Swap in a new N x T observation matrix (used by the Geweke simulator)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.values.shape:
            raise ShapeError(f"observations must have shape {self.data.values.shape}, got {values.shape}")
        self.Yt = values.T
        self.YH = self.Yt @ self.H
        self.YX2 = self.Yt @ self.basis.X2
        self._summary_key = None

    # -- cached residual summaries ------------------------------------------------

    def _mean_coefficients(self, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-week spatial coefficient rows c_j = C Theta_j, each T x P_S."""
        p = 2 * self.basis.n_seasonal
        return tuple(self.design @ beta[:, j].reshape(p, -1) for j in range(2))

    def _residual_summary(self, state: GibbsState) -> Tuple[np.ndarray, np.ndarray]:
        """(|y_t|^2, H^T y_t) for y_t = Y_t - mu_t, cached per beta."""
        key = state.beta.tobytes()
        if self._summary_key != key:
            c1, c2 = self._mean_coefficients(state.beta)
            centered = self.Yt - c1 @ self.basis.X21.T - c2 @ self.basis.X22.T
            self._summary = (np.sum(centered ** 2, axis=1), centered @ self.H)
            self._summary_key = key
        return self._summary

    def _noise_norms(self, state: GibbsState) -> np.ndarray:
        """|Y_t - mu_t - H W_t|^2 per week."""
        yy, v = self._residual_summary(state)
        return np.maximum(yy - np.sum(v ** 2, axis=1), 0.0) + np.sum((v - state.W) ** 2, axis=1)

    # -- initialization -----------------------------------------------------------

    def initial_state(self) -> GibbsState:
        """Preliminary least-squares start with spread-out degrees of freedom."""
        cfg = self.config
        n_weeks = self.data.n_weeks
        K = cfg.n_components
        fit = preliminary_fit(self.data, self.basis.X0, self.basis.X1, self.basis.X2)
        coeffs = MeanCoefficients.from_preliminary(fit.coefficients)
        residual = self.data.values - fit.fitted

        if cfg.fixed_df_tenths is not None:
            df_tenths = np.full(K, cfg.fixed_df_tenths, dtype=np.int64)
        else:
            df_tenths = np.round(np.linspace(DF_GRID_TENTHS[0], DF_GRID_TENTHS[-1], K)).astype(np.int64)

        return GibbsState(
            beta=coeffs.beta,
            mu=coeffs.mu,
            sigma2_hyper=coeffs.sigma2,
            labels=self.rng.integers(0, K, size=n_weeks),
            sigma2=np.ones(n_weeks),
            W=residual.T @ self.H,
            phi=np.repeat(self.delta_prior[None], K, axis=0),
            tau2=np.full(K, 0.1),
            df_tenths=df_tenths,
            sticks=1.0 / (K - np.arange(K)),
            delta=1.0,
        )

    # -- conditional updates ------------------------------------------------------

    def update_beta(self, state: GibbsState):
        """
        Draw the four coefficient blocks.

        Within block j the precision is A kron G_j + D kron I with
        A = C^T diag(w) C and G_j = X2j^T X2j; rotating by the eigenvectors of
        G_j splits it into P_S independent 2 P_T-dimensional systems. The two
        blocks are independent given the rest because X21^T X22 = 0.
        """
        p = 2 * self.basis.n_seasonal
        weights = 1.0 / (state.sigma2 * state.tau2[state.labels])
        A = self.design.T @ (weights[:, None] * self.design)

        # R = Y - H W projected on X21 and X22 without touching N x T arrays
        RH = self.YH - state.W
        RX21 = RH @ self.HX2
        RX22 = self.YX2 - state.W @ self.HX2 - RX21

        new_beta = np.empty_like(state.beta)
        for j, RXj in enumerate((RX21, RX22)):
            eigenvalues, U = self._spatial_eigen[j]
            precision_diag = np.repeat(1.0 / state.sigma2_hyper[:, j], self.basis.n_seasonal)
            prior_mean = np.repeat(state.mu[:, j], self.basis.n_seasonal)

            linear = self.design.T @ (weights[:, None] * RXj)
            rotated_linear = (linear @ U).T + (precision_diag * prior_mean)[None, :] * U.sum(axis=0)[:, None]
            Q = eigenvalues[:, None, None] * A[None] + np.diag(precision_diag)[None]
            chol = np.linalg.cholesky(Q)
            mean = np.linalg.solve(Q, rotated_linear[..., None])[..., 0]
            z = self.rng.standard_normal((len(eigenvalues), p))
            noise = np.linalg.solve(np.swapaxes(chol, -1, -2), z[..., None])[..., 0]
            theta = (mean + noise).T @ U.T
            new_beta[:, j] = theta.reshape(2, self.basis.n_seasonal, -1)
        state.beta = new_beta

    def update_mean_hypers(self, state: GibbsState):
        """Normal draw of each mu_{i;j}, then inverse-gamma draw of sigma2_{i;j}."""
        pr = self.priors
        for i in range(2):
            for j in range(2):
                entries = state.beta[i, j].ravel()
                precision = len(entries) / state.sigma2_hyper[i, j] + 1.0 / pr.mean_prior_sd[i] ** 2
                center = entries.sum() / state.sigma2_hyper[i, j] / precision
                state.mu[i, j] = center + self.rng.standard_normal() / np.sqrt(precision)
                shape = pr.coef_var_shape[i] + len(entries) / 2.0
                rate = pr.coef_var_rate[i] + 0.5 * np.sum((entries - state.mu[i, j]) ** 2)
                state.sigma2_hyper[i, j] = max(rate / self.rng.standard_gamma(shape), SAMPLER_VARIANCE_FLOOR)

    def update_W_sigma(self, state: GibbsState):
        """
        Joint draw of (sigma2_t, W_t): sigma2_t from its law with W_t integrated
        out, then W_t ~ Normal(S H^T y_t / tau2, sigma2_t S), S = (Phi^-1 + I / tau2)^-1.
        """
        yy, v = self._residual_summary(state)
        outside = np.maximum(yy - np.sum(v ** 2, axis=1), 0.0)
        n_weeks = len(state.labels)
        df = state.df_tenths[state.labels] / 10.0

        quad = np.empty(n_weeks)
        factors = []
        for k in range(state.n_components):
            members = state.labels == k
            tau2 = state.tau2[k]
            chol = linalg.cho_factor(state.phi[k] + tau2 * np.eye(self.n_eofs), lower=True)
            quad[members] = outside[members] / tau2 + np.sum(v[members] * linalg.cho_solve(chol, v[members].T).T, axis=1)
            S = tau2 * state.phi[k] @ linalg.cho_solve(chol, np.eye(self.n_eofs))
            S = (S + S.T) / 2.0
            factors.append((S, linalg.cholesky(S, lower=True)))

        shape = df / 2.0 + self.n_sites / 2.0
        rate = df / 2.0 - 1.0 + quad / 2.0
        state.sigma2 = np.maximum(rate / self.rng.standard_gamma(shape), SAMPLER_VARIANCE_FLOOR)

        z = self.rng.standard_normal((n_weeks, self.n_eofs))
        W = np.empty_like(state.W)
        for k, (S, root) in enumerate(factors):
            members = state.labels == k
            W[members] = v[members] @ S.T / state.tau2[k] + np.sqrt(state.sigma2[members])[:, None] * (z[members] @ root.T)
        state.W = W

    def label_log_weights(self, state: GibbsState) -> np.ndarray:
        """T x K complete-data log-weights of the label conditional."""
        noise = self._noise_norms(state)
        log_pi = np.log(np.maximum(stick_breaking(state.sticks), np.finfo(float).tiny))
        log_s2 = np.log(state.sigma2)
        L, N = self.n_eofs, self.n_sites
        columns = []
        for k in range(state.n_components):
            chol = linalg.cholesky(state.phi[k], lower=True)
            white = linalg.solve_triangular(chol, state.W.T, lower=True)
            log_w = (
                -0.5 * L * (np.log(2 * np.pi) + log_s2) - np.sum(np.log(np.diag(chol)))
                - 0.5 * np.sum(white ** 2, axis=0) / state.sigma2
            )
            a = state.df_tenths[k] / 10.0
            log_ig = _log_inverse_gamma(state.sigma2, a / 2.0, a / 2.0 - 1.0)
            log_noise = -0.5 * N * np.log(2 * np.pi * state.sigma2 * state.tau2[k]) - 0.5 * noise / (state.sigma2 * state.tau2[k])
            columns.append(log_pi[k] + log_w + log_ig + log_noise)
        return np.column_stack(columns)

    def update_labels(self, state: GibbsState):
        state.labels = _categorical(self.rng, self.label_log_weights(state))

    def update_phi(self, state: GibbsState):
        """Phi_k ~ InvWishart(L + offset + m_k, Delta + sum Z_t Z_t^T) with Z_t = W_t / sigma_t."""
        Z = state.W / np.sqrt(state.sigma2)[:, None]
        for k in range(state.n_components):
            members = Z[state.labels == k]
            scale = self.delta_prior + members.T @ members
            state.phi[k] = _inverse_wishart(self.rng, self.n_eofs + self.priors.phi_df_offset + len(members), scale)

    def update_tau(self, state: GibbsState):
        """tau2_k ~ InvGamma(shape + N m_k / 2, rate + sum |e_t|^2 / (2 sigma2_t))."""
        scaled = self._noise_norms(state) / state.sigma2
        counts = state.counts()
        for k in range(state.n_components):
            shape = self.priors.tau2_shape + self.n_sites * counts[k] / 2.0
            rate = self.priors.tau2_rate + 0.5 * np.sum(scaled[state.labels == k])
            state.tau2[k] = max(rate / self.rng.standard_gamma(shape), SAMPLER_VARIANCE_FLOOR)

    def df_log_conditional(self, state: GibbsState, k: int) -> np.ndarray:
        """Unnormalized log-conditional of a_k over the whole grid."""
        s2 = state.sigma2[state.labels == k]
        alpha = DF_GRID / 2.0
        beta = DF_GRID / 2.0 - 1.0
        return len(s2) * (alpha * np.log(beta) - special.gammaln(alpha)) - (alpha + 1.0) * np.sum(np.log(s2)) - beta * np.sum(1.0 / s2)

    def update_df(self, state: GibbsState):
        if self.config.fixed_df_tenths is not None:
            return
        log_weights = np.stack([self.df_log_conditional(state, k) for k in range(state.n_components)])
        state.df_tenths = DF_GRID_TENTHS[_categorical(self.rng, log_weights)].astype(np.int64)

    def update_sticks(self, state: GibbsState):
        """V_k ~ Beta(1 + m_k, delta + sum_{l>k} m_l), V_K = 1."""
        counts = state.counts()
        tail = np.cumsum(counts[::-1])[::-1] - counts
        sticks = self.rng.beta(1.0 + counts[:-1], state.delta + tail[:-1]) if len(counts) > 1 else np.empty(0)
        state.sticks = np.append(sticks, 1.0)

    def update_delta(self, state: GibbsState):
        """delta ~ Gamma(shape + K - 1, rate - sum_{k<K} log(1 - V_k))."""
        K = state.n_components
        log_rest = np.sum(np.log1p(-np.clip(state.sticks[:-1], 0.0, 1.0 - 1e-12)))
        shape = self.priors.delta_shape + K - 1
        rate = self.priors.delta_rate - log_rest
        state.delta = max(self.rng.standard_gamma(shape) / rate, np.finfo(float).tiny)

    BLOCKS = (
        ("beta", "update_beta"),
        ("mean_hypers", "update_mean_hypers"),
        ("W_sigma", "update_W_sigma"),
        ("labels", "update_labels"),
        ("phi", "update_phi"),
        ("tau", "update_tau"),
        ("df", "update_df"),
        ("sticks", "update_sticks"),
        ("delta", "update_delta"),
    )

    def sweep(self, state: GibbsState):
        """One pass over every block; numerical failures name the block."""
        for name, method in self.BLOCKS:
            try:
                with np.errstate(over="raise", invalid="raise", divide="raise"):
                    getattr(self, method)(state)
            except (np.linalg.LinAlgError, linalg.LinAlgError, FloatingPointError, ValueError) as e:
                raise SamplerError(self.iteration, name, str(e)) from e
            if not _finite_state(state):
                raise SamplerError(self.iteration, name, "produced non-finite values")

    # -- traces -------------------------------------------------------------------

    def log_likelihood(self, state: GibbsState) -> float:
        """Sum over weeks of the mixture density of Y_t - mu_t, labels and scales integrated out."""
        c1, c2 = self._mean_coefficients(state.beta)
        centered = self.Yt - c1 @ self.basis.X21.T - c2 @ self.basis.X22.T
        pi = stick_breaking(state.sticks)
        return float(np.sum(dpm_logdensity(centered, state.clusters(), pi, self.H)))

    def log_posterior(self, state: GibbsState, log_likelihood: Optional[float] = None) -> float:
        """log_likelihood plus every log prior term (uniform df grid omitted)."""
        pr = self.priors
        total = self.log_likelihood(state) if log_likelihood is None else log_likelihood
        for i in range(2):
            for j in range(2):
                total += np.sum(stats.norm.logpdf(state.beta[i, j], state.mu[i, j], np.sqrt(state.sigma2_hyper[i, j])))
                total += stats.norm.logpdf(state.mu[i, j], 0.0, pr.mean_prior_sd[i])
                total += _log_inverse_gamma(state.sigma2_hyper[i, j], pr.coef_var_shape[i], pr.coef_var_rate[i])
        for k in range(state.n_components):
            if self.n_eofs > 1:
                total += stats.invwishart.logpdf(state.phi[k], self.n_eofs + pr.phi_df_offset, self.delta_prior)
            else:
                total += stats.invgamma.logpdf(state.phi[k][0, 0], (1 + pr.phi_df_offset) / 2.0, scale=self.delta_prior[0, 0] / 2.0)
            total += _log_inverse_gamma(state.tau2[k], pr.tau2_shape, pr.tau2_rate)
        if state.n_components > 1:
            total += np.sum(stats.beta.logpdf(np.clip(state.sticks[:-1], 1e-300, 1.0 - 1e-16), 1.0, state.delta))
        total += stats.gamma.logpdf(state.delta, pr.delta_shape, scale=1.0 / pr.delta_rate)
        return float(total)

    # -- driver -------------------------------------------------------------------

    def run(self, state: Optional[GibbsState] = None, callback: Optional[Callable[[int, GibbsState], None]] = None) -> "PosteriorSamples":
        """Run the configured schedule and collect the retained draws."""
        cfg = self.config
        state = state or self.initial_state()
        n_keep = cfg.n_retained
        K, L = state.n_components, self.n_eofs
        P_T, P_S = self.basis.n_seasonal, self.basis.n_spatial
        out = {
            "beta": np.empty((n_keep, 2, 2, P_T, P_S)),
            "mu": np.empty((n_keep, 2, 2)),
            "sigma2_hyper": np.empty((n_keep, 2, 2)),
            "phi": np.empty((n_keep, K, L, L)),
            "tau2": np.empty((n_keep, K)),
            "df_tenths": np.empty((n_keep, K), dtype=np.int64),
            "sticks": np.empty((n_keep, K)),
            "delta": np.empty(n_keep),
            "counts": np.empty((n_keep, K), dtype=np.int64),
            "sigma2_mean": np.empty(n_keep),
            "log_likelihood": np.empty(n_keep),
            "log_posterior": np.empty(n_keep),
        }

        logger.info(
            f"Starting Gibbs run: n_iter={cfg.n_iter}, burn_in={cfg.burn_in}, thin={cfg.thin}, "
            f"K={K}, L={L}, seed={cfg.seed}"
        )
        start = time.perf_counter()
        kept = 0
        for iteration in range(1, cfg.n_iter + 1):
            self.iteration = iteration
            self.sweep(state)
            if iteration > cfg.burn_in and (iteration - cfg.burn_in) % cfg.thin == 0:
                loglik = self.log_likelihood(state)
                out["beta"][kept] = state.beta
                out["mu"][kept] = state.mu
                out["sigma2_hyper"][kept] = state.sigma2_hyper
                out["phi"][kept] = state.phi
                out["tau2"][kept] = state.tau2
                out["df_tenths"][kept] = state.df_tenths
                out["sticks"][kept] = state.sticks
                out["delta"][kept] = state.delta
                out["counts"][kept] = state.counts()
                out["sigma2_mean"][kept] = state.sigma2.mean()
                out["log_likelihood"][kept] = loglik
                out["log_posterior"][kept] = self.log_posterior(state, loglik)
                kept += 1
            if callback is not None:
                callback(iteration, state)
            if iteration % cfg.log_every == 0:
                logger.info(
                    f"iteration {iteration}/{cfg.n_iter}: occupied={np.count_nonzero(state.counts())}, "
                    f"min df={state.df_tenths.min() / 10:.1f}, delta={state.delta:.3g}"
                )

        elapsed = time.perf_counter() - start
        logger.info(f"Gibbs run finished: {kept} draws retained in {elapsed:.1f}s")
        return PosteriorSamples(
            arrays=out,
            config=mcmc_config_echo(cfg),
            seed=cfg.seed,
            timings={"total_seconds": elapsed, "seconds_per_iteration": elapsed / cfg.n_iter},
        )


def _finite_state(state: GibbsState) -> bool:
    return all(
        np.all(np.isfinite(getattr(state, name)))
        for name in ("beta", "mu", "sigma2_hyper", "sigma2", "W", "phi", "tau2", "sticks")
    ) and np.isfinite(state.delta)


def mcmc_config_echo(cfg: MCMCConfig) -> Dict:
    """JSON-ready copy of an MCMCConfig."""
    echo = dataclasses.asdict(cfg)
    echo["priors"] = {k: list(v) if isinstance(v, tuple) else v for k, v in echo["priors"].items()}
    return echo


def gibbs_fit(data: GriddedDataset, basis: BasisSet, cfg: MCMCConfig) -> "PosteriorSamples":
    """
    Fit the model by Gibbs sampling.

    Returns:
        PosteriorSamples with (n_iter - burn_in) // thin draws

    Raises:
        ShapeError: If data and basis disagree on layout
        SamplerError: If a conditional update fails, with iteration and block
    """
    return GibbsSampler(data, basis, cfg).run()


@dataclass
class PosteriorSamples:
    """Retained draws, one leading row per draw."""

    arrays: Dict[str, np.ndarray]
    config: Dict
    seed: int
    timings: Optional[Dict[str, float]] = None

    def __post_init__(self):
        missing = [name for name in SAMPLE_ARRAYS if name not in self.arrays]
        if missing:
            raise ShapeError(f"posterior samples are missing arrays {missing}")
        sizes = {len(self.arrays[name]) for name in SAMPLE_ARRAYS}
        if len(sizes) != 1:
            raise ShapeError(f"sample arrays disagree on the number of draws: {sorted(sizes)}")
        self.arrays["df_tenths"] = np.rint(self.arrays["df_tenths"]).astype(np.int64)
        self.arrays["counts"] = np.rint(self.arrays["counts"]).astype(np.int64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def n_draws(self) -> int:
        return len(self.arrays["delta"])

    @property
    def n_components(self) -> int:
        return self.arrays["tau2"].shape[1]

    @functools.cached_property
    def pi(self) -> np.ndarray:
        """B x K mixture weights."""
        return np.array([stick_breaking(v) for v in self.arrays["sticks"]])

    def ordered_weights(self) -> np.ndarray:
        """Per-draw weights sorted in decreasing order, a label-free summary."""
        return -np.sort(-self.pi, axis=1)

    def draw(self, b: int) -> Tuple[MeanCoefficients, List[ClusterParams], MixtureWeights]:
        """Parameters of retained draw b."""
        a = self.arrays
        coeffs = MeanCoefficients(a["beta"][b], a["mu"][b], a["sigma2_hyper"][b])
        clusters = [
            ClusterParams(a["phi"][b, k], a["tau2"][b, k], int(a["df_tenths"][b, k]))
            for k in range(self.n_components)
        ]
        return coeffs, clusters, MixtureWeights(a["sticks"][b], float(a["delta"][b]))

    def traces(self) -> Dict[str, np.ndarray]:
        """Scalar functionals per draw, for convergence diagnostics."""
        a = self.arrays
        out = {
            "log_likelihood": a["log_likelihood"],
            "log_posterior": a["log_posterior"],
            "delta": a["delta"],
            "min_df": a["df_tenths"].min(axis=1) / 10.0,
            "largest_weight": self.ordered_weights()[:, 0],
            "occupied_components": np.count_nonzero(a["counts"], axis=1).astype(np.float64),
            "sigma2_mean": a["sigma2_mean"],
            "mean_tau2": np.sum(self.pi * a["tau2"], axis=1),
        }
        for i in range(2):
            for j in range(2):
                out[f"mu_{i + 1}{j + 1}"] = a["mu"][:, i, j]
                out[f"sigma2_{i + 1}{j + 1}"] = a["sigma2_hyper"][:, i, j]
        return out

    @classmethod
    def from_fixed(cls, coeffs: MeanCoefficients, clusters: List[ClusterParams], weights: MixtureWeights, n_draws: int) -> "PosteriorSamples":
        """Repeat one parameter set n_draws times (a point-mass posterior)."""
        K = len(clusters)
        arrays = {
            "beta": np.repeat(coeffs.beta[None], n_draws, axis=0),
            "mu": np.repeat(coeffs.mu[None], n_draws, axis=0),
            "sigma2_hyper": np.repeat(coeffs.sigma2[None], n_draws, axis=0),
            "phi": np.repeat(np.stack([c.phi for c in clusters])[None], n_draws, axis=0),
            "tau2": np.tile([c.tau2 for c in clusters], (n_draws, 1)),
            "df_tenths": np.tile([c.df_tenths for c in clusters], (n_draws, 1)),
            "sticks": np.tile(weights.sticks, (n_draws, 1)),
            "delta": np.full(n_draws, weights.delta),
            "counts": np.zeros((n_draws, K), dtype=np.int64),
            "sigma2_mean": np.ones(n_draws),
            "log_likelihood": np.zeros(n_draws),
            "log_posterior": np.zeros(n_draws),
        }
        return cls(arrays=arrays, config={}, seed=0)

    def save(self, directory: Union[str, Path], chunk_size: int = SAMPLES_CHUNK_SIZE) -> Path:
        return write_samples_store(
            directory, self.arrays, seed=self.seed, config=self.config,
            chunk_size=chunk_size, timings=self.timings,
        )

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "PosteriorSamples":
        arrays, manifest = read_samples_store(directory)
        return cls(arrays=arrays, config=manifest.config, seed=manifest.seed)


def draw_prior_state(basis: BasisSet, config: MCMCConfig, n_weeks: int, rng: np.random.Generator) -> GibbsState:
    """A complete state drawn from the prior, latent variables included."""
    pr = config.priors
    K, L = config.n_components, basis.n_eofs
    P_T, P_S = basis.n_seasonal, basis.n_spatial

    mu = np.empty((2, 2))
    sigma2_hyper = np.empty((2, 2))
    beta = np.empty((2, 2, P_T, P_S))
    for i in range(2):
        for j in range(2):
            mu[i, j] = rng.normal(0.0, pr.mean_prior_sd[i])
            sigma2_hyper[i, j] = max(pr.coef_var_rate[i] / rng.standard_gamma(pr.coef_var_shape[i]), SAMPLER_VARIANCE_FLOOR)
            beta[i, j] = rng.normal(mu[i, j], np.sqrt(sigma2_hyper[i, j]), size=(P_T, P_S))

    delta_prior = np.diag(basis.eigenvalues)
    phi = np.stack([_inverse_wishart(rng, L + pr.phi_df_offset, delta_prior) for _ in range(K)])
    tau2 = np.maximum(pr.tau2_rate / rng.standard_gamma(pr.tau2_shape, size=K), SAMPLER_VARIANCE_FLOOR)
    if config.fixed_df_tenths is not None:
        df_tenths = np.full(K, config.fixed_df_tenths, dtype=np.int64)
    else:
        df_tenths = rng.choice(DF_GRID_TENTHS, size=K).astype(np.int64)
    delta = max(rng.standard_gamma(pr.delta_shape) / pr.delta_rate, np.finfo(float).tiny)
    sticks = np.append(rng.beta(1.0, delta, size=K - 1), 1.0)

    labels = rng.choice(K, size=n_weeks, p=stick_breaking(sticks))
    df = df_tenths[labels] / 10.0
    sigma2 = np.maximum((df / 2.0 - 1.0) / rng.standard_gamma(df / 2.0), SAMPLER_VARIANCE_FLOOR)
    roots = np.stack([linalg.cholesky(phi[k], lower=True) for k in range(K)])
    z = rng.standard_normal((n_weeks, L))
    W = np.sqrt(sigma2)[:, None] * np.einsum("tlm,tm->tl", roots[labels], z)
    return GibbsState(beta, mu, sigma2_hyper, labels, sigma2, W, phi, tau2, df_tenths, sticks, delta)


def simulate_observations(state: GibbsState, basis: BasisSet, rng: np.random.Generator) -> np.ndarray:
    """N x T data drawn from the data layer given a complete state."""
    design = _design_rows(basis)
    p = 2 * basis.n_seasonal
    c1 = design @ state.beta[:, 0].reshape(p, -1)
    c2 = design @ state.beta[:, 1].reshape(p, -1)
    mean = c1 @ basis.X21.T + c2 @ basis.X22.T
    scale = np.sqrt(state.sigma2 * state.tau2[state.labels])
    noise = scale[:, None] * rng.standard_normal(mean.shape)
    return (mean + state.W @ basis.H.T + noise).T
