"""
The generative model.

Given its cluster label g_t = k, the residual field at week t is

    eps_t = sigma_t (H Z_t + eta_t),  Z_t ~ Normal_L(0, Phi_k),
    eta_t ~ Normal_N(0, tau2_k I),    sigma2_t ~ InvGamma(a_k/2, a_k/2 - 1),

so eps_t is N-variate Student-t with a_k degrees of freedom, dispersion
((a_k - 2)/a_k)(H Phi_k H^T + tau2_k I) and covariance H Phi_k H^T + tau2_k I.
Labels follow truncated stick-breaking weights. Arrays index components and
labels from 0.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, special, stats

from ltpdpm.basis import (
    BasisSet,
    leading_eofs,
    preliminary_fit,
    seasonal_spline_matrix,
    spatial_spline_matrix,
    split_projection,
)
from ltpdpm.config import (
    DENSITY_TAU2_FLOOR,
    DF_TENTHS_MAX,
    DF_TENTHS_MIN,
    WEEKS_PER_YEAR,
    SpatialLayout,
)
from ltpdpm.errors import ShapeError, SingularityError
from ltpdpm.ingest import (
    CovariateSeries,
    GriddedDataset,
    covariate_scaler,
    haversine_km,
    time_to_year_week,
)
from ltpdpm.storage import read_bundle, write_bundle

logger = logging.getLogger(__name__)

QUANTILE_TOL = 1e-10
_BISECTION_MAX_ITER = 200


@dataclass
class MeanCoefficients:
    """Fixed effects of the mean surface and their hyperparameters.

    Attributes:
        beta: 2 x 2 x P_T x P_S; beta[i, j] is the coefficient matrix of
            covariate column i (intercept, slope) and spatial block j
            (in-span, out-of-span). Its row-major flattening is beta_{i;j}.
        mu: 2 x 2 prior means of the coefficient entries
        sigma2: 2 x 2 prior variances of the coefficient entries
    """

    beta: np.ndarray
    mu: np.ndarray = None
    sigma2: np.ndarray = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.ndim != 4 or self.beta.shape[:2] != (2, 2):
            raise ShapeError(f"beta must have shape (2, 2, P_T, P_S), got {self.beta.shape}")
        self.mu = np.zeros((2, 2)) if self.mu is None else np.asarray(self.mu, dtype=np.float64)
        self.sigma2 = np.ones((2, 2)) if self.sigma2 is None else np.asarray(self.sigma2, dtype=np.float64)
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma2))):
            raise ValueError("mean coefficients must be finite")
        if np.any(self.sigma2 <= 0):
            raise ValueError("coefficient prior variances must be positive")

    @classmethod
    def zeros(cls, n_seasonal: int, n_spatial: int) -> "MeanCoefficients":
        return cls(np.zeros((2, 2, n_seasonal, n_spatial)))

    @classmethod
    def from_preliminary(cls, coefficients: np.ndarray) -> "MeanCoefficients":
        """Both spatial blocks start from the unsplit least-squares coefficients."""
        beta = np.stack([coefficients, coefficients], axis=1)
        mu = beta.mean(axis=(2, 3))
        sigma2 = np.maximum(beta.var(axis=(2, 3)), 1e-6)
        return cls(beta, mu, sigma2)


@dataclass
class ClusterParams:
    """Parameters of one low-rank t component.

    Attributes:
        phi: L x L dispersion of the EOF coefficients
        tau2: Nugget variance
        df_tenths: Degrees of freedom times ten, on the grid 21..400
    """

    phi: np.ndarray
    tau2: float
    df_tenths: int

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=np.float64))
        if self.phi.shape[0] != self.phi.shape[1]:
            raise ShapeError(f"phi must be square, got {self.phi.shape}")
        if not np.allclose(self.phi, self.phi.T, rtol=1e-10, atol=1e-12):
            raise ValueError("phi must be symmetric")
        if not self.tau2 >= 0:
            raise ValueError(f"tau2 must be non-negative, got {self.tau2}")
        if int(self.df_tenths) != self.df_tenths or not DF_TENTHS_MIN <= self.df_tenths <= DF_TENTHS_MAX:
            raise ValueError(f"df_tenths must be an integer in [{DF_TENTHS_MIN}, {DF_TENTHS_MAX}], got {self.df_tenths}")
        self.df_tenths = int(self.df_tenths)
        self.tau2 = float(self.tau2)

    @property
    def df(self) -> float:
        return self.df_tenths / 10.0


@dataclass
class MixtureWeights:
    """Stick-breaking weights: sticks V (V_K = 1) and concentration delta."""

    sticks: np.ndarray
    delta: float = 1.0

    def __post_init__(self):
        self.sticks = np.asarray(self.sticks, dtype=np.float64)
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        # validates the sticks
        stick_breaking(self.sticks)

    @property
    def pi(self) -> np.ndarray:
        return stick_breaking(self.sticks)

    @property
    def n_components(self) -> int:
        return len(self.sticks)

    @classmethod
    def from_pi(cls, pi: Sequence[float], delta: float = 1.0) -> "MixtureWeights":
        return cls(sticks_from_weights(pi), delta)


@dataclass
class LatentState:
    """Per-week latent variables: labels (0-based), scales sigma2 and W = sigma Z."""

    labels: np.ndarray
    sigma2: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        if not (len(self.labels) == len(self.sigma2) == len(self.W)):
            raise ShapeError("labels, sigma2 and W must have one entry per week")
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 must be positive")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative component indices")


def stick_breaking(sticks: Sequence[float]) -> np.ndarray:
    """
    Mixture weights pi_k = V_k prod_{i<k} (1 - V_i).

    The last weight is the residual 1 - sum of the others, so the weights sum
    to one up to a single rounding.

    Raises:
        ValueError: If any stick is outside [0, 1] or V_K != 1
    """
    sticks = np.asarray(sticks, dtype=np.float64)
    if sticks.ndim != 1 or len(sticks) == 0:
        raise ValueError("sticks must be a non-empty vector")
    if np.any(sticks < 0) or np.any(sticks > 1):
        raise ValueError("sticks must lie in [0, 1]")
    if sticks[-1] != 1.0:
        raise ValueError(f"the last stick must equal 1, got {sticks[-1]}")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - sticks[:-1])])
    pi = sticks * remaining
    if len(pi) > 1:
        pi[-1] = max(0.0, 1.0 - math.fsum(pi[:-1]))
    return pi


def sticks_from_weights(pi: Sequence[float]) -> np.ndarray:
    """Invert stick_breaking: V_k = pi_k / (1 - sum_{i<k} pi_i), V_K = 1."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi < 0) or not math.isclose(math.fsum(pi), 1.0, abs_tol=1e-12):
        raise ValueError("weights must be non-negative and sum to 1")
    used = np.concatenate([[0.0], np.cumsum(pi[:-1])])
    remaining = 1.0 - used
    with np.errstate(divide="ignore", invalid="ignore"):
        sticks = np.where(remaining > 0, pi / remaining, 1.0)
    sticks = np.clip(sticks, 0.0, 1.0)
    sticks[-1] = 1.0
    return sticks


def mean_surfaces(beta: np.ndarray, X21: np.ndarray, X22: np.ndarray, x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """
    mu = sum_ij x0_i X2j (B_ij^T x1) for one or many coefficient draws.

    Args:
        beta: (..., 2, 2, P_T, P_S)
        x0: (..., 2) covariate row(s), broadcast against beta's leading axes
        x1: (P_T,) seasonal row

    Returns:
        (..., N)
    """
    seasonal = np.einsum("...ijpq,p->...ijq", beta, x1)
    weighted = np.einsum("...i,...ijq->...jq", x0, seasonal)
    return weighted[..., 0, :] @ X21.T + weighted[..., 1, :] @ X22.T


def mean_surface(coeffs: MeanCoefficients, basis: BasisSet, t: int, covariate: Optional[CovariateSeries] = None) -> np.ndarray:
    """
    Mean field at week index t, evaluated through the factored blocks.

    Weeks past the fit window use the covariate's projection years.

    Raises:
        CoverageError: If the covariate does not reach year t1 of t
    """
    t1, t2 = time_to_year_week(t, basis.weeks_per_year)
    x0 = basis.covariate_row(t1, covariate)
    return mean_surfaces(coeffs.beta, basis.X21, basis.X22, x0, basis.X1[t2 - 1])


def mean_field(beta: np.ndarray, basis: BasisSet) -> np.ndarray:
    """N x T mean over the historic window."""
    blocks = (basis.X21, basis.X22)
    cube = sum(
        np.einsum("a,bp,nq,pq->nab", basis.X0[:, i], basis.X1, blocks[j], beta[i, j], optimize=True)
        for i in range(2) for j in range(2)
    )
    return cube.reshape(basis.n_sites, -1)


def _check_dispersion(phi: np.ndarray, tau2: float) -> np.ndarray:
    """Cholesky factor of tau2 I + Phi, refusing an indefinite Phi."""
    eigenvalues = np.linalg.eigvalsh(phi)
    if eigenvalues[0] < -1e-10 * max(1.0, abs(eigenvalues[-1])):
        raise SingularityError("Phi", f"smallest eigenvalue {eigenvalues[0]:.3g}")
    try:
        return linalg.cholesky(phi + tau2 * np.eye(len(phi)), lower=True)
    except linalg.LinAlgError as e:
        raise SingularityError("Phi + tau2 I", str(e))


def lowrank_t_logdensity(eps: np.ndarray, theta: ClusterParams, H: np.ndarray) -> Union[float, np.ndarray]:
    """
    Log-density of the N-variate low-rank Student-t law in O(N L^2).

    With w = H^T eps, M = Phi + tau2 I_L and H^T H = I:
        eps^T (tau2 I + H Phi H^T)^(-1) eps = |eps - H w|^2 / tau2 + w^T M^(-1) w
        log det(tau2 I + H Phi H^T) = (N - L) log tau2 + log det M

    Args:
        eps: length-N residual, or a T x N stack of residuals
        theta: Component parameters
        H: N x L orthonormal basis

    Returns:
        Scalar log-density, or one per row of eps

    Raises:
        SingularityError: If Phi is not positive semi-definite
    """
    eps = np.asarray(eps, dtype=np.float64)
    n_sites, n_eofs = H.shape
    if eps.shape[-1] != n_sites:
        raise ShapeError(f"eps has {eps.shape[-1]} sites, H has {n_sites}")
    if theta.phi.shape != (n_eofs, n_eofs):
        raise ShapeError(f"phi is {theta.phi.shape}, H has {n_eofs} columns")

    tau2 = max(theta.tau2, DENSITY_TAU2_FLOOR)
    a = theta.df
    chol = _check_dispersion(theta.phi, tau2)

    w = eps @ H
    outside = np.sum(eps ** 2, axis=-1) - np.sum(w ** 2, axis=-1)
    whitened = linalg.solve_triangular(chol, np.atleast_2d(w).T, lower=True)
    quad = np.maximum(outside, 0.0) / tau2 + np.sum(whitened ** 2, axis=0)
    if eps.ndim == 1:
        quad = quad[0]

    log_det = (n_sites - n_eofs) * math.log(tau2) + 2.0 * np.sum(np.log(np.diag(chol)))
    log_norm = (
        special.gammaln((a + n_sites) / 2.0) - special.gammaln(a / 2.0)
        - 0.5 * n_sites * math.log((a - 2.0) * math.pi) - 0.5 * log_det
    )
    return log_norm - 0.5 * (a + n_sites) * np.log1p(quad / (a - 2.0))


def dpm_logdensity(eps: np.ndarray, clusters: Sequence[ClusterParams], pi: Sequence[float], H: np.ndarray):
    """log sum_k pi_k f_t(eps; theta_k), stabilized with log-sum-exp."""
    pi = np.asarray(pi, dtype=np.float64)
    if len(pi) != len(clusters):
        raise ShapeError(f"{len(pi)} weights for {len(clusters)} components")
    components = np.array([lowrank_t_logdensity(eps, theta, H) for theta in clusters])
    weights = pi.reshape((-1,) + (1,) * (components.ndim - 1))
    return special.logsumexp(components, axis=0, b=np.broadcast_to(weights, components.shape))


def marginal_scales(H: np.ndarray, clusters: Sequence[ClusterParams]) -> np.ndarray:
    """K x N scales of the site marginals: ((a-2)/a (h_n Phi h_n^T + tau2))^(1/2)."""
    rows = []
    for theta in clusters:
        variance = np.einsum("nl,lm,nm->n", H, theta.phi, H) + theta.tau2
        rows.append(np.sqrt((theta.df - 2.0) / theta.df * variance))
    return np.array(rows)


def mixture_cdf(x, weights, scales, dfs):
    """CDF of a mixture of centered t laws; component axis last, broadcast over the rest."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    return np.sum(weights * stats.t.cdf(x / scales, dfs), axis=-1)


def mixture_quantile(p, weights, scales, dfs, tol: float = QUANTILE_TOL) -> np.ndarray:
    """
    Vectorized bisection for quantiles of t mixtures.

    The mixture quantile lies between the smallest and largest component
    quantiles, which bracket every root.

    Args:
        p: Probability level(s) in (0, 1), broadcast with the leading axes
        weights, scales, dfs: (..., K) arrays of the mixtures

    Raises:
        ValueError: If any p is outside (0, 1)
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError(f"probability levels must lie in (0, 1), got {p}")
    weights, scales, dfs = np.broadcast_arrays(
        np.asarray(weights, dtype=np.float64),
        np.asarray(scales, dtype=np.float64),
        np.asarray(dfs, dtype=np.float64),
    )
    component_q = scales * stats.t.ppf(p[..., None], dfs)
    active = weights > 0
    lo = np.min(np.where(active, component_q, np.inf), axis=-1)
    hi = np.max(np.where(active, component_q, -np.inf), axis=-1)
    lo, hi, p = np.broadcast_arrays(lo, hi, p)
    lo, hi = lo.copy(), hi.copy()

    for _ in range(_BISECTION_MAX_ITER):
        width = hi - lo
        if np.all(width <= tol * np.maximum(1.0, np.abs(hi))):
            break
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mid, weights, scales, dfs) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _site_mixture(site: int, clusters: Sequence[ClusterParams], pi: Sequence[float], H: np.ndarray):
    if not 0 <= site < H.shape[0]:
        raise ValueError(f"site index {site} outside [0, {H.shape[0]})")
    scales = marginal_scales(H[site:site + 1], clusters)[:, 0]
    dfs = np.array([theta.df for theta in clusters])
    return np.asarray(pi, dtype=np.float64), scales, dfs


def marginal_mixture_cdf(site: int, x, clusters: Sequence[ClusterParams], pi: Sequence[float], H: np.ndarray):
    """P(eps_n <= x) under the K-component mixture of univariate t laws."""
    weights, scales, dfs = _site_mixture(site, clusters, pi, H)
    return mixture_cdf(x, weights, scales, dfs)


def marginal_mixture_quantile(site: int, p, clusters: Sequence[ClusterParams], pi: Sequence[float], H: np.ndarray):
    """Inverse of marginal_mixture_cdf at level p in (0, 1)."""
    weights, scales, dfs = _site_mixture(site, clusters, pi, H)
    return mixture_quantile(p, weights, scales, dfs)


def chi_coefficient(n1: int, n2: int, clusters: Sequence[ClusterParams], pi: Sequence[float], H: np.ndarray) -> float:
    """
    Tail dependence coefficient between two sites.

    Only the heaviest-tailed component with positive weight matters (lowest
    index on ties): chi = 2 * tbar_{a+1}(sqrt((a + 1)(1 - r) / (1 + r))).
    """
    if n1 == n2:
        raise ValueError("chi needs two distinct sites")
    pi = np.asarray(pi, dtype=np.float64)
    dfs = np.array([theta.df_tenths if w > 0 else np.iinfo(np.int64).max for theta, w in zip(clusters, pi)])
    theta = clusters[int(np.argmin(dfs))]
    h1, h2 = H[n1], H[n2]
    cross = h1 @ theta.phi @ h2
    var1 = h1 @ theta.phi @ h1 + theta.tau2
    var2 = h2 @ theta.phi @ h2 + theta.tau2
    r = float(np.clip(cross / math.sqrt(var1 * var2), -1.0, 1.0))
    a = theta.df
    if r <= -1.0:
        return 0.0
    arg = math.sqrt(max(0.0, (a + 1.0) * (1.0 - r) / (1.0 + r)))
    return float(2.0 * stats.t.sf(arg, a + 1.0))


def model_covariance(n1: int, n2: int, clusters: Sequence[ClusterParams], pi: Sequence[float], H: np.ndarray) -> float:
    """Marginal covariance sum_k pi_k (h_n1 Phi_k h_n2^T + tau2_k 1{n1 = n2})."""
    total = 0.0
    for theta, weight in zip(clusters, pi):
        total += weight * (H[n1] @ theta.phi @ H[n2] + (theta.tau2 if n1 == n2 else 0.0))
    return float(total)


def model_covariance_matrix(clusters: Sequence[ClusterParams], pi: Sequence[float], H: np.ndarray) -> np.ndarray:
    """Full N x N version of model_covariance."""
    total = np.zeros((H.shape[0], H.shape[0]))
    for theta, weight in zip(clusters, pi):
        total += weight * (H @ theta.phi @ H.T + theta.tau2 * np.eye(H.shape[0]))
    return total


def empirical_chi(x: np.ndarray, y: np.ndarray, u) -> np.ndarray:
    """
    Empirical conditional exceedance chi_u = P(X > q_x(u), Y > q_y(u)) / (1 - u).

    Args:
        x, y: Paired samples
        u: Quantile level(s) in (0, 1)
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"paired samples differ in shape: {x.shape} vs {y.shape}")
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("quantile levels must lie in (0, 1)")
    qx = np.quantile(x, u)
    qy = np.quantile(y, u)
    joint = np.mean((x[:, None] > qx) & (y[:, None] > qy), axis=0)
    return joint / (1.0 - u)


def psd_root(matrix: np.ndarray) -> np.ndarray:
    """A factor R with R R^T = matrix for positive semi-definite input."""
    values, vectors = np.linalg.eigh(matrix)
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def draw_inverse_gamma(rng: np.random.Generator, shape, scale) -> np.ndarray:
    """InvGamma(shape, scale) draws via the reciprocal of a unit-scale gamma."""
    return np.asarray(scale) / rng.gamma(shape)


def generate_synthetic(
    coeffs: MeanCoefficients,
    clusters: Sequence[ClusterParams],
    weights: MixtureWeights,
    basis: BasisSet,
    n_weeks: int,
    seed: int,
) -> Tuple[GriddedDataset, LatentState]:
    """
    Simulate Y_t = mu_t + sigma_t (H Z_t + eta_t) for t = 1..n_weeks.

    Weeks past the fit window draw their mean from the covariate's projection
    years. Deterministic given seed.
    """
    if n_weeks % basis.weeks_per_year != 0:
        raise ShapeError(f"n_weeks = {n_weeks} is not a multiple of {basis.weeks_per_year}")
    if len(clusters) != weights.n_components:
        raise ShapeError(f"{len(clusters)} components but {weights.n_components} weights")
    rng = np.random.default_rng(seed)
    n_sites, n_eofs = basis.H.shape

    labels = rng.choice(len(clusters), size=n_weeks, p=weights.pi)
    dfs = np.array([clusters[k].df for k in labels])
    sigma2 = draw_inverse_gamma(rng, dfs / 2.0, dfs / 2.0 - 1.0)
    Z = rng.standard_normal((n_weeks, n_eofs))
    eta = rng.standard_normal((n_weeks, n_sites))

    roots = [psd_root(theta.phi) for theta in clusters]
    Z = np.stack([roots[k] @ z for k, z in zip(labels, Z)])
    tau = np.sqrt([clusters[k].tau2 for k in labels])
    sigma = np.sqrt(sigma2)

    mean = np.stack([mean_surface(coeffs, basis, t) for t in range(1, n_weeks + 1)], axis=1)
    residual = sigma[:, None] * (Z @ basis.H.T + tau[:, None] * eta)
    dataset = GriddedDataset(mean + residual.T, basis.coords.copy(), weeks_per_year=basis.weeks_per_year)
    latent = LatentState(labels=labels, sigma2=sigma2, W=sigma[:, None] * Z)
    logger.info(f"Simulated N={n_sites}, T={n_weeks} from {len(clusters)} components")
    return dataset, latent


@dataclass
class SyntheticTruth:
    """Known parameters used to simulate a dataset."""

    basis: BasisSet
    coeffs: MeanCoefficients
    clusters: List[ClusterParams]
    weights: MixtureWeights

    def save(self, path: Union[str, Path], latent: Optional[LatentState] = None) -> Path:
        return save_parameters(path, self.coeffs, self.clusters, self.weights, latent)


def make_synthetic_truth(
    n_lon: int = 5,
    n_lat: int = 4,
    n_years: int = 2,
    n_future_years: int = 0,
    n_eofs: int = 3,
    range_km: float = 300.0,
    df_tenths: Sequence[int] = (30, 100, 400),
    tau2: Sequence[float] = (0.05, 0.1, 0.2),
    phi_scale: Sequence[float] = (1.0, 0.5, 0.25),
    pi: Sequence[float] = (0.3, 0.3, 0.4),
    layout: Optional[SpatialLayout] = None,
    n_seasonal: int = 6,
    seed: int = 0,
    first_year: int = 1,
) -> SyntheticTruth:
    """
    Build a known truth on a regular lon/lat grid.

    The EOFs come from an exponential covariance in great-circle distance, the
    mean coefficients from a least-squares fit of a smooth seasonal,
    latitudinal and covariate-trend field, and component k has
    Phi_k = phi_scale[k] * diag(eigenvalues).
    """
    if not len(df_tenths) == len(tau2) == len(phi_scale) == len(pi):
        raise ValueError("df_tenths, tau2, phi_scale and pi must have one entry per component")
    if n_lon < 4 or n_lat < 4:
        raise ValueError(f"the grid needs at least 4 points per axis, got {n_lon} x {n_lat}")
    rng = np.random.default_rng(seed)

    lon, lat = np.meshgrid(np.linspace(33.0, 43.0, n_lon), np.linspace(13.0, 28.0, n_lat))
    coords = np.column_stack([lon.ravel(), lat.ravel()])
    n_sites = len(coords)
    layout = layout or SpatialLayout(n_long=4 + (n_lon - 4) // 2, n_lat=4 + (n_lat - 4) // 2, prune_mass=1.0)

    total_years = n_years + n_future_years
    steps = np.arange(1, total_years + 1)
    covariate = CovariateSeries(
        27.0 + 0.03 * steps + 0.1 * rng.standard_normal(total_years), np.arange(first_year, first_year + total_years)
    )
    scaler = covariate_scaler(covariate, n_years)
    X0 = scaler.row(covariate.values[:n_years])
    X1 = seasonal_spline_matrix(WEEKS_PER_YEAR, n_seasonal)
    X2, kept = spatial_spline_matrix(coords, layout, return_columns=True)

    distances = haversine_km(coords[:, None, 0], coords[:, None, 1], coords[None, :, 0], coords[None, :, 1])
    spatial = leading_eofs(np.exp(-distances / range_km), n_eofs=n_eofs)
    X21, X22 = split_projection(X2, spatial.H)

    weeks = np.arange(1, WEEKS_PER_YEAR + 1)
    seasonal = 2.0 * np.cos(2.0 * np.pi * (weeks - 34) / WEEKS_PER_YEAR)
    latitudinal = 0.1 * (coords[:, 1] - coords[:, 1].mean())
    trend = 0.5 * X0[:, 1] / np.max(np.abs(X0[:, 1]))
    surface = (
        28.0 + latitudinal[:, None, None] + trend[None, :, None] + seasonal[None, None, :]
    ).reshape(n_sites, -1)
    fit = preliminary_fit(GriddedDataset(surface, coords), X0, X1, X2)

    basis = BasisSet(
        X0=X0, X1=X1, X2=X2, X21=X21, X22=X22, H=spatial.H, eigenvalues=spatial.eigenvalues,
        coords=coords, scaler=scaler, covariate=covariate, spline_columns=kept, eof_rule=spatial.rule,
    )
    clusters = [
        ClusterParams(scale * np.diag(spatial.eigenvalues), nugget, df)
        for df, nugget, scale in zip(df_tenths, tau2, phi_scale)
    ]
    return SyntheticTruth(basis, MeanCoefficients.from_preliminary(fit.coefficients), clusters, MixtureWeights.from_pi(pi))


def save_parameters(
    path: Union[str, Path],
    coeffs: MeanCoefficients,
    clusters: Sequence[ClusterParams],
    weights: MixtureWeights,
    latent: Optional[LatentState] = None,
) -> Path:
    """Write one parameter set (and optionally its latent state) as a bundle."""
    arrays = {
        "beta": coeffs.beta, "mu": coeffs.mu, "sigma2_hyper": coeffs.sigma2,
        "phi": np.stack([theta.phi for theta in clusters]),
        "tau2": np.array([theta.tau2 for theta in clusters]),
        "df_tenths": np.array([theta.df_tenths for theta in clusters]),
        "sticks": weights.sticks, "delta": np.array([weights.delta]),
    }
    if latent is not None:
        arrays.update({"labels": latent.labels, "sigma2": latent.sigma2, "W": latent.W})
    return write_bundle(path, arrays, {"kind": "parameters", "n_components": len(clusters)})


def load_parameters(path: Union[str, Path]):
    """
    Read a bundle written by save_parameters.

    Returns:
        (MeanCoefficients, [ClusterParams], MixtureWeights, LatentState or None)
    """
    arrays, metadata = read_bundle(path)
    if metadata.get("kind") != "parameters":
        raise ShapeError(f"{path} is not a parameter bundle (kind={metadata.get('kind')!r})")
    coeffs = MeanCoefficients(arrays["beta"], arrays["mu"], arrays["sigma2_hyper"])
    clusters = [
        ClusterParams(phi, float(tau2), int(round(df)))
        for phi, tau2, df in zip(arrays["phi"], arrays["tau2"], arrays["df_tenths"])
    ]
    weights = MixtureWeights(arrays["sticks"], float(arrays["delta"][0]))
    latent = None
    if "labels" in arrays:
        latent = LatentState(arrays["labels"].astype(np.int64), arrays["sigma2"], arrays["W"])
    return coeffs, clusters, weights, latent
