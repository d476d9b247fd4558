"""
Design matrices of the mean and residual models.

X0 (T1 x 2) carries the standardized covariate, X1 (T2 x P_T) the seasonal
cubic B-splines and X2 (N x P_S) the pruned tensor-product spatial splines.
The residual basis H (N x L) holds the leading EOFs of the preliminary
least-squares residual covariance, and X2 is split into its projection onto
span(H) and the orthogonal remainder.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline
from scipy.sparse.linalg import eigsh

from ltpdpm.config import SPLINE_DEGREE, WEEKS_PER_YEAR, BasisConfig, SpatialLayout
from ltpdpm.errors import CoverageError, DegeneracyError, ShapeError, SingularityError
from ltpdpm.ingest import CovariateScaler, CovariateSeries, GriddedDataset, covariate_scaler
from ltpdpm.storage import read_bundle, write_bundle

logger = logging.getLogger(__name__)

# Above this size only the leading eigenpairs are computed iteratively
DENSE_EIGEN_MAX_N = 500
GRAM_CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class BSplineBasis:
    """Clamped cubic B-spline basis with equidistant interior knots on [lo, hi]."""

    n_basis: int
    lo: float
    hi: float
    degree: int = SPLINE_DEGREE

    def __post_init__(self):
        if self.n_basis < self.degree + 1:
            raise ValueError(f"a degree-{self.degree} basis needs at least {self.degree + 1} functions, got {self.n_basis}")
        if not self.lo < self.hi:
            raise ValueError(f"domain must satisfy lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def knots(self) -> np.ndarray:
        breaks = np.linspace(self.lo, self.hi, self.n_basis - self.degree + 1)
        return np.concatenate([np.repeat(self.lo, self.degree), breaks, np.repeat(self.hi, self.degree)])

    def design(self, x) -> np.ndarray:
        """Dense len(x) x n_basis matrix of basis values."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if np.any(x < self.lo) or np.any(x > self.hi):
            raise ValueError(f"evaluation points must lie in [{self.lo}, {self.hi}]")
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()


def seasonal_spline_matrix(n_weeks: int = WEEKS_PER_YEAR, n_basis: int = 12) -> np.ndarray:
    """
    X1: cubic B-splines over [1, T2] evaluated at t2 = 1..T2.

    Raises:
        ValueError: If n_basis < 4 or n_weeks < n_basis
    """
    if n_basis < SPLINE_DEGREE + 1:
        raise ValueError(f"cubic splines need P_T >= {SPLINE_DEGREE + 1}, got {n_basis}")
    if n_weeks < n_basis:
        raise ValueError(f"T2 = {n_weeks} is smaller than P_T = {n_basis}")
    basis = BSplineBasis(n_basis, 1.0, float(n_weeks))
    return basis.design(np.arange(1, n_weeks + 1, dtype=np.float64))


def rotate_coords(coords: np.ndarray, rotation_deg: float) -> np.ndarray:
    """(lon, lat) pairs expressed in axes turned counter-clockwise by rotation_deg."""
    theta = np.radians(rotation_deg)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return np.asarray(coords, dtype=np.float64) @ rotation


def spatial_tensor_matrix(coords: np.ndarray, layout: SpatialLayout) -> np.ndarray:
    """Unpruned N x (n_long * n_lat) tensor-product basis; column index a * n_lat + b."""
    rotated = rotate_coords(coords, layout.rotation_deg)
    if layout.bounds is not None:
        u_min, u_max, v_min, v_max = layout.bounds
    else:
        u_min, v_min = rotated.min(axis=0)
        u_max, v_max = rotated.max(axis=0)
    if u_min == u_max or v_min == v_max:
        raise DegeneracyError("all sites are collinear along one spline axis; the spatial domain has zero width")

    long_basis = BSplineBasis(layout.n_long, float(u_min), float(u_max)).design(rotated[:, 0])
    lat_basis = BSplineBasis(layout.n_lat, float(v_min), float(v_max)).design(rotated[:, 1])
    return (long_basis[:, :, None] * lat_basis[:, None, :]).reshape(len(rotated), -1)


def prune_columns(matrix: np.ndarray, prune_mass: float) -> np.ndarray:
    """
    Indices (ascending) of the heaviest columns carrying at least prune_mass of
    the total column-sum weight.
    """
    weights = matrix.sum(axis=0)
    if prune_mass >= 1.0:
        return np.arange(matrix.shape[1])
    order = np.argsort(-weights, kind="stable")
    cumulative = np.cumsum(weights[order])
    n_keep = int(np.searchsorted(cumulative, prune_mass * cumulative[-1], side="left")) + 1
    n_keep = min(n_keep, len(order))
    return np.sort(order[:n_keep])


def spatial_spline_matrix(
    coords: np.ndarray,
    layout: Optional[SpatialLayout] = None,
    return_columns: bool = False,
) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """
    X2: pruned tensor-product cubic B-splines at the site coordinates.

    Args:
        coords: N x 2 (lon, lat)
        layout: Spline counts, pruning mass, rotation and optional bounds
        return_columns: Also return the retained column indices of the full tensor basis

    Raises:
        DegeneracyError: If the sites span zero width along a rotated axis
    """
    layout = layout or SpatialLayout()
    full = spatial_tensor_matrix(coords, layout)
    kept = prune_columns(full, layout.prune_mass)
    logger.debug(f"Spatial pruning kept {len(kept)} of {full.shape[1]} columns at mass {layout.prune_mass}")
    if return_columns:
        return full[:, kept], kept
    return full[:, kept]


def _gram_inverse(matrix: np.ndarray, name: str) -> np.ndarray:
    """(X^T X)^(-1) X^T, refusing rank-deficient designs."""
    gram = matrix.T @ matrix
    if np.linalg.cond(gram) > GRAM_CONDITION_LIMIT:
        raise SingularityError(name, f"condition number exceeds {GRAM_CONDITION_LIMIT:g}")
    try:
        factor = linalg.cho_factor(gram)
    except linalg.LinAlgError as e:
        raise SingularityError(name, str(e))
    return linalg.cho_solve(factor, matrix.T)


@dataclass
class PreliminaryFit:
    """Ordinary least-squares fit of the unsplit Kronecker mean model.

    Attributes:
        coefficients: 2 x P_T x P_S coefficient matrices of the intercept and slope blocks
        fitted: N x T fitted mean
    """

    coefficients: np.ndarray
    fitted: np.ndarray


def preliminary_fit(data: GriddedDataset, X0: np.ndarray, X1: np.ndarray, X2: np.ndarray) -> PreliminaryFit:
    """
    Least squares on Y = (X0 kron X1 kron X2) beta, solved factor by factor.

    The pseudo-inverse of a Kronecker product is the Kronecker product of the
    factor pseudo-inverses, so only the small Gram matrices are inverted.

    Raises:
        ShapeError: If a design matrix does not match the data layout
        SingularityError: If the X1 or X2 Gram matrix is rank deficient
    """
    n_sites, n_years, n_weeks = data.n_sites, data.n_years, data.weeks_per_year
    if X0.shape != (n_years, 2):
        raise ShapeError(f"X0 must be {n_years} x 2, got {X0.shape}")
    if X1.shape[0] != n_weeks:
        raise ShapeError(f"X1 must have {n_weeks} rows, got {X1.shape[0]}")
    if X2.shape[0] != n_sites:
        raise ShapeError(f"X2 must have {n_sites} rows, got {X2.shape[0]}")

    X0_pinv = _gram_inverse(X0, "X0^T X0")
    X1_pinv = _gram_inverse(X1, "X1^T X1")
    X2_pinv = _gram_inverse(X2, "X2^T X2")

    cube = data.as_cube()
    coefficients = np.einsum("ia,pb,qn,nab->ipq", X0_pinv, X1_pinv, X2_pinv, cube, optimize=True)
    fitted = np.einsum("ai,bp,nq,ipq->nab", X0, X1, X2, coefficients, optimize=True)
    logger.info(f"Preliminary least-squares fit: {coefficients.size} coefficients")
    return PreliminaryFit(coefficients=coefficients, fitted=fitted.reshape(n_sites, -1))


def preliminary_residuals(data: GriddedDataset, X0: np.ndarray, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Y minus the least-squares mean, N x T."""
    return data.values - preliminary_fit(data, X0, X1, X2).fitted


def sitewise_trend(data: GriddedDataset) -> np.ndarray:
    """Per-site least-squares linear trend in units per decade."""
    years = np.arange(1, data.n_weeks + 1) / data.weeks_per_year
    centered = years - years.mean()
    slopes = (data.values - data.values.mean(axis=1, keepdims=True)) @ centered / np.sum(centered ** 2)
    return 10.0 * slopes


def sample_covariance(residuals: np.ndarray) -> np.ndarray:
    """Unbiased N x N covariance across the T columns."""
    residuals = np.atleast_2d(np.asarray(residuals, dtype=np.float64))
    if residuals.shape[1] < 2:
        raise ValueError(f"need at least 2 time points for a covariance, got {residuals.shape[1]}")
    centered = residuals - residuals.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / (residuals.shape[1] - 1)
    return (cov + cov.T) / 2.0


@dataclass
class SpatialBasis:
    """Leading EOFs H (N x L, orthonormal columns) and their eigenvalues."""

    H: np.ndarray
    eigenvalues: np.ndarray
    rule: str = "explicit"

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        if self.H.ndim != 2 or self.H.shape[1] != len(self.eigenvalues):
            raise ShapeError(f"H is {self.H.shape} but there are {len(self.eigenvalues)} eigenvalues")
        if np.any(self.eigenvalues <= 0):
            raise DegeneracyError("EOF eigenvalues must be strictly positive")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("EOF eigenvalues must be non-increasing")

    @property
    def n_eofs(self) -> int:
        return self.H.shape[1]


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so each largest-magnitude entry (lowest index on ties) is positive."""
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _top_eigenpairs(cov: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    n = cov.shape[0]
    if n <= DENSE_EIGEN_MAX_N or k >= n - 1:
        values, vectors = linalg.eigh(cov)
    else:
        values, vectors = eigsh(cov, k=k, which="LA", v0=np.ones(n))
    order = np.argsort(-values, kind="stable")
    return values[order], vectors[:, order]


def leading_eofs(cov: np.ndarray, n_eofs: Optional[int] = None, threshold: Optional[float] = None) -> SpatialBasis:
    """
    Top eigenpairs of a covariance matrix.

    Exactly one rule applies: an explicit count n_eofs, or the threshold q with
    L = max{l : lambda_l >= q * lambda_1}.

    Raises:
        DegeneracyError: If no eigenvalue is positive
        ValueError: If both or neither rule is given
    """
    if (n_eofs is None) == (threshold is None):
        raise ValueError("Specify exactly one of n_eofs and threshold")
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"covariance must be square, got {cov.shape}")
    n = cov.shape[0]

    if n_eofs is not None:
        if not 1 <= n_eofs <= n:
            raise ValueError(f"n_eofs must be in [1, {n}], got {n_eofs}")
        values, vectors = _top_eigenpairs(cov, n_eofs)
    else:
        k = min(n, 20)
        values, vectors = _top_eigenpairs(cov, k)
        # Grow the iterative window until the threshold falls inside it
        while len(values) < n and values[-1] >= threshold * values[0]:
            k = min(n, 2 * k)
            values, vectors = _top_eigenpairs(cov, k)

    if values[0] <= 0:
        raise DegeneracyError("covariance has no positive eigenvalue; residuals carry no variation")

    if n_eofs is None:
        n_eofs = int(np.sum(values >= threshold * values[0]))
        rule = f"threshold:{threshold}"
    else:
        rule = "explicit"
    n_positive = int(np.sum(values[:n_eofs] > 0))
    if n_positive < n_eofs:
        raise DegeneracyError(f"only {n_positive} positive eigenvalues, {n_eofs} EOFs requested")

    H = _fix_signs(vectors[:, :n_eofs])
    logger.info(f"Selected L={n_eofs} EOFs ({rule}), leading eigenvalue {values[0]:.4g}")
    return SpatialBasis(H=H, eigenvalues=values[:n_eofs].copy(), rule=rule)


def split_projection(X2: np.ndarray, H: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split X2 into H H^T X2 and the remainder, without forming H H^T.

    Raises:
        ValueError: If X2 and H have different row counts
    """
    X2 = np.asarray(X2, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if X2.ndim != 2 or H.ndim != 2 or X2.shape[0] != H.shape[0]:
        raise ValueError(f"X2 {X2.shape} and H {H.shape} must share the number of rows")
    in_span = H @ (H.T @ X2)
    return in_span, X2 - in_span


@dataclass
class BasisSet:
    """All design matrices of a fit, plus what is needed to extend X0 in time.

    Attributes:
        X0: T1 x 2 orthonormal covariate matrix
        X1: T2 x P_T seasonal splines
        X2: N x P_S spatial splines
        X21: Projection of X2 onto span(H)
        X22: X2 - X21
        H: N x L EOFs
        eigenvalues: Delta, length L
        coords: N x 2 site coordinates
        scaler: Historic covariate standardization
        covariate: Full covariate series, historic years first
        spline_columns: Retained indices of the full spatial tensor basis
    """

    X0: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    X21: np.ndarray
    X22: np.ndarray
    H: np.ndarray
    eigenvalues: np.ndarray
    coords: np.ndarray
    scaler: CovariateScaler
    covariate: CovariateSeries
    spline_columns: np.ndarray = field(default=None)
    eof_rule: str = "explicit"

    @property
    def n_sites(self) -> int:
        return self.X2.shape[0]

    @property
    def n_years(self) -> int:
        return self.X0.shape[0]

    @property
    def weeks_per_year(self) -> int:
        return self.X1.shape[0]

    @property
    def n_seasonal(self) -> int:
        return self.X1.shape[1]

    @property
    def n_spatial(self) -> int:
        return self.X2.shape[1]

    @property
    def n_eofs(self) -> int:
        return self.H.shape[1]

    @property
    def spatial(self) -> SpatialBasis:
        return SpatialBasis(self.H, self.eigenvalues, self.eof_rule)

    def covariate_row(self, t1: int, covariate: Optional[CovariateSeries] = None) -> np.ndarray:
        """X0 row for year index t1, historic or projected."""
        covariate = covariate or self.covariate
        if 1 <= t1 <= self.n_years and covariate is self.covariate:
            return self.X0[t1 - 1]
        return self.scaler.row(covariate.value_at(t1))

    def save(self, path: Union[str, Path]) -> Path:
        arrays = {
            "X0": self.X0, "X1": self.X1, "X2": self.X2, "X21": self.X21, "X22": self.X22,
            "H": self.H, "eigenvalues": self.eigenvalues, "coords": self.coords,
            "covariate_values": self.covariate.values, "covariate_years": self.covariate.years,
            "spline_columns": self.spline_columns if self.spline_columns is not None else np.arange(self.n_spatial),
        }
        metadata = {
            "kind": "basis",
            "eof_rule": self.eof_rule,
            "scaler": {"n_years": self.scaler.n_years, "mean": self.scaler.mean, "scale": self.scaler.scale},
        }
        return write_bundle(path, arrays, metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BasisSet":
        arrays, metadata = read_bundle(path)
        if metadata.get("kind") != "basis":
            raise ShapeError(f"{path} is not a basis bundle (kind={metadata.get('kind')!r})")
        scaler = CovariateScaler(**metadata["scaler"])
        covariate = CovariateSeries(arrays["covariate_values"], arrays["covariate_years"].astype(np.int64))
        return cls(
            X0=arrays["X0"], X1=arrays["X1"], X2=arrays["X2"], X21=arrays["X21"], X22=arrays["X22"],
            H=arrays["H"], eigenvalues=arrays["eigenvalues"], coords=arrays["coords"],
            scaler=scaler, covariate=covariate,
            spline_columns=arrays["spline_columns"].astype(np.int64), eof_rule=metadata["eof_rule"],
        )


def build_basis(data: GriddedDataset, covariate: CovariateSeries, config: Optional[BasisConfig] = None) -> Tuple[BasisSet, PreliminaryFit]:
    """
    Assemble every design matrix for a dataset.

    Returns:
        (BasisSet, PreliminaryFit) where the fit is the one whose residual
        covariance defines the EOFs
    """
    config = config or BasisConfig()
    if len(covariate) < data.n_years:
        raise CoverageError(f"covariate has {len(covariate)} years, the data span {data.n_years}")

    scaler = covariate_scaler(covariate, data.n_years)
    X0 = scaler.row(covariate.values[:data.n_years])
    X1 = seasonal_spline_matrix(data.weeks_per_year, config.seasonal_basis)
    X2, kept = spatial_spline_matrix(data.coords, config.layout, return_columns=True)

    fit = preliminary_fit(data, X0, X1, X2)
    residuals = data.values - fit.fitted
    spatial = leading_eofs(sample_covariance(residuals), n_eofs=config.n_eofs, threshold=config.eof_threshold)
    X21, X22 = split_projection(X2, spatial.H)

    basis = BasisSet(
        X0=X0, X1=X1, X2=X2, X21=X21, X22=X22, H=spatial.H, eigenvalues=spatial.eigenvalues,
        coords=data.coords.copy(), scaler=scaler, covariate=covariate,
        spline_columns=kept, eof_rule=spatial.rule,
    )
    logger.info(
        f"Basis ready: N={basis.n_sites}, T1={basis.n_years}, P_T={basis.n_seasonal}, "
        f"P_S={basis.n_spatial}, L={basis.n_eofs}"
    )
    return basis, fit
