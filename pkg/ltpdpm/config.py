"""Model defaults and validated configuration objects."""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

# Calendar layout
WEEKS_PER_YEAR = 52
DAYS_PER_WEEK = 7

# Mean model
SPLINE_DEGREE = 3
DEFAULT_SEASONAL_BASIS = 12
"""One seasonal B-spline per month."""

DEFAULT_N_LONG = 30
DEFAULT_N_LAT = 10
DEFAULT_PRUNE_MASS = 0.99

# Degrees-of-freedom grid {2.1, 2.2, ..., 40.0}, stored in tenths
DF_TENTHS_MIN = 21
DF_TENTHS_MAX = 400
DF_GRID_TENTHS = np.arange(DF_TENTHS_MIN, DF_TENTHS_MAX + 1)
DF_GRID = DF_GRID_TENTHS / 10.0

# Numerical floors
DENSITY_TAU2_FLOOR = 1e-12
SAMPLER_VARIANCE_FLOOR = 1e-10

# MCMC schedule
DEFAULT_N_ITER = 60000
DEFAULT_BURN_IN = 10000
DEFAULT_THIN = 5
SAMPLES_CHUNK_SIZE = 1000

# Geography
EARTH_RADIUS_KM = 6371.0

# Scoring
SCORE_QUANTILE_LO = 0.95
SCORE_QUANTILE_HI = 0.999
SCORE_N_THRESHOLDS = 10

# Predictive simulation
ENSEMBLE_CHUNK_SIZE = 1000

MODEL_FAMILIES = ("ltp-dpm", "ltp", "lgp-dpm", "lgp")


@dataclass
class SpatialLayout:
    """Tensor-product spline layout over the spatial domain.

    Attributes:
        n_long: Number of cubic B-splines along the (rotated) first axis
        n_lat: Number of cubic B-splines along the (rotated) second axis
        prune_mass: Fraction of the total basis weight the retained columns must carry
        rotation_deg: Counter-clockwise rotation applied to the coordinates before
            the bounding rectangle is taken, default 0
        bounds: Optional explicit rectangle (u_min, u_max, v_min, v_max) in rotated
            coordinates; derived from the sites when omitted
    """

    n_long: int = DEFAULT_N_LONG
    n_lat: int = DEFAULT_N_LAT
    prune_mass: float = DEFAULT_PRUNE_MASS
    rotation_deg: float = 0.0
    bounds: Optional[Tuple[float, float, float, float]] = None

    def __post_init__(self):
        """Validate layout configuration."""
        if self.n_long < 4 or self.n_lat < 4:
            raise ValueError(f"n_long and n_lat must be >= 4 for cubic splines, got {self.n_long} and {self.n_lat}")
        if not 0.0 < self.prune_mass <= 1.0:
            raise ValueError(f"prune_mass must be in (0, 1], got {self.prune_mass}")
        if self.bounds is not None:
            u_min, u_max, v_min, v_max = self.bounds
            if not (u_min < u_max and v_min < v_max):
                raise ValueError(f"bounds must be increasing pairs, got {self.bounds}")


@dataclass
class BasisConfig:
    """Design-matrix settings.

    Exactly one of n_eofs (explicit L) and eof_threshold (q) must be given.
    """

    seasonal_basis: int = DEFAULT_SEASONAL_BASIS
    layout: SpatialLayout = field(default_factory=SpatialLayout)
    n_eofs: Optional[int] = None
    eof_threshold: Optional[float] = 0.01

    def __post_init__(self):
        """Validate basis configuration."""
        if self.seasonal_basis < 4:
            raise ValueError(f"seasonal_basis must be >= 4, got {self.seasonal_basis}")
        if (self.n_eofs is None) == (self.eof_threshold is None):
            raise ValueError("Specify exactly one of n_eofs and eof_threshold")
        if self.n_eofs is not None and self.n_eofs < 1:
            raise ValueError(f"n_eofs must be positive, got {self.n_eofs}")
        if self.eof_threshold is not None and not 0.0 < self.eof_threshold <= 1.0:
            raise ValueError(f"eof_threshold must be in (0, 1], got {self.eof_threshold}")


@dataclass
class PriorConfig:
    """Hyperparameters of the hierarchical model.

    Attributes:
        mean_prior_sd: Prior SD s_i of the coefficient means mu_{i;j}, for the
            intercept (i=1) and slope (i=2) blocks
        coef_var_shape: Inverse-gamma shape a_i of sigma2_{i;j}
        coef_var_rate: Inverse-gamma rate b_i of sigma2_{i;j}
        phi_df_offset: Inverse-Wishart degrees of freedom are L + phi_df_offset
        tau2_shape: Inverse-gamma shape of the nugget variances
        tau2_rate: Inverse-gamma rate of the nugget variances
        delta_shape: Gamma shape of the concentration parameter
        delta_rate: Gamma rate of the concentration parameter
    """

    mean_prior_sd: Tuple[float, float] = (100.0, 10.0)
    coef_var_shape: Tuple[float, float] = (0.01, 0.1)
    coef_var_rate: Tuple[float, float] = (0.01, 0.1)
    phi_df_offset: float = 2.0
    tau2_shape: float = 1.0
    tau2_rate: float = 1.0
    delta_shape: float = 0.1
    delta_rate: float = 0.1

    def __post_init__(self):
        """Validate hyperparameters."""
        positives = {
            "mean_prior_sd": self.mean_prior_sd,
            "coef_var_shape": self.coef_var_shape,
            "coef_var_rate": self.coef_var_rate,
        }
        for name, pair in positives.items():
            if len(pair) != 2 or min(pair) <= 0:
                raise ValueError(f"{name} must be two positive values, got {pair}")
        if self.phi_df_offset <= 1.0:
            raise ValueError(f"phi_df_offset must exceed 1 for a finite prior mean, got {self.phi_df_offset}")
        for name in ("tau2_shape", "tau2_rate", "delta_shape", "delta_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class MCMCConfig:
    """Configuration of a Gibbs run.

    Attributes:
        n_iter: Total number of sweeps, default 60000
        burn_in: Sweeps discarded before retention starts, default 10000
        thin: Keep one of every `thin` post-burn-in sweeps, default 5
        n_components: Truncation level K of the stick-breaking prior
        fixed_df_tenths: Pin every a_k to this grid value (in tenths) instead of
            sampling it; 400 gives the Gaussian surrogate
        priors: Hyperparameters
        seed: Seed of the sampler's random stream
        log_every: Progress logging interval in sweeps
    """

    n_iter: int = DEFAULT_N_ITER
    burn_in: int = DEFAULT_BURN_IN
    thin: int = DEFAULT_THIN
    n_components: int = 10
    fixed_df_tenths: Optional[int] = None
    priors: PriorConfig = field(default_factory=PriorConfig)
    seed: int = 0
    log_every: int = 1000

    def __post_init__(self):
        """Validate the MCMC schedule."""
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be positive, got {self.n_iter}")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError(f"burn_in must satisfy 0 <= burn_in < n_iter, got {self.burn_in} with n_iter={self.n_iter}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if self.n_retained < 1:
            raise ValueError("The schedule retains no draws; lower burn_in or thin")
        if self.n_components < 1:
            raise ValueError(f"n_components must be >= 1, got {self.n_components}")
        if self.fixed_df_tenths is not None and not DF_TENTHS_MIN <= self.fixed_df_tenths <= DF_TENTHS_MAX:
            raise ValueError(f"fixed_df_tenths must lie on the grid [{DF_TENTHS_MIN}, {DF_TENTHS_MAX}], got {self.fixed_df_tenths}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be positive, got {self.log_every}")

    @property
    def n_retained(self) -> int:
        """Number of draws kept after burn-in and thinning."""
        return (self.n_iter - self.burn_in) // self.thin

    @classmethod
    def for_family(cls, family: str, n_components: int = 10, **kwargs) -> "MCMCConfig":
        """Factory for the model family and its sub-models.

        ltp-dpm samples everything; ltp fixes K=1; lgp-dpm pins the degrees of
        freedom at the grid maximum; lgp does both.
        """
        family = family.lower()
        if family not in MODEL_FAMILIES:
            raise ValueError(f"family must be one of: {MODEL_FAMILIES}")
        if family in ("ltp", "lgp"):
            n_components = 1
        fixed = DF_TENTHS_MAX if family in ("lgp-dpm", "lgp") else None
        return cls(n_components=n_components, fixed_df_tenths=fixed, **kwargs)
