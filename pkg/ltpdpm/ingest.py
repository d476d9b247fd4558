"""
Gridded observations and the annual covariate series.

Observations are held site-major as an N x T matrix of weekly values. The week
index t (1-based) maps to a (year, week-of-year) pair by
t = 52 * (t1 - 1) + t2, with t1 = ceil(t / 52).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ltpdpm.config import DAYS_PER_WEEK, EARTH_RADIUS_KM, WEEKS_PER_YEAR
from ltpdpm.errors import CoverageError, DegeneracyError, ParseError, ShapeError

logger = logging.getLogger(__name__)

DATASET_FORMATS = ("csv-long", "binary-matrix")
CSV_COLUMNS = ["site_id", "lon", "lat", "t", "value"]

PathLike = Union[str, Path]


def time_to_year_week(t, weeks_per_year: int = WEEKS_PER_YEAR):
    """Map 1-based week index t to (t1, t2); accepts scalars or integer arrays."""
    t = np.asarray(t)
    if np.any(t < 1):
        raise ValueError(f"time index must be >= 1, got {t.min()}")
    t1 = -(-t // weeks_per_year)
    t2 = t - weeks_per_year * (t1 - 1)
    if t1.ndim == 0:
        return int(t1), int(t2)
    return t1, t2


def year_week_to_time(t1, t2, weeks_per_year: int = WEEKS_PER_YEAR):
    """Inverse of time_to_year_week."""
    t1 = np.asarray(t1)
    t2 = np.asarray(t2)
    if np.any(t1 < 1) or np.any(t2 < 1) or np.any(t2 > weeks_per_year):
        raise ValueError(f"year must be >= 1 and week in [1, {weeks_per_year}]")
    t = weeks_per_year * (t1 - 1) + t2
    return int(t) if t.ndim == 0 else t


@dataclass(eq=False)
class GriddedDataset:
    """N-site x T-week observation matrix with site coordinates.

    Attributes:
        values: N x T matrix, site-major
        coords: N x 2 matrix of (longitude E, latitude N)
        site_ids: Identifier per site, defaults to 0..N-1
        weeks_per_year: T2, fixed at 52
    """

    values: np.ndarray
    coords: np.ndarray
    site_ids: np.ndarray = None
    weeks_per_year: int = WEEKS_PER_YEAR

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"values must be an N x T matrix, got shape {self.values.shape}")
        n_sites, n_weeks = self.values.shape
        if self.coords.shape != (n_sites, 2):
            raise ShapeError(f"coords must have shape ({n_sites}, 2), got {self.coords.shape}")
        if n_weeks == 0 or n_weeks % self.weeks_per_year != 0:
            raise ShapeError(f"T = {n_weeks} is not a positive multiple of {self.weeks_per_year} weeks")
        if not np.all(np.isfinite(self.values)):
            site, week = np.argwhere(~np.isfinite(self.values))[0]
            raise ValueError(f"non-finite observation at site {site}, week {week + 1}; missing data is not supported")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates must be finite")
        if len(np.unique(self.coords, axis=0)) != n_sites:
            raise ValueError("site coordinates must be pairwise distinct")
        if self.site_ids is None:
            self.site_ids = np.arange(n_sites)
        self.site_ids = np.asarray(self.site_ids)
        if len(self.site_ids) != n_sites:
            raise ShapeError(f"expected {n_sites} site ids, got {len(self.site_ids)}")

    @property
    def n_sites(self) -> int:
        return self.values.shape[0]

    @property
    def n_weeks(self) -> int:
        return self.values.shape[1]

    @property
    def n_years(self) -> int:
        return self.n_weeks // self.weeks_per_year

    def year_week(self, t: int) -> Tuple[int, int]:
        """(t1, t2) of week index t, checked against the series length."""
        if not 1 <= t <= self.n_weeks:
            raise ValueError(f"time index {t} outside [1, {self.n_weeks}]")
        return time_to_year_week(t, self.weeks_per_year)

    def as_cube(self) -> np.ndarray:
        """Values reshaped to N x T1 x T2."""
        return self.values.reshape(self.n_sites, self.n_years, self.weeks_per_year)

    def select_weeks(self, start: int, stop: int) -> "GriddedDataset":
        """Columns start..stop (1-based, inclusive) as a new dataset."""
        return GriddedDataset(self.values[:, start - 1:stop].copy(), self.coords.copy(), self.site_ids.copy(), self.weeks_per_year)


@dataclass(eq=False)
class CovariateSeries:
    """Annual covariate values x*, one per consecutive calendar year.

    The first entry belongs to the first fitted year; entries past the fit
    window carry the projection horizon.
    """

    values: np.ndarray
    years: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if len(self.values) == 0:
            raise ValueError("covariate series is empty")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("covariate values must be finite")
        if self.years is None:
            self.years = np.arange(1, len(self.values) + 1)
        self.years = np.asarray(self.years, dtype=np.int64).ravel()
        if len(self.years) != len(self.values):
            raise ShapeError(f"{len(self.years)} year labels for {len(self.values)} values")
        if len(self.years) > 1 and not np.all(np.diff(self.years) == 1):
            raise ValueError("covariate years must be consecutive and ascending")

    def __len__(self) -> int:
        return len(self.values)

    def year_index(self, calendar_year: int) -> int:
        """1-based index t1 of a calendar year."""
        index = int(calendar_year) - int(self.years[0]) + 1
        if not 1 <= index <= len(self):
            raise CoverageError(f"year {calendar_year} outside covariate coverage {self.years[0]}-{self.years[-1]}")
        return index

    def value_at(self, t1: int) -> float:
        if not 1 <= t1 <= len(self):
            raise CoverageError(f"year index {t1} outside covariate coverage [1, {len(self)}]")
        return float(self.values[t1 - 1])

    def window_mean(self, t1_start: int, n_years: int) -> float:
        """Mean over year indices [t1_start, t1_start + n_years)."""
        if n_years < 1:
            raise ValueError(f"n_years must be positive, got {n_years}")
        if t1_start < 1 or t1_start + n_years - 1 > len(self):
            raise CoverageError(
                f"covariate covers years [1, {len(self)}], window needs [{t1_start}, {t1_start + n_years - 1}]"
            )
        return float(np.mean(self.values[t1_start - 1:t1_start - 1 + n_years]))


@dataclass(frozen=True)
class CovariateScaler:
    """Historic centering and scaling behind the orthonormal X0 matrix."""

    n_years: int
    mean: float
    scale: float

    def row(self, value) -> np.ndarray:
        """X0 row(s) [T1^(-1/2), (x - mean) / scale] for covariate value(s)."""
        value = np.asarray(value, dtype=np.float64)
        first = np.full(value.shape, 1.0 / math.sqrt(self.n_years))
        return np.stack([first, (value - self.mean) / self.scale], axis=-1)


def covariate_scaler(cov: CovariateSeries, n_years: int) -> CovariateScaler:
    """Centering/scaling constants from the first n_years covariate values."""
    if n_years < 2:
        raise ValueError(f"need at least two fitted years, got {n_years}")
    if len(cov) < n_years:
        raise CoverageError(f"covariate has {len(cov)} years, the fit window needs {n_years}")
    historic = cov.values[:n_years]
    mean = float(np.mean(historic))
    scale = float(np.sqrt(np.sum((historic - mean) ** 2)))
    if scale == 0.0:
        raise DegeneracyError("covariate is constant over the fit window; cannot standardize")
    return CovariateScaler(n_years=n_years, mean=mean, scale=scale)


def standardize_covariate(cov: CovariateSeries, n_years: int) -> np.ndarray:
    """
    Build the orthonormal T1 x 2 matrix X0 from the historic covariate.

    Column 1 is constant T1^(-1/2); column 2 is the centered covariate divided
    by its root sum of squares.

    Raises:
        DegeneracyError: If the historic covariate is constant
        CoverageError: If the series is shorter than n_years
    """
    scaler = covariate_scaler(cov, n_years)
    return scaler.row(cov.values[:n_years])


def thin_weekly(daily: np.ndarray, weekday: int, stride: int = DAYS_PER_WEEK) -> np.ndarray:
    """
    Keep one day per week: output column t is daily column stride*(t-1) + weekday.

    Trailing days that do not complete a week are dropped.
    """
    daily = np.asarray(daily)
    if daily.ndim != 2:
        raise ValueError(f"daily data must be a matrix, got shape {daily.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if not 1 <= weekday <= stride:
        raise ValueError(f"weekday must be in [1, {stride}], got {weekday}")
    n_days = daily.shape[1]
    if n_days < stride:
        raise ValueError(f"need at least {stride} days, got {n_days}")
    n_weeks = n_days // stride
    return daily[:, weekday - 1:stride * n_weeks:stride].copy()


def _require_format(fmt: str):
    if fmt not in DATASET_FORMATS:
        raise ValueError(f"format must be one of: {DATASET_FORMATS}, got {fmt!r}")


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    converted = pd.to_numeric(frame[column], errors="coerce")
    bad = converted.isna().to_numpy()
    if bad.any():
        row = int(np.argmax(bad)) + 1
        raise ParseError(f"column {column!r} has non-numeric or missing value {frame[column].iloc[row - 1]!r}", row=row)
    return converted.to_numpy(dtype=np.float64)


def _load_csv_long(path: Path) -> GriddedDataset:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseError(f"cannot parse {path}: {e}")

    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise ParseError(f"{path} is missing columns {missing}; expected {CSV_COLUMNS}")
    if frame.empty:
        raise ParseError(f"{path} contains no rows")

    lon = _numeric_column(frame, "lon")
    lat = _numeric_column(frame, "lat")
    t = _numeric_column(frame, "t")
    value = _numeric_column(frame, "value")

    non_integer = (t != np.round(t)) | (t < 1)
    if non_integer.any():
        row = int(np.argmax(non_integer)) + 1
        raise ParseError(f"week index must be a positive integer, got {frame['t'].iloc[row - 1]!r}", row=row)
    t = t.astype(np.int64)

    # Sites keep the order of their first appearance in the file
    site_labels = frame["site_id"].to_numpy()
    site_ids, first_row, site_index = np.unique(site_labels, return_index=True, return_inverse=True)
    order = np.argsort(first_row, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    site_index = rank[site_index.ravel()]
    site_ids = site_ids[order]
    first_row = first_row[order]

    n_sites = len(site_ids)
    n_weeks = int(t.max())
    cell = site_index * n_weeks + (t - 1)
    _, first_cell = np.unique(cell, return_index=True)
    duplicate = np.ones(len(cell), dtype=bool)
    duplicate[first_cell] = False
    if duplicate.any():
        row = int(np.argmax(duplicate)) + 1
        raise ParseError(f"duplicate observation for site {site_labels[row - 1]!r}, week {t[row - 1]}", row=row)

    coords = np.column_stack([lon[first_row], lat[first_row]])
    moved = (lon != coords[site_index, 0]) | (lat != coords[site_index, 1])
    if moved.any():
        row = int(np.argmax(moved)) + 1
        raise ParseError(f"site {site_labels[row - 1]!r} changes coordinates", row=row)

    values = np.full((n_sites, n_weeks), np.nan)
    values[site_index, t - 1] = value
    counts = np.bincount(site_index, minlength=n_sites)
    if np.any(counts != n_weeks):
        short = site_ids[int(np.argmax(counts != n_weeks))]
        raise ShapeError(f"site {short!r} has {counts[counts != n_weeks][0]} weeks, expected {n_weeks}")
    if n_weeks % WEEKS_PER_YEAR != 0:
        raise ShapeError(f"T = {n_weeks} is not a multiple of {WEEKS_PER_YEAR} weeks")
    return GriddedDataset(values, coords, site_ids)


def read_binary_matrix(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read the binary layout u64 N, u64 T, N x 2 float64 coords, N x T float64 values.

    No calendar check is applied, so daily matrices load too.

    Returns:
        (coords, values)
    """
    path = Path(path)
    payload = path.read_bytes()
    if len(payload) < 16:
        raise ParseError(f"{path} is too short for a matrix header")
    n_sites, n_cols = (int(v) for v in np.frombuffer(payload[:16], dtype="<u8"))
    expected = 16 + 8 * (2 * n_sites + n_sites * n_cols)
    if len(payload) != expected:
        raise ParseError(f"{path} has {len(payload)} bytes, header N={n_sites}, T={n_cols} implies {expected}")
    body = np.frombuffer(payload[16:], dtype="<f8")
    coords = body[:2 * n_sites].reshape(n_sites, 2).astype(np.float64)
    values = body[2 * n_sites:].reshape(n_sites, n_cols).astype(np.float64)
    return coords, values


def write_binary_matrix(path: PathLike, coords: np.ndarray, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(values, dtype="<f8")
    coords = np.ascontiguousarray(coords, dtype="<f8")
    header = np.array(values.shape, dtype="<u8").tobytes()
    path.write_bytes(header + coords.tobytes() + values.tobytes())
    return path


def load_dataset(path: PathLike, fmt: str) -> GriddedDataset:
    """
    Load a gridded dataset from an explicitly tagged file format.

    Args:
        path: File location
        fmt: "csv-long" (columns site_id,lon,lat,t,value) or "binary-matrix"

    Returns:
        Validated GriddedDataset

    Raises:
        FileNotFoundError: If the file does not exist
        ParseError: If a row cannot be parsed
        ShapeError: If T is not a multiple of 52 or sites are ragged
    """
    _require_format(fmt)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")

    if fmt == "csv-long":
        dataset = _load_csv_long(path)
    else:
        coords, values = read_binary_matrix(path)
        if values.shape[1] % WEEKS_PER_YEAR != 0:
            raise ShapeError(f"T = {values.shape[1]} is not a multiple of {WEEKS_PER_YEAR} weeks")
        dataset = GriddedDataset(values, coords)

    logger.info(f"Loaded {fmt} dataset {path}: N={dataset.n_sites}, T={dataset.n_weeks}")
    return dataset


def write_dataset(dataset: GriddedDataset, path: PathLike, fmt: str) -> Path:
    """Write a dataset in either supported format; floats round-trip exactly."""
    _require_format(fmt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "binary-matrix":
        return write_binary_matrix(path, dataset.coords, dataset.values)

    n_sites, n_weeks = dataset.values.shape
    frame = pd.DataFrame({
        "site_id": np.repeat(dataset.site_ids, n_weeks),
        "lon": np.repeat(dataset.coords[:, 0], n_weeks),
        "lat": np.repeat(dataset.coords[:, 1], n_weeks),
        "t": np.tile(np.arange(1, n_weeks + 1), n_sites),
        "value": dataset.values.ravel(),
    })
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def load_covariate(path: PathLike) -> CovariateSeries:
    """Load a two-column `year,value` CSV."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"covariate file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"cannot parse {path}: {e}")
    if list(frame.columns) != ["year", "value"]:
        raise ParseError(f"{path} must have header year,value, got {list(frame.columns)}")
    years = _numeric_column(frame, "year")
    values = _numeric_column(frame, "value")
    try:
        series = CovariateSeries(values, years.astype(np.int64))
    except ValueError as e:
        raise ParseError(f"{path}: {e}")
    logger.info(f"Loaded covariate {path}: years {series.years[0]}-{series.years[-1]}")
    return series


def write_covariate(cov: CovariateSeries, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"year": cov.years, "value": cov.values}).to_csv(path, index=False, float_format="%.17g")
    return path


def haversine_km(lon1, lat1, lon2, lat2, radius_km: float = EARTH_RADIUS_KM):
    """Great-circle distance on a spherical Earth; inputs in degrees, broadcastable."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * radius_km * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def sites_within_radius(coords: np.ndarray, center: Sequence[float], radius_km: float) -> np.ndarray:
    """
    Indices of sites within radius_km of center (lon, lat).

    The nearest site is always included, so a radius of 0 selects the single
    grid cell closest to the center.
    """
    if radius_km < 0:
        raise ValueError(f"radius_km must be non-negative, got {radius_km}")
    coords = np.asarray(coords, dtype=np.float64)
    distances = haversine_km(coords[:, 0], coords[:, 1], center[0], center[1])
    inside = distances <= radius_km
    inside[int(np.argmin(distances))] = True
    return np.flatnonzero(inside)
