#!/usr/bin/env python3
"""
Command-line driver for the spatial mixture model pipeline.

Every subcommand reads a TOML run configuration, applies flag overrides,
writes its artifacts under the configured output directory and records a
run_manifest.json (resolved configuration, seed, artifact hashes, version)
next to them.

Exit codes: 0 on success, 1 on a computation error, 2 on a usage or
configuration error.
"""

import argparse
import copy
import json
import logging
import sys
import tomllib
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from ltpdpm import __version__
from ltpdpm.basis import BasisSet, build_basis, sitewise_trend
from ltpdpm.config import (
    DEFAULT_BURN_IN,
    DEFAULT_N_ITER,
    DEFAULT_N_LAT,
    DEFAULT_N_LONG,
    DEFAULT_PRUNE_MASS,
    DEFAULT_SEASONAL_BASIS,
    DEFAULT_THIN,
    MODEL_FAMILIES,
    SAMPLES_CHUNK_SIZE,
    SCORE_N_THRESHOLDS,
    BasisConfig,
    MCMCConfig,
    PriorConfig,
    SpatialLayout,
)
from ltpdpm.diagnostics import diagnostics
from ltpdpm.errors import ConfigError, LtpDpmError
from ltpdpm.hotspot import estimate_hotspot, write_hotspot
from ltpdpm.ingest import (
    CovariateSeries,
    GriddedDataset,
    load_covariate,
    load_dataset,
    sites_within_radius,
    write_covariate,
    write_dataset,
    year_week_to_time,
)
from ltpdpm.logging_utils import setup_logging
from ltpdpm.model import generate_synthetic, make_synthetic_truth
from ltpdpm.predict import (
    ExceedanceThreshold,
    decadal_rate_of_change,
    exceedance_curve,
    overall_decadal_rate_of_change,
    posterior_predictive,
    return_level_map,
)
from ltpdpm.sampler import PosteriorSamples, gibbs_fit
from ltpdpm.score import (
    benchmark_config,
    chronological_split,
    forecast_scores,
    score_table,
    score_thresholds,
    write_score_table,
)
from ltpdpm.storage import file_sha256, write_site_geojson, write_site_table

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("simulate", "prepare-basis", "fit", "diagnose", "predict", "hotspot", "score")
MANIFEST_NAME = "run_manifest.json"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsSection(_Section):
    """Input and output locations."""
    dataset: Optional[str] = None
    dataset_format: Literal["csv-long", "binary-matrix"] = "csv-long"
    covariate: Optional[str] = None
    basis: Optional[str] = None
    samples: Optional[str] = None
    output_dir: str = "output"


class ModelSection(_Section):
    """Basis layout, model family and hyperparameters."""
    family: str = "ltp-dpm"
    n_components: int = 10
    n_eofs: Optional[int] = None
    eof_threshold: Optional[float] = None
    seasonal_basis: int = DEFAULT_SEASONAL_BASIS
    n_long: int = DEFAULT_N_LONG
    n_lat: int = DEFAULT_N_LAT
    prune_mass: float = DEFAULT_PRUNE_MASS
    rotation_deg: float = 0.0
    mean_prior_sd: Tuple[float, float] = (100.0, 10.0)
    coef_var_shape: Tuple[float, float] = (0.01, 0.1)
    coef_var_rate: Tuple[float, float] = (0.01, 0.1)
    phi_df_offset: float = 2.0
    tau2_shape: float = 1.0
    tau2_rate: float = 1.0
    delta_shape: float = 0.1
    delta_rate: float = 0.1

    @model_validator(mode="after")
    def _check_family(self):
        if self.family not in MODEL_FAMILIES:
            raise ValueError(f"family must be one of: {MODEL_FAMILIES}")
        return self

    def basis_config(self) -> BasisConfig:
        threshold = self.eof_threshold
        if self.n_eofs is None and threshold is None:
            threshold = 0.01
        try:
            layout = SpatialLayout(self.n_long, self.n_lat, self.prune_mass, self.rotation_deg)
            return BasisConfig(self.seasonal_basis, layout, self.n_eofs, threshold)
        except ValueError as e:
            raise ConfigError(f"[model] {e}")

    def priors(self) -> PriorConfig:
        return PriorConfig(
            mean_prior_sd=tuple(self.mean_prior_sd),
            coef_var_shape=tuple(self.coef_var_shape),
            coef_var_rate=tuple(self.coef_var_rate),
            phi_df_offset=self.phi_df_offset,
            tau2_shape=self.tau2_shape,
            tau2_rate=self.tau2_rate,
            delta_shape=self.delta_shape,
            delta_rate=self.delta_rate,
        )


class MCMCSection(_Section):
    """Sampler schedule and the run seed."""
    n_iter: int = DEFAULT_N_ITER
    burn_in: int = DEFAULT_BURN_IN
    thin: int = DEFAULT_THIN
    seed: int = 0
    log_every: int = 1000
    chunk_size: int = SAMPLES_CHUNK_SIZE


class TaskSection(_Section):
    """Target time, thresholds and the site set of a prediction task."""
    t0: Optional[int] = None
    reference_year: Optional[int] = None
    week: Optional[int] = None
    u: Optional[float] = None
    p: Optional[float] = None
    alpha: float = 0.05
    return_period: int = 50
    sites: Optional[List[int]] = None
    center: Optional[Tuple[float, float]] = None
    radius_km: Optional[float] = None
    curve_u: List[float] = []
    curve_p: List[float] = []


class SimulateSection(_Section):
    """Synthetic truth for the simulate subcommand."""
    n_lon: int = 5
    n_lat: int = 4
    n_years: int = 4
    n_future_years: int = 2
    first_year: int = 1985
    n_eofs: int = 3
    n_seasonal: int = 6
    range_km: float = 300.0
    df: List[float] = [3.0, 10.0, 40.0]
    tau2: List[float] = [0.05, 0.1, 0.2]
    phi_scale: List[float] = [1.0, 0.5, 0.25]
    pi: List[float] = [0.3, 0.3, 0.4]


class ScoreSection(_Section):
    """Chronological split and threshold sweep of the score subcommand."""
    cut: Optional[int] = None
    n_thresholds: int = SCORE_N_THRESHOLDS


class RunConfig(_Section):
    """Fully resolved run configuration."""
    paths: PathsSection = PathsSection()
    model: ModelSection = ModelSection()
    mcmc: MCMCSection = MCMCSection()
    task: TaskSection = TaskSection()
    simulate: SimulateSection = SimulateSection()
    score: ScoreSection = ScoreSection()

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def mcmc_config(self, family: Optional[str] = None) -> MCMCConfig:
        try:
            return self._mcmc_config(family)
        except ValueError as e:
            raise ConfigError(f"[mcmc] {e}")

    def _mcmc_config(self, family: Optional[str]) -> MCMCConfig:
        return MCMCConfig.for_family(
            family or self.model.family,
            n_components=self.model.n_components,
            n_iter=self.mcmc.n_iter,
            burn_in=self.mcmc.burn_in,
            thin=self.mcmc.thin,
            priors=self.model.priors(),
            seed=self.mcmc.seed,
            log_every=self.mcmc.log_every,
        )


def parse_override(assignment: str) -> Tuple[List[str], Any]:
    """Split 'section.key=value'; the value is read as a TOML value, else kept as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key must be section.key, got {key!r}")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return parts, value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Return a copy of raw with each override assigned; later overrides win."""
    merged = copy.deepcopy(raw)
    for assignment in overrides:
        (section, key), value = parse_override(assignment)
        merged.setdefault(section, {})
        if not isinstance(merged[section], dict):
            raise ConfigError(f"[{section}] is not a table")
        merged[section][key] = value
    return merged


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """
    Read a TOML run configuration and apply overrides before validation.

    Raises:
        ConfigError: If the file is missing, unparseable or invalid
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"configuration file not found: {config_path}")
        try:
            raw = tomllib.loads(config_path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}")
    try:
        return RunConfig.model_validate(apply_overrides(raw, overrides))
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}")


def _require(value: Optional[Any], name: str) -> Any:
    if value is None:
        raise ConfigError(f"{name} must be set for this subcommand")
    return value


def _existing(path: Optional[str], name: str) -> Path:
    path = Path(_require(path, f"paths.{name}"))
    if not path.exists():
        raise ConfigError(f"paths.{name} does not exist: {path}")
    return path


def _load_inputs(cfg: RunConfig, inputs: List[Path]) -> Tuple[GriddedDataset, CovariateSeries]:
    dataset_path = _existing(cfg.paths.dataset, "dataset")
    covariate_path = _existing(cfg.paths.covariate, "covariate")
    inputs.extend([dataset_path, covariate_path])
    return load_dataset(dataset_path, cfg.paths.dataset_format), load_covariate(covariate_path)


def _load_basis(cfg: RunConfig, inputs: List[Path]) -> BasisSet:
    path = _existing(cfg.paths.basis, "basis")
    inputs.append(path)
    return BasisSet.load(path)


def _load_samples(cfg: RunConfig, inputs: List[Path]) -> PosteriorSamples:
    path = _existing(cfg.paths.samples, "samples")
    inputs.append(path / "manifest.json")
    return PosteriorSamples.load(path)


def _site_ids(cfg: RunConfig, basis: BasisSet) -> np.ndarray:
    if cfg.paths.dataset and Path(cfg.paths.dataset).exists():
        return load_dataset(cfg.paths.dataset, cfg.paths.dataset_format).site_ids
    return np.arange(basis.n_sites)


def _target_week(task: TaskSection, covariate: CovariateSeries) -> int:
    if task.t0 is not None:
        return task.t0
    if task.reference_year is not None and task.week is not None:
        return year_week_to_time(covariate.year_index(task.reference_year), task.week)
    raise ConfigError("task.t0, or task.reference_year with task.week, must be set")


def _site_set(task: TaskSection, basis: BasisSet) -> Optional[np.ndarray]:
    if task.sites is not None:
        return np.asarray(task.sites, dtype=np.int64)
    if task.center is not None:
        return sites_within_radius(basis.coords, task.center, task.radius_km or 0.0)
    return None


def cmd_simulate(cfg: RunConfig, args, inputs: List[Path]) -> List[Path]:
    sim = cfg.simulate
    truth = make_synthetic_truth(
        n_lon=sim.n_lon, n_lat=sim.n_lat, n_years=sim.n_years, n_future_years=sim.n_future_years,
        n_eofs=sim.n_eofs, range_km=sim.range_km, df_tenths=[int(round(10 * a)) for a in sim.df],
        tau2=sim.tau2, phi_scale=sim.phi_scale, pi=sim.pi, n_seasonal=sim.n_seasonal,
        seed=cfg.mcmc.seed, first_year=sim.first_year,
    )
    n_weeks = sim.n_years * truth.basis.weeks_per_year
    dataset, latent = generate_synthetic(truth.coeffs, truth.clusters, truth.weights, truth.basis, n_weeks, cfg.mcmc.seed)
    out = cfg.output_dir
    return [
        write_dataset(dataset, _require(cfg.paths.dataset, "paths.dataset"), cfg.paths.dataset_format),
        write_covariate(truth.basis.covariate, _require(cfg.paths.covariate, "paths.covariate")),
        truth.save(out / "truth_parameters.bin", latent),
        truth.basis.save(out / "truth_basis.bin"),
    ]


def cmd_prepare_basis(cfg: RunConfig, args, inputs: List[Path]) -> List[Path]:
    data, covariate = _load_inputs(cfg, inputs)
    basis, _ = build_basis(data, covariate, cfg.model.basis_config())
    trend = sitewise_trend(data)
    return [
        basis.save(_require(cfg.paths.basis, "paths.basis")),
        write_site_table(cfg.output_dir / "sitewise_trend.csv", data.site_ids, {"trend_per_decade": trend}),
    ]


def cmd_fit(cfg: RunConfig, args, inputs: List[Path]) -> List[Path]:
    data, _ = _load_inputs(cfg, inputs)
    basis = _load_basis(cfg, inputs)
    samples = gibbs_fit(data, basis, cfg.mcmc_config())
    store = samples.save(_require(cfg.paths.samples, "paths.samples"), chunk_size=cfg.mcmc.chunk_size)
    return sorted(store.glob("chunk_*.bin")) + [store / "manifest.json"]


def cmd_diagnose(cfg: RunConfig, args, inputs: List[Path]) -> List[Path]:
    samples = _load_samples(cfg, inputs)
    report = diagnostics(samples)
    weights = samples.ordered_weights()
    weights_path = cfg.output_dir / "ordered_weights.csv"
    frame = pd.DataFrame(weights, columns=[f"w{k + 1}" for k in range(weights.shape[1])])
    frame.insert(0, "draw", np.arange(len(frame)))
    frame.to_csv(weights_path, index=False, float_format="%.10g")
    if report.flagged:
        print(f"Convergence flags: {', '.join(report.flagged)}", file=sys.stderr)
    return [report.write_csv(cfg.output_dir / "diagnostics.csv"), weights_path]


def cmd_predict(cfg: RunConfig, args, inputs: List[Path]) -> List[Path]:
    basis = _load_basis(cfg, inputs)
    samples = _load_samples(cfg, inputs)
    task, out = cfg.task, cfg.output_dir
    covariate = basis.covariate
    t0 = _target_week(task, covariate)
    site_ids = _site_ids(cfg, basis)
    seed, threads = cfg.mcmc.seed, args.threads

    ensemble = posterior_predictive(samples, basis, t0, covariate, seed, threads)
    mc_se = ensemble.sd / np.sqrt(ensemble.n_draws)
    columns = {"value": ensemble.mean, "mc_se": mc_se, "sd": ensemble.sd}
    written = [
        write_site_table(out / "predictive_mean.csv", site_ids, columns),
        write_site_geojson(out / "predictive_mean.geojson", basis.coords, site_ids, columns),
    ]

    rate = decadal_rate_of_change(samples, basis, ensemble.week)
    overall = overall_decadal_rate_of_change(samples, basis)
    written.append(write_site_table(out / "decadal_rate.csv", site_ids, {"value": rate.mean, "t_stat": rate.t_stat}))
    written.append(write_site_table(out / "decadal_rate_overall.csv", site_ids, {"value": overall.mean, "t_stat": overall.t_stat}))

    if task.reference_year is not None:
        levels = return_level_map(samples, basis, ensemble.week, task.return_period, task.reference_year, covariate)
        written.append(write_site_table(out / "return_level.csv", site_ids, {"value": levels}))

    sites = _site_set(task, basis)
    thresholds = [ExceedanceThreshold.fixed(u) for u in ([task.u] if task.u is not None else []) + task.curve_u]
    thresholds += [ExceedanceThreshold.quantile(p) for p in ([task.p] if task.p is not None else []) + task.curve_p]
    if sites is not None and thresholds:
        curve = exceedance_curve(samples, basis, sites, thresholds, t0, covariate, seed, threads)
        path = out / "exceedance.csv"
        curve.to_csv(path, index=False, float_format="%.10g")
        written.append(path)
    return written


def cmd_hotspot(cfg: RunConfig, args, inputs: List[Path]) -> List[Path]:
    basis = _load_basis(cfg, inputs)
    samples = _load_samples(cfg, inputs)
    task = cfg.task
    t0 = _target_week(task, basis.covariate)
    u = _require(task.u, "task.u")
    result = estimate_hotspot(samples, basis, t0, u, task.alpha, cfg.mcmc.seed, basis.covariate, args.threads)
    print(f"Hotspot: {len(result.region)} of {basis.n_sites} sites, critical value {result.critical_value:.4f}")
    return list(write_hotspot(result, cfg.output_dir, basis.coords, _site_ids(cfg, basis)).values())


def cmd_score(cfg: RunConfig, args, inputs: List[Path]) -> List[Path]:
    data, covariate = _load_inputs(cfg, inputs)
    cut = _require(cfg.score.cut, "score.cut")
    train, test = chronological_split(data, cut)
    basis, _ = build_basis(train, covariate, cfg.model.basis_config())
    thresholds = score_thresholds(train, cfg.score.n_thresholds)

    model_cfg = cfg.mcmc_config()
    model = forecast_scores(gibbs_fit(train, basis, model_cfg), basis, test, cut + 1, thresholds, covariate, cfg.mcmc.seed, args.threads)
    bench = forecast_scores(gibbs_fit(train, basis, benchmark_config(model_cfg)), basis, test, cut + 1, thresholds, covariate, cfg.mcmc.seed, args.threads)
    table = score_table(cfg.model.family, model, bench)
    print(table.to_string(index=False))
    return [write_score_table(table, cfg.output_dir / "scores.csv")]


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace, List[Path]], List[Path]]] = {
    "simulate": cmd_simulate,
    "prepare-basis": cmd_prepare_basis,
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "predict": cmd_predict,
    "hotspot": cmd_hotspot,
    "score": cmd_score,
}


def write_run_manifest(cfg: RunConfig, subcommand: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    """
    Record everything needed to re-run a subcommand: config echo, seed and
    artifact hashes. Entries of other subcommands in the same file are kept.
    """
    path = cfg.output_dir / MANIFEST_NAME
    runs = json.loads(path.read_text()) if path.exists() else {}
    runs[subcommand] = {
        "version": __version__,
        "seed": cfg.mcmc.seed,
        "config": cfg.model_dump(mode="json"),
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): file_sha256(p) for p in outputs if Path(p).is_file()},
    }
    path.write_text(json.dumps(runs, indent=2, sort_keys=True))
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltpdpm",
        description="Semiparametric spatial mixture model: simulate, fit and forecast extremes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  ltpdpm simulate -c run.toml
  ltpdpm prepare-basis -c run.toml
  ltpdpm fit -c run.toml --seed 7
  ltpdpm predict -c run.toml --t0 260 --p 0.95
  ltpdpm hotspot -c run.toml --u 30.5 --alpha 0.05
  ltpdpm score -c run.toml --set score.cut=1352
        """
    )
    parser.add_argument("--version", action="version", version=f"ltpdpm {__version__}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="Pipeline stage to run")
    parser.add_argument("-c", "--config", help="TOML run configuration")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="Override one configuration value (repeatable)"
    )
    parser.add_argument("--t0", type=int, help="Target week index (task.t0)")
    parser.add_argument("--u", type=float, help="Fixed exceedance threshold (task.u)")
    parser.add_argument("--p", type=float, help="Site quantile level (task.p)")
    parser.add_argument("--alpha", type=float, help="Family-wise error level (task.alpha)")
    parser.add_argument("--seed", type=int, help="Run seed (mcmc.seed)")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads for ensemble simulation (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    flags = {"t0": "task.t0", "u": "task.u", "p": "task.p", "alpha": "task.alpha", "seed": "mcmc.seed"}
    extra = [f"{key}={getattr(args, name)!r}" for name, key in flags.items() if getattr(args, name) is not None]
    return list(args.overrides) + extra


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.threads < 1:
        print("Error: --threads must be >= 1", file=sys.stderr)
        return 2

    try:
        cfg = load_run_config(args.config, _flag_overrides(args))
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        setup_logging(
            f"{args.subcommand}.log",
            log_dir=str(cfg.output_dir / "logs"),
            level=logging.DEBUG if args.verbose else logging.INFO,
        )
        logger.info(f"Running {args.subcommand} with seed {cfg.mcmc.seed}")
        inputs: List[Path] = []
        outputs = COMMANDS[args.subcommand](cfg, args, inputs)
        manifest = write_run_manifest(cfg, args.subcommand, inputs, outputs)
        logger.info(f"{args.subcommand} finished; manifest at {manifest}")
        return 0

    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"Configuration error: {e}", file=sys.stderr)
        return 2
    except (LtpDpmError, np.linalg.LinAlgError, ValueError, FloatingPointError) as e:
        logger.error(f"{args.subcommand} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError) as e:
        logger.error(f"Path error: {e}")
        print(f"Path error: {e}", file=sys.stderr)
        return 2


def main():
    """Main entry point for the command-line application."""
    sys.exit(run())


if __name__ == "__main__":
    main()
