"""Tests for the command-line driver."""

import json
from pathlib import Path
from unittest.mock import patch

import pandas as pd
import pytest

from ltpdpm import __version__
from ltpdpm.cli import load_run_config, main, parse_override, run
from ltpdpm.errors import ConfigError
from ltpdpm.storage import file_sha256

RUN_TOML = """
[paths]
dataset = "{root}/data.csv"
dataset_format = "csv-long"
covariate = "{root}/covariate.csv"
basis = "{root}/basis.bin"
samples = "{root}/samples"
output_dir = "{root}/out"

[model]
family = "ltp-dpm"
n_components = 3
n_eofs = 3
seasonal_basis = 6
n_long = 4
n_lat = 4
prune_mass = 1.0

[mcmc]
n_iter = 120
burn_in = 10
thin = 1
seed = 3
log_every = 50
chunk_size = 40

[task]
reference_year = 1986
week = 10
return_period = 2
sites = [0, 1, 2]
u = 28.0
p = 0.9

[simulate]
n_years = 2
n_future_years = 2
"""


def write_config(root: Path) -> Path:
    path = root / "run.toml"
    path.write_text(RUN_TOML.format(root=root.as_posix()))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A simulated dataset taken through basis, fit and diagnostics."""
    root = tmp_path_factory.mktemp("pipeline")
    config = str(write_config(root))
    codes = {sub: run([sub, "-c", config]) for sub in ("simulate", "prepare-basis", "fit", "diagnose")}
    return root, config, codes


class TestOverrides:
    """Test configuration overrides."""

    def test_typed_values(self):
        """Test values are read as TOML, falling back to strings."""
        assert parse_override("mcmc.seed=7") == (["mcmc", "seed"], 7)
        assert parse_override("task.u=30.5") == (["task", "u"], 30.5)
        assert parse_override("task.sites=[1, 2]") == (["task", "sites"], [1, 2])
        assert parse_override("paths.output_dir=runs/a") == (["paths", "output_dir"], "runs/a")

    def test_malformed(self):
        """Test assignments need a section, a key and a value."""
        with pytest.raises(ConfigError):
            parse_override("seed=7")
        with pytest.raises(ConfigError):
            parse_override("mcmc.seed")

    def test_override_wins(self, tmp_path):
        """Test overrides replace file values before validation."""
        cfg = load_run_config(str(write_config(tmp_path)), ["mcmc.seed=11", "task.alpha=0.1"])
        assert cfg.mcmc.seed == 11
        assert cfg.task.alpha == 0.1
        assert cfg.model.n_components == 3


class TestRunConfig:
    """Test configuration validation."""

    def test_defaults(self):
        """Test an empty configuration is valid."""
        cfg = load_run_config(None)
        assert cfg.model.family == "ltp-dpm"
        assert cfg.mcmc_config().n_iter == 60000
        assert cfg.model.basis_config().eof_threshold == 0.01

    def test_missing_file(self, tmp_path):
        """Test a missing configuration file."""
        with pytest.raises(ConfigError) as exc_info:
            load_run_config(str(tmp_path / "absent.toml"))
        assert "not found" in str(exc_info.value)

    def test_unknown_key(self):
        """Test misspelled keys are refused."""
        with pytest.raises(ConfigError):
            load_run_config(None, ["mcmc.n_iters=10"])

    def test_unknown_family(self):
        """Test only the four model families are accepted."""
        with pytest.raises(ConfigError):
            load_run_config(None, ["model.family='gev'"])

    def test_invalid_schedule(self):
        """Test an impossible MCMC schedule is a configuration error."""
        cfg = load_run_config(None, ["mcmc.n_iter=10", "mcmc.burn_in=20"])
        with pytest.raises(ConfigError):
            cfg.mcmc_config()

    def test_sub_model(self):
        """Test the lgp family pins K and the degrees of freedom."""
        cfg = load_run_config(None, ["model.family='lgp'"])
        mcmc = cfg.mcmc_config()
        assert (mcmc.n_components, mcmc.fixed_df_tenths) == (1, 400)


class TestArguments:
    """Test argument handling and exit codes."""

    def test_version(self, capsys):
        """Test --version prints the package version."""
        assert run(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_unknown_subcommand(self, capsys):
        """Test an unknown subcommand is a usage error."""
        assert run(["plot"]) == 2
        assert "invalid choice" in capsys.readouterr().err

    def test_threads(self, tmp_path, capsys):
        """Test --threads must be positive."""
        assert run(["simulate", "-c", str(write_config(tmp_path)), "--threads", "0"]) == 2
        assert "--threads" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        """Test a missing configuration file exits with 2."""
        assert run(["fit", "-c", str(tmp_path / "absent.toml")]) == 2
        assert "Configuration error" in capsys.readouterr().err

    def test_missing_input(self, tmp_path, capsys):
        """Test a fit without a dataset on disk exits with 2."""
        config = str(write_config(tmp_path))
        assert run(["fit", "-c", config]) == 2
        assert "paths.dataset" in capsys.readouterr().err

    def test_main_exits(self, tmp_path):
        """Test main passes the exit status to sys.exit."""
        config = str(write_config(tmp_path))
        with patch("sys.argv", ["ltpdpm", "simulate", "-c", config]):
            with pytest.raises(SystemExit) as exc_info:
                main()
        assert exc_info.value.code == 0
        assert (tmp_path / "data.csv").exists()


class TestPipeline:
    """Test the subcommands end to end."""

    def test_stages_succeed(self, pipeline):
        """Test every stage exits with 0 and writes its artifacts."""
        root, _, codes = pipeline
        assert codes == {"simulate": 0, "prepare-basis": 0, "fit": 0, "diagnose": 0}
        for name in ("data.csv", "covariate.csv", "basis.bin", "samples/manifest.json", "out/truth_parameters.bin"):
            assert (root / name).exists(), name
        diag = pd.read_csv(root / "out" / "diagnostics.csv")
        assert "log_posterior" in set(diag["parameter"])
        weights = pd.read_csv(root / "out" / "ordered_weights.csv")
        assert list(weights.columns) == ["draw", "w1", "w2", "w3"]
        assert len(weights) == 110

    def test_manifest(self, pipeline):
        """Test each stage records its seed, version and hashes."""
        root, _, _ = pipeline
        runs = json.loads((root / "out" / "run_manifest.json").read_text())
        assert {"simulate", "prepare-basis", "fit", "diagnose"} <= set(runs)
        fit = runs["fit"]
        assert fit["seed"] == 3
        assert fit["version"] == __version__
        manifest = str(root / "samples" / "manifest.json")
        assert fit["outputs"][manifest] == file_sha256(manifest)

    def test_predict(self, pipeline):
        """Test predictive maps, rates, return levels and exceedance output."""
        root, config, _ = pipeline
        assert run(["predict", "-c", config]) == 0
        out = root / "out"
        mean = pd.read_csv(out / "predictive_mean.csv")
        assert list(mean.columns) == ["site_id", "value", "mc_se", "sd"]
        assert len(mean) == 20
        for name in ("predictive_mean.geojson", "decadal_rate.csv", "decadal_rate_overall.csv", "return_level.csv"):
            assert (out / name).exists(), name
        curve = pd.read_csv(out / "exceedance.csv")
        assert set(curve["kind"]) == {"fixed", "quantile"}
        assert curve["probability"].between(0, 1).all()

    def test_hotspot(self, pipeline):
        """Test a hotspot run at a projected week."""
        root, config, _ = pipeline
        assert run(["hotspot", "-c", config, "--t0", "150", "--alpha", "0.1"]) == 0
        summary = json.loads((root / "out" / "hotspot_summary.json").read_text())
        assert summary["t0"] == 150
        assert summary["alpha"] == 0.1
        assert summary["n_sites"] == 20

    def test_unreachable_hotspot(self, pipeline, capsys):
        """Test an unreachable threshold exits with 1."""
        _, config, _ = pipeline
        assert run(["hotspot", "-c", config, "--u", "1e9"]) == 1
        assert "no predictive draw exceeds" in capsys.readouterr().err

    def test_hotspot_needs_threshold(self, pipeline, tmp_path, capsys):
        """Test hotspot without task.u is a configuration error."""
        root, _, _ = pipeline
        config = tmp_path / "no_u.toml"
        config.write_text(RUN_TOML.format(root=root.as_posix()).replace("u = 28.0\n", ""))
        assert run(["hotspot", "-c", str(config)]) == 2
        assert "task.u" in capsys.readouterr().err

    def test_deterministic_rerun(self, pipeline, tmp_path):
        """Test the same seed reproduces the dataset and the samples byte for byte."""
        root, _, _ = pipeline
        config = str(write_config(tmp_path))
        assert run(["simulate", "-c", config]) == 0
        assert run(["prepare-basis", "-c", config]) == 0
        assert run(["fit", "-c", config]) == 0
        for name in ("data.csv", "basis.bin", "samples/chunk_00000.bin", "samples/manifest.json"):
            assert file_sha256(root / name) == file_sha256(tmp_path / name), name
