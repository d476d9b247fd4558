"""Tests for the storage module."""

import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from ltpdpm.errors import ParseError
from ltpdpm.storage import (
    BUNDLE_MAGIC,
    file_sha256,
    read_bundle,
    read_samples_store,
    write_bundle,
    write_samples_store,
    write_site_geojson,
    write_site_table,
)


class TestBundle:
    """Test the binary bundle format."""

    def test_round_trip(self, tmp_path):
        """Test arrays of several ranks and the metadata come back unchanged."""
        arrays = {
            "scalar": np.array(3.5),
            "vector": np.arange(4.0),
            "matrix": np.random.default_rng(0).normal(size=(3, 2)),
            "labels": np.array([0, 2, 1]),
        }
        path = write_bundle(tmp_path / "b.bin", arrays, {"kind": "test", "n": 3})
        loaded, metadata = read_bundle(path)
        assert metadata == {"kind": "test", "n": 3}
        assert list(loaded) == list(arrays)
        for name, array in arrays.items():
            assert loaded[name].dtype == np.float64
            assert_array_equal(loaded[name], array)

    def test_layout(self, tmp_path):
        """Test the magic number and little-endian length prefix."""
        path = write_bundle(tmp_path / "b.bin", {"x": np.ones(2)}, {})
        raw = path.read_bytes()
        assert raw[:8] == BUNDLE_MAGIC
        assert int.from_bytes(raw[8:16], "little") == 2
        assert raw[16:18] == b"{}"

    def test_bad_magic(self, tmp_path):
        """Test a foreign file is refused."""
        path = tmp_path / "foreign.bin"
        path.write_bytes(b"NOTABUNDLE" + bytes(32))
        with pytest.raises(ParseError) as exc_info:
            read_bundle(path)
        assert "bad magic" in str(exc_info.value)

    def test_truncated(self, tmp_path):
        """Test a cut-off payload is reported."""
        path = write_bundle(tmp_path / "b.bin", {"x": np.ones(10)})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ParseError) as exc_info:
            read_bundle(path)
        assert "truncated" in str(exc_info.value)

    def test_identical_bytes(self, tmp_path):
        """Test the same content writes the same bytes."""
        arrays = {"a": np.arange(6.0).reshape(2, 3)}
        first = write_bundle(tmp_path / "1.bin", arrays, {"z": 1, "a": 2})
        second = write_bundle(tmp_path / "2.bin", arrays, {"a": 2, "z": 1})
        assert file_sha256(first) == file_sha256(second)


class TestSamplesStore:
    """Test the chunked samples store."""

    def test_chunks_and_manifest(self, tmp_path):
        """Test draws split into chunks and concatenate back."""
        arrays = {"a": np.arange(10.0), "b": np.arange(30.0).reshape(10, 3)}
        write_samples_store(tmp_path / "s", arrays, seed=9, config={"n_iter": 10}, chunk_size=4, timings={"total_seconds": 1.0})
        assert sorted(p.name for p in (tmp_path / "s").glob("chunk_*.bin")) == [
            "chunk_00000.bin", "chunk_00001.bin", "chunk_00002.bin",
        ]
        loaded, manifest = read_samples_store(tmp_path / "s")
        assert (manifest.n_draws, manifest.chunk_size, manifest.seed) == (10, 4, 9)
        assert_array_equal(loaded["b"], arrays["b"])
        assert "total_seconds" not in (tmp_path / "s" / "manifest.json").read_text()

    def test_missing_manifest(self, tmp_path):
        """Test an empty directory is not a store."""
        with pytest.raises(FileNotFoundError):
            read_samples_store(tmp_path)

    def test_ragged_arrays(self, tmp_path):
        """Test arrays must share the draw axis."""
        with pytest.raises(ValueError):
            write_samples_store(tmp_path / "s", {"a": np.zeros(3), "b": np.zeros(4)}, seed=0, config={}, chunk_size=2)


class TestSiteOutputs:
    """Test the site-level CSV and GeoJSON writers."""

    def test_table(self, tmp_path):
        """Test site_id leads the columns."""
        path = write_site_table(tmp_path / "t.csv", ["s1", "s2"], {"value": np.array([1.5, 2.5])})
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["site_id", "value"]
        assert list(frame["value"]) == [1.5, 2.5]

    def test_geojson(self, tmp_path):
        """Test point features carry coordinates and native JSON values."""
        path = write_site_geojson(
            tmp_path / "g.geojson", np.array([[35.0, 21.0], [36.5, 22.0]]), [1, 2],
            {"flag": np.array([True, False]), "value": np.array([0.5, 1.0])},
        )
        collection = json.loads(path.read_text())
        assert collection["type"] == "FeatureCollection"
        second = collection["features"][1]
        assert second["geometry"] == {"type": "Point", "coordinates": [36.5, 22.0]}
        assert second["properties"] == {"site_id": 2, "flag": False, "value": 1.0}
