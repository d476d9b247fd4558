"""Binary bundles, the posterior-samples store and site-level output files.

Bundle layout (all integers unsigned 64-bit little-endian):

    magic  b"LTPDPM01"
    u64    length of the JSON metadata, then the UTF-8 JSON text
    u64    number of entries
    per entry:
        u64 name length, name (UTF-8)
        u64 ndim, ndim x u64 shape
        float64 little-endian payload, C order
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from ltpdpm.errors import ParseError

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = b"LTPDPM01"
_U64 = np.dtype("<u8")
_F64 = np.dtype("<f8")

PathLike = Union[str, Path]


def _pack_u64(value: int) -> bytes:
    return np.array([value], dtype=_U64).tobytes()


class _Reader:
    """Sequential reader over an in-memory bundle."""

    def __init__(self, payload: bytes, path: PathLike):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n_bytes: int) -> bytes:
        end = self.offset + n_bytes
        if end > len(self.payload):
            raise ParseError(f"truncated bundle {self.path}: needed {n_bytes} bytes at offset {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u64(self) -> int:
        return int(np.frombuffer(self.take(8), dtype=_U64)[0])


def write_bundle(path: PathLike, arrays: Mapping[str, np.ndarray], metadata: Optional[Mapping[str, Any]] = None) -> Path:
    """
    Write named float64 matrices and a metadata mapping to one binary file.

    Args:
        path: Destination file
        arrays: Name -> array; integer arrays are stored as float64
        metadata: JSON-serializable mapping, written with sorted keys

    Returns:
        The path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")

    parts: List[bytes] = [BUNDLE_MAGIC, _pack_u64(len(meta_bytes)), meta_bytes, _pack_u64(len(arrays))]
    for name, array in arrays.items():
        data = np.ascontiguousarray(np.asarray(array, dtype=_F64))
        name_bytes = name.encode("utf-8")
        parts.append(_pack_u64(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_pack_u64(data.ndim))
        parts.append(np.array(data.shape, dtype=_U64).tobytes())
        parts.append(data.tobytes(order="C"))

    path.write_bytes(b"".join(parts))
    logger.debug(f"Wrote bundle {path} with {len(arrays)} arrays")
    return path


def read_bundle(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a bundle written by write_bundle.

    Returns:
        (arrays, metadata) with arrays as float64 ndarrays

    Raises:
        FileNotFoundError: If the file is missing
        ParseError: On a bad magic number or a truncated payload
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(BUNDLE_MAGIC)) != BUNDLE_MAGIC:
        raise ParseError(f"{path} is not an ltpdpm bundle (bad magic)")

    try:
        metadata = json.loads(reader.take(reader.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"corrupt metadata in {path}: {e}")

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(reader.u64()):
        name = reader.take(reader.u64()).decode("utf-8")
        ndim = reader.u64()
        shape = tuple(int(s) for s in np.frombuffer(reader.take(8 * ndim), dtype=_U64))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype=_F64).reshape(shape)
        arrays[name] = values.astype(np.float64)
    return arrays, metadata


class SamplesManifest(BaseModel):
    """JSON manifest of a chunked posterior-samples store."""
    format_version: int = 1
    n_draws: int
    chunk_size: int
    chunks: list[str]
    arrays: list[str]
    seed: int
    config: dict[str, Any]
    metadata: dict[str, Any] = {}


def write_samples_store(
    directory: PathLike,
    arrays: Mapping[str, np.ndarray],
    seed: int,
    config: Mapping[str, Any],
    chunk_size: int,
    metadata: Optional[Mapping[str, Any]] = None,
    timings: Optional[Mapping[str, float]] = None,
) -> Path:
    """
    Persist per-draw arrays (leading axis = draw) as chunked bundles plus a manifest.

    Wall-clock timings go to a separate timings.json so that the manifest and
    chunks are reproducible byte for byte.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_draws = {len(a) for a in arrays.values()}
    if len(n_draws) != 1:
        raise ValueError(f"all sample arrays need the same number of draws, got {sorted(n_draws)}")
    n_draws = n_draws.pop()

    chunk_names = []
    for index, start in enumerate(range(0, n_draws, chunk_size)):
        name = f"chunk_{index:05d}.bin"
        chunk = {key: value[start:start + chunk_size] for key, value in arrays.items()}
        write_bundle(directory / name, chunk, {"start": start})
        chunk_names.append(name)

    manifest = SamplesManifest(
        n_draws=n_draws,
        chunk_size=chunk_size,
        chunks=chunk_names,
        arrays=list(arrays.keys()),
        seed=seed,
        config=dict(config),
        metadata=dict(metadata or {}),
    )
    (directory / "manifest.json").write_text(json.dumps(manifest.model_dump(), indent=2, sort_keys=True))
    if timings is not None:
        (directory / "timings.json").write_text(json.dumps(dict(timings), indent=2, sort_keys=True))
    logger.info(f"Wrote {n_draws} draws in {len(chunk_names)} chunks to {directory}")
    return directory


def read_samples_store(directory: PathLike) -> Tuple[Dict[str, np.ndarray], SamplesManifest]:
    """Load every chunk of a samples store and concatenate along the draw axis."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"samples manifest not found: {manifest_path}")
    manifest = SamplesManifest.model_validate_json(manifest_path.read_text())

    pieces: Dict[str, List[np.ndarray]] = {name: [] for name in manifest.arrays}
    for chunk_name in manifest.chunks:
        chunk, _ = read_bundle(directory / chunk_name)
        for name in manifest.arrays:
            if name not in chunk:
                raise ParseError(f"array {name} missing from {chunk_name}")
            pieces[name].append(chunk[name])
    arrays = {name: np.concatenate(parts, axis=0) for name, parts in pieces.items()}
    return arrays, manifest


def write_site_table(path: PathLike, site_ids: Sequence, columns: Mapping[str, Iterable]) -> Path:
    """Write a CSV whose first column is site_id, followed by the given columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"site_id": list(site_ids), **{k: list(v) for k, v in columns.items()}})
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def write_site_geojson(path: PathLike, coords: np.ndarray, site_ids: Sequence, properties: Mapping[str, Iterable]) -> Path:
    """Write site values as a GeoJSON FeatureCollection of Point features."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = {key: list(values) for key, values in properties.items()}
    features = []
    for index, (lon, lat) in enumerate(np.asarray(coords, dtype=float)):
        props: Dict[str, Any] = {"site_id": _plain(site_ids[index])}
        for key, values in columns.items():
            props[key] = _plain(values[index])
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [float(lon), float(lat)]},
            "properties": props,
        })
    collection = {"type": "FeatureCollection", "features": features}
    path.write_text(json.dumps(collection, sort_keys=True))
    return path


def _plain(value: Any) -> Any:
    """Convert numpy scalars to JSON-native values."""
    if isinstance(value, np.generic):
        return value.item()
    return value


def file_sha256(path: PathLike) -> str:
    """Hex SHA-256 digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as file:
        for block in iter(lambda: file.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
