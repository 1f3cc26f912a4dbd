# File: geosurge/datakit.py
"""
On-disk formats and the synthetic dataset generator.

Blob record (little-endian)::

    b"GSRG" | u16 version | u8 dtype code | u8 ndim | ndim x u32 shape | payload

A blob file is a concatenation of records addressed by byte offset.

Checkpoint::

    b"GSCK" | u16 version | u32 header length | JSON header | blob records

The header carries the effective config, the hierarchy hash, the embedding
row orders and, per tensor, its offset relative to the end of the header.

Manifest: JSON lines, one :class:`ManifestRecord` per line.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import FusionConfig, SyntheticConfig
from .errors import (
    BadMagicError, BlobShapeError, ConfigError, DataError, IntegrityError, TruncatedPayloadError,
    VersionMismatchError,
)
from .geodesy import EARTH_RADIUS_KM, GeoPoint, random_points

logger = logging.getLogger(__name__)

BLOB_MAGIC = b"GSRG"
BLOB_VERSION = 1
CHECKPOINT_MAGIC = b"GSCK"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("u1"),
    6: np.dtype("<u2"),
}
_CODE_OF = {(dt.kind, dt.itemsize): code for code, dt in _DTYPE_CODES.items()}

_BLOB_HEAD = struct.Struct("<4sHBB")
_CKPT_HEAD = struct.Struct("<4sHI")


# -----------------------------------------------------------------------------
# Blob records
# -----------------------------------------------------------------------------

def encode_blob(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    code = _CODE_OF.get((a.dtype.kind, a.dtype.itemsize))
    if code is None:
        raise DataError(f"Unsupported blob dtype {a.dtype}")
    if a.ndim > 255:
        raise DataError("Too many dimensions for a blob")
    head = _BLOB_HEAD.pack(BLOB_MAGIC, BLOB_VERSION, code, a.ndim)
    shape = struct.pack(f"<{a.ndim}I", *a.shape)
    return head + shape + np.ascontiguousarray(a, dtype=_DTYPE_CODES[code]).tobytes()


def decode_blob(buf: bytes, offset: int, path="<memory>") -> Tuple[np.ndarray, int]:
    """Decode the record at ``offset``; returns (array, offset of the next record)."""
    if offset < 0 or offset + _BLOB_HEAD.size > len(buf):
        raise TruncatedPayloadError(path, offset, "record header past end of file")
    magic, version, code, ndim = _BLOB_HEAD.unpack_from(buf, offset)
    if magic != BLOB_MAGIC:
        raise BadMagicError(path, offset, f"expected {BLOB_MAGIC!r}, found {magic!r}")
    if version != BLOB_VERSION:
        raise VersionMismatchError(path, offset, f"version {version}, reader supports {BLOB_VERSION}")
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise DataError(f"format error in {path} at offset {offset}: unknown dtype code {code}")
    pos = offset + _BLOB_HEAD.size
    if pos + 4 * ndim > len(buf):
        raise TruncatedPayloadError(path, offset, "shape past end of file")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    nbytes = math.prod(shape) * dtype.itemsize
    if pos + nbytes > len(buf):
        raise TruncatedPayloadError(path, offset, f"need {nbytes} payload bytes, {len(buf) - pos} left")
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(shape), offset=pos).reshape(shape).copy()
    return arr, pos + nbytes


class BlobWriter:
    """Appends blob records to one file; ``append`` returns the record offset."""

    def __init__(self, path):
        self.path = str(path)
        self._f = None
        self._offset = 0

    def __enter__(self) -> BlobWriter:
        self._f = open(self.path, "wb")
        return self

    def __exit__(self, exc_type, exc, tb):
        self._f.close()
        logger.debug("wrote %d bytes of blobs to %s", self._offset, self.path)
        return False

    def append(self, arr: np.ndarray) -> int:
        record = encode_blob(arr)
        offset = self._offset
        self._f.write(record)
        self._offset += len(record)
        return offset


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e


class BlobReader:
    """Reads records from one blob file; the file is loaded once."""

    def __init__(self, path):
        self.path = str(path)
        self._buf = _read_bytes(path)

    def read(self, offset: int, shape: Optional[Sequence[int]] = None) -> np.ndarray:
        arr, _ = decode_blob(self._buf, offset, self.path)
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise BlobShapeError(self.path, offset, f"declared {tuple(shape)}, stored {arr.shape}")
        return arr

    def __iter__(self) -> Iterator[Tuple[int, np.ndarray]]:
        offset = 0
        while offset < len(self._buf):
            arr, nxt = decode_blob(self._buf, offset, self.path)
            yield offset, arr
            offset = nxt


def read_blob(path, offset: int = 0, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    return BlobReader(path).read(offset, shape)


def write_blobs(path, arrays: Sequence[np.ndarray]) -> List[int]:
    with BlobWriter(path) as w:
        return [w.append(a) for a in arrays]


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    hierarchy_hash: str = ""
    cell_orders: Dict[str, List[str]] = field(default_factory=dict)
    objective: str = "contrastive"


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    body = bytearray()
    index = {}
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        index[name] = {"offset": len(body), "shape": list(arr.shape)}
        body += encode_blob(arr)
    header = json.dumps({
        "cells": ckpt.cell_orders,
        "config": ckpt.config,
        "hierarchy_hash": ckpt.hierarchy_hash,
        "objective": ckpt.objective,
        "tensors": index,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(bytes(body))
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(index))


def read_checkpoint(path, expected: Optional[Dict[str, Tuple[int, ...]]] = None) -> Checkpoint:
    """
    Load every tensor. With ``expected`` (name -> shape) a missing name raises
    IntegrityError listing all missing names, a wrong shape BlobShapeError.
    """
    path = str(path)
    buf = _read_bytes(path)
    if len(buf) < _CKPT_HEAD.size:
        raise TruncatedPayloadError(path, 0, "checkpoint header past end of file")
    magic, version, header_len = _CKPT_HEAD.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(path, 0, f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(path, 0, f"version {version}, reader supports {CHECKPOINT_VERSION}")
    start = _CKPT_HEAD.size
    if start + header_len > len(buf):
        raise TruncatedPayloadError(path, start, "checkpoint header longer than file")
    try:
        header = json.loads(buf[start:start + header_len].decode("utf-8"))
        entries = {name: (int(e["offset"]), [int(s) for s in e["shape"]]) for name, e in header["tensors"].items()}
        if not isinstance(header.get("cells", {}), dict) or not isinstance(header.get("config", {}), dict):
            raise TypeError("cells and config must be objects")
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, AttributeError) as e:
        raise DataError(f"format error in {path} at offset {start}: bad checkpoint header ({e})") from e
    base = start + header_len
    tensors = {}
    for name, (rel, shape) in entries.items():
        offset = base + rel
        arr, _ = decode_blob(buf, offset, path)
        if list(arr.shape) != shape:
            raise BlobShapeError(path, offset, f"{name}: header {shape}, stored {list(arr.shape)}")
        tensors[name] = arr
    if expected is not None:
        missing = sorted(set(expected) - set(tensors))
        if missing:
            raise IntegrityError(f"Checkpoint {path} is missing tensor(s): {', '.join(missing)}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != tuple(shape):
                offset = base + entries[name][0]
                raise BlobShapeError(path, offset, f"{name}: expected {tuple(shape)}, stored {tensors[name].shape}")
    return Checkpoint(
        tensors=tensors,
        config=header.get("config", {}),
        hierarchy_hash=header.get("hierarchy_hash", ""),
        cell_orders=header.get("cells", {}),
        objective=header.get("objective", "contrastive"),
    )


def checkpoint_from_model(model, config: Dict[str, Any], hierarchy_hash: str) -> Checkpoint:
    return Checkpoint(
        tensors={name: p.data.copy() for name, p in model.named_params().items()},
        config=config,
        hierarchy_hash=hierarchy_hash,
        cell_orders=model.representation.cell_orders(),
        objective=model.representation.objective,
    )


def model_from_checkpoint(ckpt: Checkpoint, hierarchy=None, hierarchy_hash: Optional[str] = None):
    """
    Rebuild a :class:`~geosurge.trainer.GeoSurgeModel`.

    When a hierarchy hash is given it must equal the one recorded at training time.
    """
    from .fusion import fusion_params_from_tensors
    from .geoembed import representation_from_tensors
    from .trainer import GeoSurgeModel

    if hierarchy_hash is not None and ckpt.hierarchy_hash != hierarchy_hash:
        raise IntegrityError(
            f"Checkpoint was trained on hierarchy {ckpt.hierarchy_hash[:12]}, got {hierarchy_hash[:12]}")
    try:
        fusion_config = FusionConfig(**ckpt.config.get("fusion", {}))
    except TypeError as e:
        raise IntegrityError(f"Checkpoint config has an unusable fusion section: {e}") from e
    dtype = np.dtype(ckpt.config.get("train", {}).get("precision", "float32")).type
    fusion = fusion_params_from_tensors(fusion_config, ckpt.tensors, dtype)
    rep = representation_from_tensors(ckpt.tensors, ckpt.cell_orders, ckpt.objective, dtype)
    if hierarchy is not None:
        rep.check_cells(hierarchy)
    return GeoSurgeModel(fusion, rep)


# -----------------------------------------------------------------------------
# Manifest
# -----------------------------------------------------------------------------

def _blob_ref(ref: Dict[str, Any], dims: Tuple[str, str]) -> Dict[str, Any]:
    """Validated {file, offset, *dims}; offset and dims must be non-negative integers."""
    if not isinstance(ref["file"], str) or not ref["file"]:
        raise TypeError(f"blob file must be a non-empty string, got {ref['file']!r}")
    out: Dict[str, Any] = {"file": ref["file"]}
    for key in ("offset",) + dims:
        value = ref[key]
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ValueError(f"blob {key} must be a non-negative integer, got {value!r}")
        out[key] = value
    return out


@dataclass
class ManifestRecord:
    """
    ``rgb_blob`` = {file, offset, rows, cols}; ``seg_blob`` = {file, offset, H, W}.
    Blob paths are relative to the manifest's directory.
    """
    id: str
    lat: float
    lon: float
    rgb_blob: Dict[str, Any]
    seg_blob: Dict[str, Any]
    split: str = "train"
    cluster: Optional[int] = None
    query: Optional[str] = None

    @property
    def location(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)

    @property
    def query_id(self) -> str:
        return self.query if self.query is not None else self.id

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        for optional in ("cluster", "query"):
            if d[optional] is None:
                del d[optional]
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> ManifestRecord:
        try:
            rec = cls(
                id=str(data["id"]),
                lat=float(data["lat"]),
                lon=float(data["lon"]),
                rgb_blob=_blob_ref(data["rgb_blob"], ("rows", "cols")),
                seg_blob=_blob_ref(data["seg_blob"], ("H", "W")),
                split=str(data.get("split", "train")),
                cluster=data.get("cluster"),
                query=data.get("query"),
            )
            GeoPoint(rec.lat, rec.lon)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed manifest record: {e}") from e
        return rec


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    logger.debug("wrote %d manifest records to %s", len(records), path)


def read_manifest(path) -> List[ManifestRecord]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(ManifestRecord.from_dict(json.loads(line)))
                except ValueError as e:
                    raise DataError(f"{path} line {lineno}: {e}") from e
    except OSError as e:
        raise DataError(f"Cannot read manifest {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise DataError(f"Manifest {path} is not UTF-8 text: {e}") from e
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"Manifest {path} has duplicate ids")
    return records


def load_arrays(records: Sequence[ManifestRecord], base_dir, split: Optional[str] = None
                ) -> Tuple[List[ManifestRecord], np.ndarray, np.ndarray]:
    """Stack the RGB tokens (N, R, d) and segmentation maps (N, H, W) of the selected records."""
    chosen = [r for r in records if split is None or r.split == split]
    readers: Dict[str, BlobReader] = {}

    def reader(name: str) -> BlobReader:
        if name not in readers:
            readers[name] = BlobReader(os.path.join(base_dir, name))
        return readers[name]

    rgb, seg = [], []
    for r in chosen:
        rb, sb = r.rgb_blob, r.seg_blob
        rgb.append(reader(rb["file"]).read(int(rb["offset"]), (int(rb["rows"]), int(rb["cols"]))))
        seg.append(reader(sb["file"]).read(int(sb["offset"]), (int(sb["H"]), int(sb["W"]))))
    if not chosen:
        return chosen, np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.int64)
    if len({a.shape for a in rgb}) != 1 or len({a.shape for a in seg}) != 1:
        raise DataError("Records of one split must share RGB token and segmentation shapes")
    return chosen, np.stack(rgb), np.stack(seg).astype(np.int64)


# -----------------------------------------------------------------------------
# Splitting
# -----------------------------------------------------------------------------

def _cut_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(x)) for x in raw]
    by_remainder = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in by_remainder[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split(records: Sequence[ManifestRecord], fractions: Dict[str, float], seed: int) -> List[ManifestRecord]:
    """
    Tag every record with a split name. Records are spread evenly across the
    splits within each cluster; sizes follow the fractions with largest-remainder rounding.
    """
    if not fractions or any(f <= 0 for f in fractions.values()):
        raise ConfigError("split fractions must be positive")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    n = len(records)
    names = list(fractions)
    sizes = _cut_sizes(n, [fractions[k] for k in names])
    empty = [name for name, size in zip(names, sizes) if size == 0]
    if empty:
        raise DataError(f"split {', '.join(empty)} would be empty for {n} records")

    rng = np.random.default_rng(seed)
    order = sorted(range(n), key=lambda k: records[k].id)
    groups: Dict[Any, List[int]] = {}
    for k in order:
        groups.setdefault(records[k].cluster, []).append(k)
    key = np.zeros(n)
    for members in groups.values():
        perm = rng.permutation(len(members))
        for rank, k in zip(perm, members):
            key[k] = (rank + 0.5) / len(members)
    tiebreak = np.zeros(n)
    tiebreak[order] = rng.random(n)
    ranked = sorted(range(n), key=lambda k: (key[k], tiebreak[k]))

    tags = [""] * n
    start = 0
    for name, size in zip(names, sizes):
        for k in ranked[start:start + size]:
            tags[k] = name
        start += size
    out = []
    for r, tag in zip(records, tags):
        d = r.to_dict()
        d["split"] = tag
        out.append(ManifestRecord.from_dict(d))
    return out


# -----------------------------------------------------------------------------
# Ground truth
# -----------------------------------------------------------------------------

def write_points_csv(path, rows: Sequence[Tuple[str, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["query_id", "lat", "lon"])
        for qid, lat, lon in rows:
            writer.writerow([qid, repr(float(lat)), repr(float(lon))])


def truth_rows(records: Sequence[ManifestRecord]) -> List[Tuple[str, float, float]]:
    """One row per query; records sharing a query id must share a location."""
    rows: Dict[str, Tuple[str, float, float]] = {}
    for r in records:
        row = (r.query_id, r.lat, r.lon)
        if rows.setdefault(r.query_id, row) != row:
            raise DataError(f"Query {r.query_id} has records at different locations")
    return list(rows.values())


# -----------------------------------------------------------------------------
# Synthetic generator
# -----------------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    records: List[ManifestRecord]
    manifest_path: str
    blob_path: str
    truth_path: str


def _scatter(rng: np.random.Generator, center: GeoPoint, n: int, spread_km: float) -> np.ndarray:
    """Unit vectors scattered around ``center`` with a tangent-plane Gaussian of ``spread_km``."""
    c = np.array(center.to_unit().as_tuple())
    helper = np.array([0.0, 0.0, 1.0]) if abs(c[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(c, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(c, e1)
    offsets = rng.normal(0.0, spread_km / EARTH_RADIUS_KM, size=(n, 2))
    pts = c + offsets[:, :1] * e1 + offsets[:, 1:] * e2
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def generate_synthetic(config: SyntheticConfig, out_dir, seed: Optional[int] = None) -> SyntheticDataset:
    """
    Clustered geotagged samples whose features are informative of location.

    Token row r of a sample at unit vector u in cluster c is
    A u + signature_c + pattern_r + noise; its segmentation map is the
    cluster's patch class layout with a ``seg_flip`` fraction of pixels relabeled.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    rows = config.rgb_tokens + 1
    d = config.kv_dim
    ps = config.patch_size
    gh, gw = config.seg_height // ps, config.seg_width // ps

    centers = random_points(rng, config.n_clusters)
    lift = rng.normal(0.0, 1.0, size=(3, d))
    signatures = rng.normal(0.0, config.signature_scale, size=(config.n_clusters, d))
    pattern = rng.normal(0.0, 0.1, size=(rows, d))
    layouts = rng.integers(0, config.num_classes, size=(config.n_clusters, gh, gw))

    blob_name = "features.bin"
    records: List[ManifestRecord] = []
    with BlobWriter(os.path.join(out_dir, blob_name)) as blobs:
        for c, center in enumerate(centers):
            units = _scatter(rng, center, config.samples_per_cluster, config.spread_km)
            base_seg = np.repeat(np.repeat(layouts[c], ps, axis=0), ps, axis=1)
            for s, u in enumerate(units):
                tokens = (u @ lift) + signatures[c] + pattern + rng.normal(0.0, config.noise_sigma, size=(rows, d))
                seg = base_seg.copy()
                flip = rng.random(seg.shape) < config.seg_flip
                seg[flip] = rng.integers(0, config.num_classes, size=int(flip.sum()))
                rgb_off = blobs.append(tokens.astype(np.float32))
                seg_off = blobs.append(seg.astype(np.uint8))
                lat = float(np.degrees(np.arcsin(np.clip(u[2], -1.0, 1.0))))
                lon = float(np.degrees(np.arctan2(u[1], u[0])))
                p = GeoPoint(lat, lon)
                records.append(ManifestRecord(
                    id=f"s{c:04d}_{s:05d}",
                    lat=p.lat,
                    lon=p.lon,
                    rgb_blob={"file": blob_name, "offset": rgb_off, "rows": rows, "cols": d},
                    seg_blob={"file": blob_name, "offset": seg_off, "H": config.seg_height, "W": config.seg_width},
                    cluster=c,
                ))
    records = split(records, config.splits, seed)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    truth_path = os.path.join(out_dir, "truth.csv")
    write_manifest(manifest_path, records)
    write_points_csv(truth_path, truth_rows(records))
    logger.info("synthetic dataset: %d records in %d clusters at %s", len(records), config.n_clusters, out_dir)
    return SyntheticDataset(records, manifest_path, os.path.join(out_dir, blob_name), truth_path)
