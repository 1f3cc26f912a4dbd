# File: geosurge/partition.py
from __future__ import annotations

import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, GeoSurgeError, IntegrityError
from .geodesy import MAX_DEPTH, CellId, GeoPoint, leaf_cells_array
from .inference import decode_location

logger = logging.getLogger(__name__)

HIERARCHY_FORMAT = "geosurge-hierarchy"
HIERARCHY_VERSION = 1


@dataclass(frozen=True)
class Sample:
    """A geotagged training record; ``feature_ref`` points into the feature store."""
    id: str
    location: GeoPoint
    feature_ref: Optional[str] = None
    cluster: Optional[int] = None


@dataclass(frozen=True)
class GeoCell:
    cell_id: CellId
    member_count: int
    member_ids: Optional[Tuple[str, ...]] = None
    decoded_location: Optional[GeoPoint] = None


class Partition:
    """
    A balanced set of non-overlapping geocells, the partition rho(tau_min, tau_max).

    Cells are kept in canonical CellId order; that order is the row order of
    the level's embedding matrix.
    """

    def __init__(self, tau_min: int, tau_max: int, cells: Iterable[GeoCell]):
        self.tau_min = int(tau_min)
        self.tau_max = int(tau_max)
        self.cells: Tuple[GeoCell, ...] = tuple(sorted(cells, key=lambda c: c.cell_id))
        self._index: Dict[CellId, int] = {c.cell_id: k for k, c in enumerate(self.cells)}
        if len(self._index) != len(self.cells):
            raise IntegrityError("Partition contains duplicate cells")
        self.max_depth = max((c.cell_id.depth for c in self.cells), default=0)

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, cell: CellId) -> bool:
        return cell in self._index

    @property
    def cell_ids(self) -> Tuple[CellId, ...]:
        return tuple(c.cell_id for c in self.cells)

    def index_of(self, cell: CellId) -> int:
        try:
            return self._index[cell]
        except KeyError:
            raise GeoSurgeError(f"Cell {cell} is not part of this partition") from None

    def cell(self, cell: CellId) -> GeoCell:
        return self.cells[self.index_of(cell)]

    def assign(self, p: GeoPoint) -> Optional[CellId]:
        face, i, j = leaf_cells_array(p.lat, p.lon)
        return self._assign_leaf(int(face[0]), int(i[0]), int(j[0]))

    def _assign_leaf(self, face: int, i: int, j: int) -> Optional[CellId]:
        for cell in _prefix_cells(face, i, j, self.max_depth):
            if cell in self._index:
                return cell
        return None

    def assign_many(self, lats, lons) -> List[Optional[CellId]]:
        faces, iis, jjs = leaf_cells_array(lats, lons)
        return [self._assign_leaf(int(f), int(i), int(j)) for f, i, j in zip(faces, iis, jjs)]

    def check_balance(self) -> None:
        for c in self.cells:
            if not self.tau_min <= c.member_count <= self.tau_max:
                raise IntegrityError(
                    f"Cell {c.cell_id} holds {c.member_count} samples, outside [{self.tau_min}, {self.tau_max}]")


def _prefix_cells(face: int, i: int, j: int, max_depth: int) -> Iterator[CellId]:
    path: List[int] = []
    yield CellId(face)
    for level in range(1, max_depth + 1):
        shift = MAX_DEPTH - level
        path.append(((i >> shift) & 1) | (((j >> shift) & 1) << 1))
        yield CellId(face, tuple(path))


def assign(p: GeoPoint, partition: Partition) -> Optional[CellId]:
    """The unique kept cell containing ``p``, or None in discarded territory."""
    return partition.assign(p)


# -----------------------------------------------------------------------------
# Construction
# -----------------------------------------------------------------------------

class _SampleIndex:
    """Samples sorted by id with their depth-30 leaf coordinates."""

    def __init__(self, samples: Iterable[Sample]):
        ordered = sorted(samples, key=lambda s: s.id)
        if not ordered:
            raise GeoSurgeError("no samples")
        ids = [s.id for s in ordered]
        if len(set(ids)) != len(ids):
            raise GeoSurgeError("Sample ids must be unique")
        self.samples = ordered
        self.face, self.i, self.j = leaf_cells_array(
            [s.location.lat for s in ordered], [s.location.lon for s in ordered])

    def split(self, tau_max: int) -> List[Tuple[CellId, np.ndarray]]:
        """Leaves of the subdivision tree where every leaf holds <= tau_max samples."""
        out: List[Tuple[CellId, np.ndarray]] = []
        everyone = np.arange(len(self.samples))
        for f in range(6):
            self._recurse(CellId(f), everyone[self.face == f], tau_max, out)
        return out

    def _recurse(self, cell: CellId, members: np.ndarray, tau_max: int, out: list) -> None:
        if members.size == 0:
            return
        if members.size <= tau_max:
            out.append((cell, members))
            return
        if cell.depth == MAX_DEPTH:
            raise GeoSurgeError(
                f"Cell {cell} still holds {members.size} > {tau_max} samples at depth {MAX_DEPTH}; "
                "too many duplicate coordinates")
        shift = MAX_DEPTH - cell.depth - 1
        digit = ((self.i[members] >> shift) & 1) | (((self.j[members] >> shift) & 1) << 1)
        for d in range(4):
            self._recurse(cell.child(d), members[digit == d], tau_max, out)

    def make_partition(self, tau_min: int, tau_max: int) -> Partition:
        cells = []
        for cell, members in self.split(tau_max):
            # counts decide splitting before the tau_min filter runs
            if members.size < tau_min:
                continue
            picked = [self.samples[k] for k in members]
            cells.append(GeoCell(
                cell_id=cell,
                member_count=len(picked),
                member_ids=tuple(s.id for s in picked),
                decoded_location=decode_location(cell, [s.location for s in picked]),
            ))
        return Partition(tau_min, tau_max, cells)


def _check_bounds(tau_min: int, tau_max: int) -> None:
    if tau_min < 1:
        raise GeoSurgeError(f"tau_min must be >= 1, got {tau_min}")
    if tau_max < tau_min:
        raise GeoSurgeError(f"tau_max {tau_max} must be >= tau_min {tau_min}")


def build_partition(samples: Iterable[Sample], tau_min: int, tau_max: int) -> Partition:
    _check_bounds(tau_min, tau_max)
    return _SampleIndex(samples).make_partition(tau_min, tau_max)


@dataclass
class PartitionHierarchy:
    """
    Partitions ordered coarsest -> finest with a shared tau_min.

    ``parent_links`` maps every finest cell to its ancestor at each level
    (the last entry is the finest cell itself).
    """
    levels: List[Partition]
    tau_min: int
    parent_links: Dict[CellId, Tuple[CellId, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.parent_links:
            self.parent_links = _link(self.levels)
        self._ancestor_rows: Optional[List[np.ndarray]] = None

    @property
    def schedule(self) -> List[int]:
        return [p.tau_max for p in self.levels]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> Partition:
        return self.levels[-1]

    def ancestors(self, cell: CellId) -> Tuple[CellId, ...]:
        try:
            return self.parent_links[cell]
        except KeyError:
            raise IntegrityError(f"No parent links for finest cell {cell}") from None

    def ancestor_rows(self) -> List[np.ndarray]:
        """Per level, the row index of each finest cell's ancestor (finest canonical order)."""
        if self._ancestor_rows is None:
            rows = []
            for l, level in enumerate(self.levels):
                rows.append(np.array(
                    [level.index_of(self.ancestors(c)[l]) for c in self.finest.cell_ids], dtype=np.int64))
            self._ancestor_rows = rows
        return self._ancestor_rows

    def trainable_ids(self) -> set:
        """Sample ids inside kept finest cells; only these are defined at every level."""
        ids = set()
        for c in self.finest.cells:
            if c.member_ids is None:
                raise IntegrityError("Hierarchy was stored without member ids")
            ids.update(c.member_ids)
        return ids

    def trainable_mask(self, ids: Sequence[str]) -> np.ndarray:
        """True where the sample id survives in a kept finest cell."""
        keep = self.trainable_ids()
        return np.array([i in keep for i in ids], dtype=bool)

    def cell_indices(self, p: GeoPoint) -> Optional[Tuple[int, ...]]:
        """Row index per level for a point, or None when its finest cell was discarded."""
        finest = self.finest.assign(p)
        if finest is None:
            return None
        return tuple(level.index_of(a) for level, a in zip(self.levels, self.ancestors(finest)))


def _link(levels: Sequence[Partition]) -> Dict[CellId, Tuple[CellId, ...]]:
    links: Dict[CellId, Tuple[CellId, ...]] = {}
    if not levels:
        return links
    for cell in levels[-1].cell_ids:
        chain = []
        for level in levels:
            found = [cell.ancestor_at(d) for d in range(cell.depth + 1) if cell.ancestor_at(d) in level]
            if len(found) != 1:
                raise IntegrityError(f"Finest cell {cell} has {len(found)} ancestors at tau_max={level.tau_max}")
            chain.append(found[0])
        links[cell] = tuple(chain)
    return links


def _check_schedule(tau_min: int, schedule: Sequence[int]) -> None:
    if not schedule:
        raise GeoSurgeError("tau_max schedule must not be empty")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise GeoSurgeError(f"tau_max schedule must be strictly decreasing, got {list(schedule)}")
    for t in schedule:
        _check_bounds(tau_min, t)


def build_hierarchy(samples: Iterable[Sample], tau_min: int, tau_max_schedule: Sequence[int]) -> PartitionHierarchy:
    schedule = [int(t) for t in tau_max_schedule]
    _check_schedule(tau_min, schedule)
    index = _SampleIndex(samples)
    levels = []
    for tau_max in schedule:
        level = index.make_partition(tau_min, tau_max)
        logger.info("partition tau_max=%d: %d cells", tau_max, len(level))
        levels.append(level)
    return PartitionHierarchy(levels=levels, tau_min=tau_min)


def select_levels(h: PartitionHierarchy, indices: Sequence[int]) -> PartitionHierarchy:
    """Sub-hierarchy keeping the given level indices (coarse -> fine order preserved)."""
    picked = sorted(set(int(i) for i in indices))
    if not picked or picked[0] < 0 or picked[-1] >= h.depth:
        raise GeoSurgeError(f"Level indices {list(indices)} out of range for {h.depth} levels")
    return PartitionHierarchy(levels=[h.levels[i] for i in picked], tau_min=h.tau_min)


# -----------------------------------------------------------------------------
# Diagnostics
# -----------------------------------------------------------------------------

@dataclass
class LevelStats:
    tau_max: int
    cells: int
    min_members: int
    median_members: float
    max_members: int
    covered_fraction: float


@dataclass
class CoverageReport:
    tau_min: int
    levels: List[LevelStats]
    samples: int
    covered_all_levels: float
    excluded_from_training: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tau_min": self.tau_min,
            "samples": self.samples,
            "covered_all_levels": self.covered_all_levels,
            "excluded_from_training": self.excluded_from_training,
            "levels": [vars(s) for s in self.levels],
        }


def coverage_report(h: PartitionHierarchy, samples: Sequence[Sample]) -> CoverageReport:
    lats = [s.location.lat for s in samples]
    lons = [s.location.lon for s in samples]
    n = len(samples)
    covered_every = np.ones(n, dtype=bool)
    stats = []
    for level in h.levels:
        hits = np.array([c is not None for c in level.assign_many(lats, lons)], dtype=bool) if n else np.zeros(0, bool)
        covered_every &= hits
        counts = [c.member_count for c in level.cells]
        stats.append(LevelStats(
            tau_max=level.tau_max,
            cells=len(level),
            min_members=min(counts, default=0),
            median_members=float(statistics.median(counts)) if counts else 0.0,
            max_members=max(counts, default=0),
            covered_fraction=float(hits.mean()) if n else 0.0,
        ))
    covered = float(covered_every.mean()) if n else 0.0
    return CoverageReport(
        tau_min=h.tau_min,
        levels=stats,
        samples=n,
        covered_all_levels=covered,
        excluded_from_training=int(n - covered_every.sum()),
    )


# -----------------------------------------------------------------------------
# JSON document
# -----------------------------------------------------------------------------

def hierarchy_to_dict(h: PartitionHierarchy, include_members: bool = True,
                      config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    levels = []
    for level in h.levels:
        cells = []
        for c in level.cells:
            entry: Dict[str, Any] = {
                "cell_id": c.cell_id.token(),
                "member_count": c.member_count,
                "decoded_location": None if c.decoded_location is None
                else [c.decoded_location.lat, c.decoded_location.lon],
            }
            if include_members and c.member_ids is not None:
                entry["member_ids"] = list(c.member_ids)
            cells.append(entry)
        levels.append({"tau_max": level.tau_max, "cells": cells})
    return {
        "format": HIERARCHY_FORMAT,
        "version": HIERARCHY_VERSION,
        "tau_min": h.tau_min,
        "schedule": h.schedule,
        "levels": levels,
        "parent_links": {c.token(): [a.token() for a in chain] for c, chain in sorted(h.parent_links.items())},
        "config": config or {},
    }


def hierarchy_from_dict(data: Dict[str, Any]) -> PartitionHierarchy:
    if not isinstance(data, dict):
        raise DataError(f"Hierarchy document must be a JSON object, got {type(data).__name__}")
    if data.get("format") != HIERARCHY_FORMAT:
        raise DataError(f"Not a hierarchy document (format={data.get('format')!r})")
    if data.get("version") != HIERARCHY_VERSION:
        raise DataError(f"Unsupported hierarchy version {data.get('version')}")
    try:
        tau_min = int(data["tau_min"])
        levels = []
        for entry in data["levels"]:
            cells = []
            for c in entry["cells"]:
                loc = c.get("decoded_location")
                members = c.get("member_ids")
                cells.append(GeoCell(
                    cell_id=CellId.parse(c["cell_id"]),
                    member_count=int(c["member_count"]),
                    member_ids=tuple(members) if members is not None else None,
                    decoded_location=GeoPoint(loc[0], loc[1]) if loc is not None else None,
                ))
            level = Partition(tau_min, int(entry["tau_max"]), cells)
            level.check_balance()
            levels.append(level)
        links = {CellId.parse(k): tuple(CellId.parse(a) for a in v)
                 for k, v in data.get("parent_links", {}).items()}
    except GeoSurgeError:
        raise
    except (KeyError, TypeError, IndexError, ValueError, AttributeError) as e:
        raise DataError(f"Malformed hierarchy document: {e!r}") from e
    _check_schedule(tau_min, [p.tau_max for p in levels])
    h = PartitionHierarchy(levels=levels, tau_min=tau_min)
    if links and links != h.parent_links:
        raise IntegrityError("Stored parent links disagree with the partition cells")
    return h


def hierarchy_to_json(h: PartitionHierarchy, include_members: bool = True,
                      config: Optional[Dict[str, Any]] = None) -> str:
    return json.dumps(hierarchy_to_dict(h, include_members, config), sort_keys=True, separators=(",", ":")) + "\n"


def hierarchy_from_json(text: str) -> PartitionHierarchy:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"Hierarchy is not valid JSON: {e}") from e
    return hierarchy_from_dict(data)


def hierarchy_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_hierarchy(path, h: PartitionHierarchy, include_members: bool = True,
                    config: Optional[Dict[str, Any]] = None) -> str:
    """Write the JSON document; returns its SHA-256."""
    text = hierarchy_to_json(h, include_members, config)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    logger.debug("wrote hierarchy %s", path)
    return hierarchy_hash(text)


def read_hierarchy(path) -> Tuple[PartitionHierarchy, str, Dict[str, Any]]:
    """Returns (hierarchy, sha256 of the file text, embedded config)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"Cannot read hierarchy {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise DataError(f"Hierarchy {path} is not UTF-8 text: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"Hierarchy {path} is not valid JSON: {e}") from e
    return hierarchy_from_dict(data), hierarchy_hash(text), data.get("config", {})
