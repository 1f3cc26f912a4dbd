# File: geosurge/inference.py
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, GeoSurgeError, IntegrityError
from .geodesy import CellId, GeoPoint, cell_center, spherical_mean

if TYPE_CHECKING:
    from .geoembed import GeoRepresentation
    from .partition import PartitionHierarchy

logger = logging.getLogger(__name__)

PREDICTIONS_FORMAT = "geosurge-predictions"
MODES = ("softmax", "raw_product")

# floor for log((1 + cos) / 2) when a cosine sits at exactly -1
_RAW_FLOOR = 1e-300


def decode_location(cell: CellId, locations: Optional[Sequence[GeoPoint]] = None) -> GeoPoint:
    """Spherical mean of the cell's sample locations, or the cell center when that is degenerate."""
    if locations:
        mean = spherical_mean(locations)
        if mean is not None:
            return mean
    return cell_center(cell)


def _as_rows(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def level_scores(v, representation: GeoRepresentation, level: int) -> np.ndarray:
    """
    Similarity of ``v`` to every cell of one level.

    For the contrastive objective these are cosines in [-1, 1]; for the
    classification objective they are classifier logits. Accepts one vector
    or a (Q, D) matrix.
    """
    rows = _as_rows(v)
    scores = representation.scores(level, rows)
    return scores[0] if np.ndim(v) == 1 else scores


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def level_log_probs(v, representation: GeoRepresentation, level: int, mode: str = "softmax") -> np.ndarray:
    rows = _as_rows(v)
    s = representation.scores(level, rows)
    if mode == "softmax":
        if representation.objective == "contrastive":
            s = s / representation.temperature(level)
        return _log_softmax(s)
    if mode == "raw_product":
        if representation.objective != "contrastive":
            raise ConfigError("raw_product inference needs the contrastive objective")
        return np.log(np.maximum((1.0 + s) * 0.5, _RAW_FLOOR))
    raise ConfigError(f"Unknown inference mode: {mode}")


def hierarchical_scores(v, hierarchy: PartitionHierarchy, representation: GeoRepresentation,
                        mode: str = "softmax", return_levels: bool = False):
    """
    Joint score of every finest cell: the product over levels of the level
    probability of its ancestor, renormalized to sum to 1.

    The product is taken in log space. Accepts one vector (returns a vector)
    or a (Q, D) matrix (returns a (Q, n_finest) matrix). With
    ``return_levels`` also returns the per-level probability arrays.
    """
    if representation.num_levels != hierarchy.depth:
        raise IntegrityError(
            f"Representation has {representation.num_levels} levels, hierarchy has {hierarchy.depth}")
    rows = _as_rows(v)
    rows_per_level = hierarchy.ancestor_rows()
    n_finest = len(hierarchy.finest)
    log_joint = np.zeros((rows.shape[0], n_finest), dtype=np.float64)
    level_probs = []
    for level in range(hierarchy.depth):
        lp = level_log_probs(rows, representation, level, mode)
        idx = rows_per_level[level]
        if idx.shape[0] != n_finest:
            raise IntegrityError("missing ancestor link")
        log_joint += lp[:, idx]
        if return_levels:
            level_probs.append(np.exp(lp))
    joint = np.exp(_log_softmax(log_joint)) if n_finest else log_joint
    if np.ndim(v) == 1:
        joint = joint[0]
        level_probs = [p[0] for p in level_probs]
    return (joint, level_probs) if return_levels else joint


@dataclass
class HierPrediction:
    cell_id: CellId
    location: GeoPoint
    joint_score: float
    top_k: List[Tuple[CellId, float]]
    joint: np.ndarray = field(repr=False)
    per_level: Optional[List[np.ndarray]] = field(default=None, repr=False)

    def ranked(self, finest_cells: Sequence[CellId]) -> List[Tuple[CellId, float]]:
        """All finest cells sorted by descending joint score (ties in canonical order)."""
        order = np.argsort(-self.joint, kind="stable")
        return [(finest_cells[k], float(self.joint[k])) for k in order]

    def to_record(self, query_id: str) -> Dict[str, Any]:
        return {
            "query_id": query_id,
            "lat": self.location.lat,
            "lon": self.location.lon,
            "cell_id": self.cell_id.token(),
            "joint_score": self.joint_score,
            "top_k": [{"cell_id": c.token(), "score": s} for c, s in self.top_k],
        }


class Predictor:
    """Hierarchical inference over a fixed hierarchy and representation."""

    def __init__(self, hierarchy: PartitionHierarchy, representation: GeoRepresentation,
                 mode: str = "softmax", top_k: int = 5, threads: int = 1, keep_levels: bool = False):
        if mode not in MODES:
            raise ConfigError(f"Unknown inference mode: {mode}")
        if len(hierarchy.finest) == 0:
            raise GeoSurgeError("Hierarchy has no finest cells to predict")
        self.hierarchy = hierarchy
        self.representation = representation
        self.mode = mode
        self.top_k = top_k
        self.threads = max(1, int(threads))
        self.keep_levels = keep_levels
        self._cells = hierarchy.finest.cell_ids
        self._locations = [c.decoded_location or decode_location(c.cell_id) for c in hierarchy.finest.cells]

    def joint(self, v) -> np.ndarray:
        return hierarchical_scores(v, self.hierarchy, self.representation, self.mode)

    def _decide(self, joint: np.ndarray, per_level=None) -> HierPrediction:
        order = np.argsort(-joint, kind="stable")
        best = int(order[0])
        return HierPrediction(
            cell_id=self._cells[best],
            location=self._locations[best],
            joint_score=float(joint[best]),
            top_k=[(self._cells[k], float(joint[k])) for k in order[: self.top_k]],
            joint=joint,
            per_level=per_level,
        )

    def predict(self, v) -> HierPrediction:
        if self.keep_levels:
            joint, levels = hierarchical_scores(v, self.hierarchy, self.representation, self.mode,
                                                return_levels=True)
            return self._decide(joint, levels)
        return self._decide(self.joint(v))

    def predict_multi(self, features: Sequence) -> HierPrediction:
        """Average the renormalized joints of several features of one query, then decide."""
        if len(features) == 0:
            raise GeoSurgeError("predict_multi needs at least one feature")
        joints = self.joint(np.stack([np.asarray(f, dtype=np.float64) for f in features]))
        return self._decide(joints.mean(axis=0))

    def predict_many(self, groups: Sequence[Sequence]) -> List[HierPrediction]:
        """predict_multi over many queries; results keep input order."""
        if self.threads == 1 or len(groups) < 2:
            return [self.predict_multi(g) for g in groups]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(self.predict_multi, groups))


def predict(v, hierarchy: PartitionHierarchy, representation: GeoRepresentation,
            mode: str = "softmax", top_k: int = 5) -> HierPrediction:
    return Predictor(hierarchy, representation, mode, top_k).predict(v)


def predict_multi(features: Sequence, hierarchy: PartitionHierarchy, representation: GeoRepresentation,
                  mode: str = "softmax", top_k: int = 5) -> HierPrediction:
    return Predictor(hierarchy, representation, mode, top_k).predict_multi(features)


# -----------------------------------------------------------------------------
# Output files
# -----------------------------------------------------------------------------

def predictions_document(records: Sequence[Dict[str, Any]], config: Optional[Dict[str, Any]] = None) -> str:
    doc = {"format": PREDICTIONS_FORMAT, "version": 1, "config": config or {}, "predictions": list(records)}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def write_predictions_csv(path, records: Sequence[Dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["query_id", "lat", "lon"])
        for r in records:
            writer.writerow([r["query_id"], repr(float(r["lat"])), repr(float(r["lon"]))])
    logger.debug("wrote %d predictions to %s", len(records), path)
