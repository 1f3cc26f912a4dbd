# File: geosurge/geoembed.py
"""
The learned geographic representation: one embedding matrix per hierarchy
level plus a learnable temperature per level.

Rows are stored unnormalized and normalized on read, so every ``g`` handed
to training or inference is unit-norm while the optimizer updates stay
unconstrained. Each level is its own parameter set.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Param, Tensor, add, gather_rows, l2_normalize_rows, matmul, transpose
from .errors import GeoSurgeError, IntegrityError
from .geodesy import CellId

if TYPE_CHECKING:
    from .partition import PartitionHierarchy

logger = logging.getLogger(__name__)

INIT_TEMPERATURE = 0.07
OBJECTIVES = ("contrastive", "classification")


def _normalize(m: np.ndarray) -> np.ndarray:
    n = np.sqrt((m * m).sum(axis=-1, keepdims=True))
    return m / np.maximum(n, 1e-12)


@dataclass
class LevelEmbedding:
    """Embedding rows of one level; row k belongs to ``cell_ids[k]`` (canonical order)."""
    cell_ids: Tuple[CellId, ...]
    embedding: Param
    bias: Optional[Param] = None

    def __post_init__(self):
        self.index: Dict[CellId, int] = {c: k for k, c in enumerate(self.cell_ids)}
        if len(self.index) != len(self.cell_ids) or self.embedding.shape[0] != len(self.cell_ids):
            raise IntegrityError("Level embedding rows do not match its cell list")

    def row(self, cell: CellId) -> int:
        try:
            return self.index[cell]
        except KeyError:
            raise GeoSurgeError(f"unknown cell {cell}") from None


class GeoRepresentation:
    """
    Per-level embeddings E_l and temperatures tau_l = exp(log_tau_l).

    With ``objective="classification"`` the rows act as plain linear
    classifier weights with a bias and no temperature.
    """

    def __init__(self, levels: List[LevelEmbedding], log_taus: List[Param], objective: str = "contrastive"):
        if objective not in OBJECTIVES:
            raise GeoSurgeError(f"Unknown objective: {objective}")
        if objective == "contrastive" and len(log_taus) != len(levels):
            raise IntegrityError("Need one temperature per level")
        self.levels = levels
        self.log_taus = log_taus
        self.objective = objective

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def embed_dim(self) -> int:
        return self.levels[0].embedding.shape[1]

    def temperature(self, level: int) -> float:
        if self.objective != "contrastive":
            return 1.0
        return math.exp(float(self.log_taus[level].data.reshape(())))

    def lookup_normalized(self, level: int, cell: CellId) -> np.ndarray:
        """The g vector of one cell."""
        lvl = self.levels[level]
        return _normalize(lvl.embedding.data[lvl.row(cell)].astype(np.float64))

    def all_normalized(self, level: int) -> np.ndarray:
        return _normalize(self.levels[level].embedding.data.astype(np.float64))

    def scores(self, level: int, rows: np.ndarray) -> np.ndarray:
        """
        (Q, n_cells) cosine similarities, or classifier logits for the classification objective.

        Query rows are re-normalized for the contrastive objective, so only their direction counts.
        """
        lvl = self.levels[level]
        if self.objective == "contrastive":
            return _normalize(rows) @ self.all_normalized(level).T
        return rows @ lvl.embedding.data.astype(np.float64).T + lvl.bias.data.astype(np.float64)

    # differentiable views used by the trainer

    def normalized_rows(self, level: int, indices) -> Tensor:
        return l2_normalize_rows(gather_rows(self.levels[level].embedding, indices))

    def logits(self, level: int, v: Tensor) -> Tensor:
        lvl = self.levels[level]
        return add(matmul(v, transpose(lvl.embedding)), lvl.bias)

    def named_params(self) -> Dict[str, Param]:
        out: Dict[str, Param] = {}
        for l, lvl in enumerate(self.levels):
            out[lvl.embedding.name] = lvl.embedding
            if lvl.bias is not None:
                out[lvl.bias.name] = lvl.bias
            if self.objective == "contrastive":
                out[self.log_taus[l].name] = self.log_taus[l]
        return out

    def params(self) -> List[Param]:
        return list(self.named_params().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params())

    def cell_orders(self) -> Dict[str, List[str]]:
        return {f"geo/level_{l}/cells": [c.token() for c in lvl.cell_ids] for l, lvl in enumerate(self.levels)}

    def check_cells(self, hierarchy: PartitionHierarchy) -> None:
        for l, (lvl, part) in enumerate(zip(self.levels, hierarchy.levels)):
            if lvl.cell_ids != part.cell_ids:
                raise IntegrityError(f"Embedding rows of level {l} do not match the hierarchy cells")


def _level_names(l: int) -> Tuple[str, str, str]:
    base = f"geo/level_{l}"
    return f"{base}/embedding", f"{base}/log_tau", f"{base}/bias"


def init_embeddings(hierarchy: PartitionHierarchy, seed: int, dim: int = 768,
                    objective: str = "contrastive", dtype=np.float32,
                    temperature: float = INIT_TEMPERATURE) -> GeoRepresentation:
    """Gaussian rows with sigma 1/sqrt(dim); log_tau = ln(temperature) per level."""
    rng = np.random.default_rng(seed)
    levels, log_taus = [], []
    for l, part in enumerate(hierarchy.levels):
        emb_name, tau_name, bias_name = _level_names(l)
        weights = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(len(part), dim))
        bias = Param(bias_name, np.zeros(len(part)), dtype) if objective == "classification" else None
        levels.append(LevelEmbedding(part.cell_ids, Param(emb_name, weights, dtype), bias))
        if objective == "contrastive":
            log_taus.append(Param(tau_name, np.array(math.log(temperature)), dtype, decay=False))
    rep = GeoRepresentation(levels, log_taus, objective)
    logger.debug("initialized %d-level representation with %d params", rep.num_levels, rep.parameter_count())
    return rep


def representation_from_tensors(tensors: Dict[str, np.ndarray], cell_orders: Dict[str, Sequence[str]],
                                objective: str = "contrastive", dtype=np.float32) -> GeoRepresentation:
    """Rebuild a representation from checkpoint tensors and stored row orders."""
    levels, log_taus = [], []
    l = 0
    while f"geo/level_{l}/cells" in cell_orders:
        emb_name, tau_name, bias_name = _level_names(l)
        cells = tuple(CellId.parse(t) for t in cell_orders[f"geo/level_{l}/cells"])
        try:
            emb = Param(emb_name, tensors[emb_name], dtype)
            bias = Param(bias_name, tensors[bias_name], dtype) if objective == "classification" else None
            if objective == "contrastive":
                log_taus.append(Param(tau_name, tensors[tau_name], dtype, decay=False))
        except KeyError as e:
            raise IntegrityError(f"Checkpoint is missing tensor {e.args[0]}") from None
        levels.append(LevelEmbedding(cells, emb, bias))
        l += 1
    if not levels:
        raise IntegrityError("Checkpoint holds no geographic levels")
    return GeoRepresentation(levels, log_taus, objective)
