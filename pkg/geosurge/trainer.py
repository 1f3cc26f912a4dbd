# File: geosurge/trainer.py
"""
Joint training of the fusion network and the geographic embeddings.

The loss is the sum over hierarchy levels of an in-batch InfoNCE between the
visual features V (one fused vector per sample) and the normalized embedding
rows G_l of each sample's cell at level l. Optimization is AdamW with
decoupled weight decay, a per-epoch step schedule and early stopping on the
mean validation loss; the best-validation parameters are restored at the end.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    DTYPES, Param, Tape, Tensor, add, backward, elementwise_mul, exp, log_sum_exp_rows, matmul, mean,
    scale, sub, sum, transpose,
)
from .config import FusionConfig, TrainConfig
from .errors import GeoSurgeError, ShapeError
from .fusion import FusionModuleParams, encode, init_fusion_params
from .geodesy import GeoPoint
from .geoembed import GeoRepresentation, init_embeddings
from .partition import PartitionHierarchy

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-4


@dataclass
class Batch:
    """
    Samples with their inputs and a row index into every level's embedding.

    ``cell_index[i, l]`` is the row of sample i's ancestor cell at level l.
    """
    rgb: np.ndarray
    seg: np.ndarray
    cell_index: np.ndarray

    def __post_init__(self):
        self.cell_index = np.asarray(self.cell_index, dtype=np.int64)
        n = self.cell_index.shape[0]
        if self.rgb.shape[0] != n or self.seg.shape[0] != n or self.cell_index.ndim != 2:
            raise ShapeError("Batch", self.rgb.shape, self.seg.shape, self.cell_index.shape)

    def __len__(self) -> int:
        return self.cell_index.shape[0]

    def take(self, idx) -> Batch:
        return Batch(self.rgb[idx], self.seg[idx], self.cell_index[idx])


def make_batch(hierarchy: PartitionHierarchy, locations: Sequence[GeoPoint], rgb: np.ndarray,
               seg: np.ndarray) -> Batch:
    """Attach per-level cell rows; samples whose finest cell was discarded are dropped."""
    keep, rows = [], []
    for k, p in enumerate(locations):
        idx = hierarchy.cell_indices(p)
        if idx is not None:
            keep.append(k)
            rows.append(idx)
    dropped = len(locations) - len(keep)
    if dropped:
        logger.info("%d of %d samples fall outside kept finest cells and are excluded", dropped, len(locations))
    keep_arr = np.array(keep, dtype=np.int64)
    cell_index = np.array(rows, dtype=np.int64).reshape(len(keep), hierarchy.depth)
    return Batch(rgb[keep_arr], seg[keep_arr], cell_index)


@dataclass
class GeoSurgeModel:
    fusion: FusionModuleParams
    representation: GeoRepresentation

    @property
    def config(self) -> FusionConfig:
        return self.fusion.config

    def named_params(self) -> Dict[str, Param]:
        out = dict(self.fusion.named_params())
        out.update(self.representation.named_params())
        return out

    def params(self) -> List[Param]:
        return list(self.named_params().values())

    def encode(self, rgb: np.ndarray, seg: np.ndarray) -> Tensor:
        return encode(rgb, seg, self.fusion)


def build_model(hierarchy: PartitionHierarchy, fusion_config: FusionConfig, seed: int = 0,
                objective: str = "contrastive", precision: str = "float32") -> GeoSurgeModel:
    dtype = DTYPES[precision]
    fusion = init_fusion_params(fusion_config, seed, dtype)
    rep = init_embeddings(hierarchy, seed + 1, dim=fusion_config.embed_dim, objective=objective, dtype=dtype)
    return GeoSurgeModel(fusion, rep)


# -----------------------------------------------------------------------------
# Losses
# -----------------------------------------------------------------------------

def _check_unit_rows(name: str, t: Tensor) -> None:
    norms = np.sqrt((t.data.astype(np.float64) ** 2).sum(axis=-1))
    if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOLERANCE:
        raise GeoSurgeError(f"info_nce_level: rows of {name} are not unit-norm")


def _diagonal(x: Tensor) -> Tensor:
    return sum(elementwise_mul(x, np.eye(x.shape[-1], dtype=x.dtype)), axis=-1)


def info_nce_level(V, G, log_tau=0.0, same_cell: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over i of -log softmax_j(v_i . g_j / tau)[i], via log-sum-exp.

    ``same_cell`` (cell row per sample) masks off-diagonal pairs that share
    sample i's cell.
    """
    V = V if isinstance(V, Tensor) else Tensor(np.asarray(V))
    G = G if isinstance(G, Tensor) else Tensor(np.asarray(G))
    if V.ndim != 2 or V.shape != G.shape:
        raise ShapeError("info_nce_level", V.shape, G.shape)
    _check_unit_rows("V", V)
    _check_unit_rows("G", G)
    logits = elementwise_mul(matmul(V, transpose(G)), exp(scale(log_tau, -1.0)))
    mask = None
    if same_cell is not None:
        cells = np.asarray(same_cell)
        mask = (cells[:, None] != cells[None, :]) | np.eye(len(cells), dtype=bool)
    return mean(sub(log_sum_exp_rows(logits, mask), _diagonal(logits)))


def classification_loss_level(V, representation: GeoRepresentation, level: int, targets: np.ndarray) -> Tensor:
    """Full-softmax cross-entropy of the level's linear classifier."""
    V = V if isinstance(V, Tensor) else Tensor(np.asarray(V))
    logits = representation.logits(level, V)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)] = 1.0
    return mean(sub(log_sum_exp_rows(logits), sum(elementwise_mul(logits, onehot), axis=-1)))


def total_loss(model: GeoSurgeModel, batch: Batch, mask_same_cell: bool = False) -> Tuple[Tensor, List[Tensor]]:
    """Sum of the per-level losses; also returns each level's loss."""
    rep = model.representation
    if batch.cell_index.shape[1] != rep.num_levels:
        raise ShapeError("total_loss", batch.cell_index.shape, (len(batch), rep.num_levels))
    V = model.encode(batch.rgb, batch.seg)
    per_level = []
    for level in range(rep.num_levels):
        rows = batch.cell_index[:, level]
        if rep.objective == "contrastive":
            G = rep.normalized_rows(level, rows)
            loss = info_nce_level(V, G, rep.log_taus[level], rows if mask_same_cell else None)
        else:
            loss = classification_loss_level(V, rep, level, rows)
        per_level.append(loss)
    total = per_level[0]
    for loss in per_level[1:]:
        total = add(total, loss)
    return total, per_level


# -----------------------------------------------------------------------------
# Optimizer and schedules
# -----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Param]) -> OptimizerState:
        return cls(
            m={p.name: np.zeros(p.shape, dtype=np.float64) for p in params},
            v={p.name: np.zeros(p.shape, dtype=np.float64) for p in params},
        )


def adamw_step(params: Sequence[Param], state: OptimizerState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """
    One AdamW update from each param's ``grad``.

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w); params with
    ``decay=False`` skip the decay term.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        m, v = state.m[p.name], state.v[p.name]
        if m.shape != p.shape or p.grad.shape != p.shape:
            raise ShapeError(f"adamw_step {p.name}", p.shape, m.shape, p.grad.shape)
        g = p.grad.astype(np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w = p.data.astype(np.float64)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if p.decay:
            update = update + weight_decay * w
        p.value.data[...] = (w - lr * update).astype(p.data.dtype)


@dataclass
class StepLR:
    lr0: float
    gamma: float

    @classmethod
    def from_config(cls, config: TrainConfig) -> StepLR:
        return cls(config.lr, config.lr_gamma)

    def at(self, epoch: int) -> float:
        return self.lr0 * self.gamma ** epoch


class EarlyStopping:
    """
    Tracks the best validation value.

    The evaluation before the first epoch counts, so with patience 4 and a
    steadily worsening loss training stops after 5 evaluations.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: Optional[int] = None
        self.bad = 0
        self.evaluations = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one evaluation; True when it is a new best."""
        self.evaluations += 1
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad = 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


# -----------------------------------------------------------------------------
# Loops
# -----------------------------------------------------------------------------

def train_step(model: GeoSurgeModel, micro_batches: Sequence[Batch], state: OptimizerState,
               lr: float, config: TrainConfig) -> float:
    """Accumulate gradients over the micro-batches in order, then one optimizer step. Returns the mean loss."""
    params = model.params()
    accum = {p.name: np.zeros(p.shape, dtype=np.float64) for p in params}
    losses = []
    for mb in micro_batches:
        with Tape() as tape:
            loss, _ = total_loss(model, mb, config.mask_same_cell_negatives)
        backward(tape, loss, params)
        for p in params:
            accum[p.name] += p.grad
        losses.append(loss.item())
    for p in params:
        p.grad = (accum[p.name] / len(micro_batches)).astype(p.data.dtype)
    adamw_step(params, state, lr, config.weight_decay, config.beta1, config.beta2, config.eps)
    return float(np.mean(losses))


def evaluate_loss(model: GeoSurgeModel, data: Batch, config: TrainConfig) -> Tuple[float, List[float]]:
    """Sample-weighted mean total and per-level loss over fixed-order batches; nothing is recorded."""
    totals, levels, weights = [], [], []
    for start in range(0, len(data), config.batch_size):
        mb = data.take(slice(start, start + config.batch_size))
        loss, per_level = total_loss(model, mb, config.mask_same_cell_negatives)
        totals.append(loss.item())
        levels.append([l.item() for l in per_level])
        weights.append(len(mb))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.average(totals, weights=w)), [float(x) for x in np.average(levels, axis=0, weights=w)]


@dataclass
class FitResult:
    best_params: Dict[str, np.ndarray]
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: float = math.inf
    stopped_early: bool = False


def fit(model: GeoSurgeModel, train: Batch, val: Batch, config: TrainConfig, log_path=None,
        on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None) -> FitResult:
    """
    Train until early stopping or ``epochs_max``; restores and returns the best-validation params.

    ``best_epoch`` is -1 when no epoch beat the initial parameters.
    """
    if len(train) == 0:
        raise GeoSurgeError("empty training set")
    if len(val) == 0:
        logger.warning("validation set is empty; early stopping follows the training loss")
        val = train
    rng = np.random.default_rng(config.seed)
    params = model.params()
    state = OptimizerState.zeros(params)
    schedule = StepLR.from_config(config)
    stopper = EarlyStopping(config.patience)

    def snapshot() -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in model.named_params().items()}

    val0, _ = evaluate_loss(model, val, config)
    stopper.update(val0, -1)
    best = snapshot()
    logger.info("initial validation loss %.4f", val0)

    history: List[Dict[str, Any]] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(config.epochs_max):
            t0 = time.perf_counter()
            lr = schedule.at(epoch)
            order = rng.permutation(len(train))
            micro = [train.take(order[s:s + config.batch_size]) for s in range(0, len(train), config.batch_size)]
            losses = []
            for s in range(0, len(micro), config.accumulate):
                losses.append(train_step(model, micro[s:s + config.accumulate], state, lr, config))
            val_loss, per_level = evaluate_loss(model, val, config)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "per_level_losses": per_level,
                "wall_s": round(time.perf_counter() - t0, 3),
            }
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            logger.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, record["train_loss"], val_loss)
            if on_epoch is not None:
                on_epoch(record)
            if stopper.update(val_loss, epoch):
                best = snapshot()
            if stopper.should_stop:
                logger.info("no improvement for %d epochs; stopping", config.patience)
                break
    finally:
        if log_file is not None:
            log_file.close()

    for name, p in model.named_params().items():
        p.value.data[...] = best[name]
    return FitResult(
        best_params=best,
        history=history,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        stopped_early=stopper.should_stop,
    )
