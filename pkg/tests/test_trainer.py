# File: tests/test_trainer.py
import json
import math

import numpy as np
import pytest

from conftest import clustered_samples, random_samples
from geosurge.autodiff import Param, Tape, backward, grad_check
from geosurge.config import FusionConfig, TrainConfig
from geosurge.errors import GeoSurgeError, ShapeError
from geosurge.geodesy import GeoPoint
from geosurge.geoembed import GeoRepresentation, LevelEmbedding, init_embeddings
from geosurge.partition import build_hierarchy
from geosurge.trainer import (
    Batch, EarlyStopping, GeoSurgeModel, OptimizerState, StepLR, adamw_step, build_model,
    classification_loss_level, evaluate_loss, fit, info_nce_level, make_batch, total_loss, train_step,
)

CENTERS = [(48.8, 2.3), (40.7, -74.0), (-33.9, 151.2), (35.7, 139.7)]


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_batch(config, cell_counts, n, seed=0):
    rng = np.random.default_rng(seed)
    rgb = rng.normal(size=(n, 5, config.kv_dim))
    seg = rng.integers(0, config.num_classes, size=(n, config.seg_height, config.seg_width))
    cells = np.stack([rng.integers(0, k, size=n) for k in cell_counts], axis=1)
    return Batch(rgb, seg, cells)


@pytest.fixture
def toy_setup(toy_fusion_config):
    samples = clustered_samples(0, CENTERS, 12, spread_deg=2.0)
    h = build_hierarchy(samples, 2, [14, 5])
    rng = np.random.default_rng(1)
    c = toy_fusion_config
    rgb = rng.normal(size=(len(samples), 5, c.kv_dim))
    seg = rng.integers(0, c.num_classes, size=(len(samples), c.seg_height, c.seg_width))
    batch = make_batch(h, [s.location for s in samples], rgb, seg)
    return h, batch


# --- InfoNCE ---

def test_single_pair_has_zero_loss():
    v = np.array([[1.0, 0.0, 0.0]])
    assert info_nce_level(v, v).item() == pytest.approx(0.0, abs=1e-12)


def test_equal_similarities_give_log_batch_size():
    v = np.tile([[0.0, 1.0]], (4, 1))
    assert info_nce_level(v, v, log_tau=math.log(0.07)).item() == pytest.approx(1.3863, abs=1e-4)


def test_two_by_two_identity_at_unit_temperature():
    eye = np.eye(2)
    assert info_nce_level(eye, eye, log_tau=0.0).item() == pytest.approx(0.3133, abs=1e-4)
    assert info_nce_level(eye, eye).item() == pytest.approx(-math.log(math.e / (math.e + 1.0)))


def test_rows_must_be_unit_norm():
    with pytest.raises(GeoSurgeError):
        info_nce_level(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]))


def test_batch_shapes_must_match():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        info_nce_level(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4))


def test_same_cell_negatives_can_be_masked():
    v = np.tile([[1.0, 0.0]], (2, 1))
    assert info_nce_level(v, v).item() == pytest.approx(math.log(2.0))
    assert info_nce_level(v, v, same_cell=np.array([7, 7])).item() == pytest.approx(0.0, abs=1e-12)
    assert info_nce_level(v, v, same_cell=np.array([7, 8])).item() == pytest.approx(math.log(2.0))


@pytest.mark.parametrize("seed", range(5))
def test_common_rotation_leaves_loss_unchanged(seed):
    rng = np.random.default_rng(seed)
    V, G = unit_rows(rng, 8, 6), unit_rows(rng, 8, 6)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = info_nce_level(V, G, log_tau=math.log(0.1)).item()
    b = info_nce_level(V @ q, G @ q, log_tau=math.log(0.1)).item()
    assert a == pytest.approx(b, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_shuffling_pairs_leaves_loss_unchanged(seed):
    rng = np.random.default_rng(seed)
    V, G = unit_rows(rng, 10, 4), unit_rows(rng, 10, 4)
    perm = rng.permutation(10)
    a = info_nce_level(V, G, log_tau=-1.0).item()
    b = info_nce_level(V[perm], G[perm], log_tau=-1.0).item()
    assert a == pytest.approx(b, abs=1e-6)


def test_classification_loss_with_zero_weights_is_uniform():
    h = build_hierarchy(random_samples(2, 300), 5, [60])
    rep = init_embeddings(h, seed=0, dim=4, objective="classification", dtype=np.float64)
    rep.levels[0].embedding.value.data[...] = 0.0
    V = np.eye(4)[:3]
    loss = classification_loss_level(V, rep, 0, np.array([0, 1, 2]))
    assert loss.item() == pytest.approx(math.log(len(h.levels[0])))


# --- Total loss ---

def test_one_level_equals_info_nce(toy_fusion_config):
    h = build_hierarchy(random_samples(4, 400), 5, [60])
    model = build_model(h, toy_fusion_config, seed=0, precision="float64")
    batch = random_batch(toy_fusion_config, [len(h.levels[0])], 6)
    total, per_level = total_loss(model, batch)
    rep = model.representation
    V = model.encode(batch.rgb, batch.seg)
    G = rep.normalized_rows(0, batch.cell_index[:, 0])
    direct = info_nce_level(V, G, rep.log_taus[0])
    assert len(per_level) == 1
    assert total.item() == pytest.approx(direct.item(), abs=1e-12)


def test_identical_levels_multiply_the_loss(toy_fusion_config):
    h = build_hierarchy(random_samples(4, 400), 5, [60])
    base = build_model(h, toy_fusion_config, seed=0, precision="float64")
    level = base.representation.levels[0]
    tau = base.representation.log_taus[0]
    levels, taus = [], []
    for l in range(3):
        levels.append(LevelEmbedding(level.cell_ids, Param(f"geo/level_{l}/embedding", level.embedding.data,
                                                           np.float64)))
        taus.append(Param(f"geo/level_{l}/log_tau", tau.data, np.float64, decay=False))
    model = GeoSurgeModel(base.fusion, GeoRepresentation(levels, taus))

    one = random_batch(toy_fusion_config, [len(level.cell_ids)], 6)
    three = Batch(one.rgb, one.seg, np.repeat(one.cell_index, 3, axis=1))
    single, _ = total_loss(base, one)
    triple, per_level = total_loss(model, three)
    assert triple.item() == pytest.approx(3 * single.item(), rel=1e-12)
    assert all(l.item() == pytest.approx(single.item(), rel=1e-12) for l in per_level)


def test_random_init_loss_is_near_log_batch_size():
    config = FusionConfig(kv_dim=16, token_dim=8, latent_dim=4, heads=2, attn_dim=8, mlp_hidden=16, blocks=1,
                          embed_dim=768, num_classes=3, patch_size=2, seg_height=4, seg_width=4)
    h = build_hierarchy(random_samples(5, 4000), 5, [400, 60])
    model = build_model(h, config, seed=3)
    batch = random_batch(config, [len(p) for p in h.levels], 64, seed=3)
    total, _ = total_loss(model, batch)
    expected = h.depth * math.log(64)
    assert abs(total.item() - expected) < 0.1 * expected


def test_level_count_must_match(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config)
    short = Batch(batch.rgb, batch.seg, batch.cell_index[:, :1])
    with pytest.raises(ShapeError):
        total_loss(model, short)


def test_total_loss_gradients(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config, seed=2, precision="float64")
    small = batch.take(np.arange(0, len(batch), 6))
    program = lambda: total_loss(model, small)[0]  # noqa: E731
    assert grad_check(program, model.params(), sample=6, seed=1) < 1e-4


def test_log_tau_receives_gradient(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config, seed=2, precision="float64")
    params = model.params()
    with Tape() as tape:
        loss, _ = total_loss(model, batch.take(np.arange(8)))
    backward(tape, loss, params)
    for tau in model.representation.log_taus:
        assert tau.grad.shape == ()
        assert tau.grad != 0.0


# --- Batches ---

def test_make_batch_drops_samples_outside_finest_cells(toy_fusion_config):
    samples = clustered_samples(0, CENTERS, 12, spread_deg=2.0)
    h = build_hierarchy(samples, 2, [14, 5])
    stray = [s.location for s in samples] + [GeoPoint(-80.0, -170.0)]
    n = len(stray)
    c = toy_fusion_config
    rgb = np.zeros((n, 5, c.kv_dim))
    rgb[:, 0, 0] = np.arange(n)
    seg = np.zeros((n, 4, 4), dtype=np.int64)
    batch = make_batch(h, stray, rgb, seg)
    assert len(batch) < n
    assert n - 1 not in set(batch.rgb[:, 0, 0].astype(int))
    assert batch.cell_index.shape == (len(batch), 2)
    for k, row in zip(batch.rgb[:, 0, 0].astype(int), batch.cell_index):
        assert tuple(row) == h.cell_indices(stray[k])


def test_batch_rejects_mismatched_lengths():
    with pytest.raises(ShapeError):
        Batch(np.zeros((3, 2, 4)), np.zeros((2, 4, 4)), np.zeros((3, 1)))


# --- Optimizer ---

def test_first_adamw_step_moves_by_lr():
    p = Param("w", np.zeros(3), np.float64)
    p.grad = np.ones(3)
    adamw_step([p], OptimizerState.zeros([p]), lr=0.1, weight_decay=0.0)
    assert np.allclose(p.data, -0.1, atol=1e-7)


def test_zero_gradient_without_decay_changes_nothing():
    p = Param("w", [1.5, -2.0], np.float64)
    adamw_step([p], OptimizerState.zeros([p]), lr=0.1, weight_decay=0.0)
    assert np.array_equal(p.data, [1.5, -2.0])


def test_decoupled_decay_shrinks_weights():
    p = Param("w", [2.0, -4.0], np.float64)
    q = Param("log_tau", [2.0], np.float64, decay=False)
    adamw_step([p, q], OptimizerState.zeros([p, q]), lr=0.1, weight_decay=0.01)
    assert np.allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.01))
    assert np.array_equal(q.data, [2.0])


def test_optimizer_state_counts_steps():
    p = Param("w", np.zeros(2), np.float64)
    state = OptimizerState.zeros([p])
    for k in range(3):
        adamw_step([p], state, lr=0.01, weight_decay=0.0)
        assert state.step == k + 1


def test_step_schedule():
    assert StepLR(1e-4, 0.5).at(3) == pytest.approx(1.25e-5)
    assert StepLR.from_config(TrainConfig(lr=1e-3, lr_gamma=0.1)).at(2) == pytest.approx(1e-5)


def test_early_stopping_after_initial_plus_patience_evaluations():
    stopper = EarlyStopping(4)
    evaluations = 0
    for epoch, value in enumerate([1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6], start=-1):
        stopper.update(value, epoch)
        evaluations += 1
        if stopper.should_stop:
            break
    assert evaluations == 5
    assert stopper.evaluations == 5
    assert stopper.best_epoch == -1


def test_early_stopping_resets_on_improvement():
    stopper = EarlyStopping(2)
    assert stopper.update(1.0, -1)
    assert not stopper.update(1.5, 0)
    assert stopper.update(0.5, 1)
    assert not stopper.should_stop
    assert stopper.best == 0.5


# --- Training loop ---

def test_small_step_decreases_loss(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config, seed=0, precision="float64")
    frozen = batch.take(np.arange(16))
    config = TrainConfig(lr=1e-5, weight_decay=0.0, batch_size=16)
    before = total_loss(model, frozen)[0].item()
    train_step(model, [frozen], OptimizerState.zeros(model.params()), 1e-5, config)
    after = total_loss(model, frozen)[0].item()
    assert after < before


def test_accumulated_step_reports_mean_loss(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config, seed=0, precision="float64")
    a, b = batch.take(np.arange(8)), batch.take(np.arange(8, 16))
    expected = (total_loss(model, a)[0].item() + total_loss(model, b)[0].item()) / 2
    config = TrainConfig(lr=1e-5, batch_size=8, accumulate=2)
    got = train_step(model, [a, b], OptimizerState.zeros(model.params()), 1e-5, config)
    assert got == pytest.approx(expected)


def test_evaluate_loss_weights_batches_by_size(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config, seed=0, precision="float64")
    data = batch.take(np.arange(10))
    total, per_level = evaluate_loss(model, data, TrainConfig(batch_size=6))
    first = total_loss(model, data.take(slice(0, 6)))[0].item()
    second = total_loss(model, data.take(slice(6, 10)))[0].item()
    assert total == pytest.approx((6 * first + 4 * second) / 10)
    assert sum(per_level) == pytest.approx(total)


def test_fit_writes_log_and_restores_best(toy_fusion_config, toy_setup, tmp_path):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config, seed=0)
    train, val = batch.take(np.arange(0, len(batch) - 8)), batch.take(np.arange(len(batch) - 8, len(batch)))
    seen = []
    log = tmp_path / "train.jsonl"
    result = fit(model, train, val, TrainConfig(batch_size=8, epochs_max=3, lr=1e-3), log_path=log,
                 on_epoch=seen.append)

    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(records) == len(result.history) == len(seen)
    assert 1 <= len(records) <= 3
    assert set(records[0]) == {"epoch", "lr", "train_loss", "val_loss", "per_level_losses", "wall_s"}
    assert records[0]["lr"] == pytest.approx(1e-3)
    assert len(records[0]["per_level_losses"]) == 2
    for name, p in model.named_params().items():
        assert np.array_equal(p.data, result.best_params[name])
    best_logged = min([r["val_loss"] for r in records])
    assert result.best_val_loss <= best_logged + 1e-12


def test_fit_is_deterministic(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    results = []
    for _ in range(2):
        model = build_model(h, toy_fusion_config, seed=0)
        fit(model, batch, batch.take(np.arange(8)), TrainConfig(batch_size=8, epochs_max=2, lr=1e-3))
        results.append({n: p.data.copy() for n, p in model.named_params().items()})
    assert all(np.array_equal(results[0][n], results[1][n]) for n in results[0])


def test_fit_needs_training_data(toy_fusion_config, toy_setup):
    h, batch = toy_setup
    model = build_model(h, toy_fusion_config)
    empty = batch.take(np.arange(0))
    with pytest.raises(GeoSurgeError):
        fit(model, empty, batch, TrainConfig())


@pytest.mark.slow
def test_training_reduces_validation_loss(toy_fusion_config):
    samples = clustered_samples(1, CENTERS, 80, spread_deg=1.0)
    h = build_hierarchy(samples, 5, [100, 30])
    c = toy_fusion_config
    rng = np.random.default_rng(0)
    seg = rng.integers(0, c.num_classes, size=(len(samples), 4, 4))
    located = make_batch(h, [s.location for s in samples], np.zeros((len(samples), 5, c.kv_dim)), seg)
    # every finest cell gets its own feature signature
    signature = rng.normal(size=(len(h.finest), c.kv_dim)) * 3.0
    rgb = 0.3 * rng.normal(size=located.rgb.shape) + signature[located.cell_index[:, -1]][:, None, :]
    batch = Batch(rgb, located.seg, located.cell_index)
    order = np.random.default_rng(2).permutation(len(batch))
    train, val = batch.take(order[:-40]), batch.take(order[-40:])
    config = TrainConfig(batch_size=32, epochs_max=25, lr=3e-3, lr_gamma=0.9, patience=6,
                         mask_same_cell_negatives=True)
    initial = evaluate_loss(build_model(h, c, seed=0), val, config)[0]
    result = fit(build_model(h, c, seed=0), train, val, config)
    assert result.best_val_loss <= 0.5 * initial
