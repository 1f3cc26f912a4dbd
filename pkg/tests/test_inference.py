# File: tests/test_inference.py
import csv
import json
import math

import numpy as np
import pytest

from conftest import random_samples
from geosurge.autodiff import Param
from geosurge.errors import ConfigError, GeoSurgeError, IntegrityError
from geosurge.geodesy import CellId, GeoPoint, cell_center, haversine_km
from geosurge.geoembed import GeoRepresentation, LevelEmbedding, init_embeddings
from geosurge.inference import (
    Predictor, decode_location, hierarchical_scores, level_scores, predict, predict_multi, predictions_document,
    write_predictions_csv,
)
from geosurge.partition import GeoCell, Partition, PartitionHierarchy, build_hierarchy, select_levels

A, B = CellId(0, (0,)), CellId(0, (1,))
A0, A1, B0, B1 = CellId(0, (0, 0)), CellId(0, (0, 1)), CellId(0, (1, 0)), CellId(0, (1, 1))


def representation(levels, embeddings, taus):
    rows = []
    for l, (part, emb) in enumerate(zip(levels, embeddings)):
        rows.append(LevelEmbedding(part.cell_ids, Param(f"geo/level_{l}/embedding", emb, np.float64)))
    log_taus = [Param(f"geo/level_{l}/log_tau", np.array(math.log(t)), np.float64, decay=False)
                for l, t in enumerate(taus)]
    return GeoRepresentation(rows, log_taus)


@pytest.fixture
def toy():
    """Two coarse cells, each split into two fine cells."""
    coarse = Partition(1, 10, [GeoCell(A, 4), GeoCell(B, 4)])
    fine = Partition(1, 2, [GeoCell(c, 2) for c in (A0, A1, B0, B1)])
    h = PartitionHierarchy(levels=[coarse, fine], tau_min=1)
    rep = representation(
        h.levels,
        [np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
         np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])],
        [1.0, 1.0],
    )
    return h, rep


@pytest.fixture(scope="module")
def random_setup():
    h = build_hierarchy(random_samples(21, 800), 5, [150, 40])
    rep = init_embeddings(h, seed=3, dim=16, dtype=np.float64)
    return h, rep


def unit(rng, d):
    x = rng.normal(size=d)
    return x / np.linalg.norm(x)


def brute_force_joint(v, h, rep):
    """Explicit loops over finest cells and levels."""
    probs = []
    for l, part in enumerate(h.levels):
        sims = []
        for cell in part.cell_ids:
            g = rep.levels[l].embedding.data[rep.levels[l].row(cell)]
            sims.append(float(np.dot(g, v) / np.linalg.norm(g)))
        e = [math.exp(s / rep.temperature(l)) for s in sims]
        total = sum(e)
        probs.append({cell: x / total for cell, x in zip(part.cell_ids, e)})
    joint = []
    for cell in h.finest.cell_ids:
        score = 1.0
        for l, ancestor in enumerate(h.ancestors(cell)):
            score *= probs[l][ancestor]
        joint.append(score)
    total = sum(joint)
    return np.array(joint) / total


# --- Level scores ---

def test_own_embedding_scores_one(random_setup):
    h, rep = random_setup
    g = rep.lookup_normalized(1, h.levels[1].cell_ids[3])
    scores = level_scores(g, rep, 1)
    assert scores[3] == pytest.approx(1.0)
    assert scores.max() == pytest.approx(1.0)


def test_scores_bounded_and_match_loop(random_setup):
    h, rep = random_setup
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = unit(rng, 16)
        scores = level_scores(v, rep, 0)
        assert np.all(scores <= 1.0 + 1e-12) and np.all(scores >= -1.0 - 1e-12)
        for k, cell in enumerate(h.levels[0].cell_ids):
            g = rep.levels[0].embedding.data[k]
            assert scores[k] == pytest.approx(np.dot(g, v) / np.linalg.norm(g))


def test_level_scores_of_matrix(random_setup):
    _, rep = random_setup
    rng = np.random.default_rng(1)
    v = np.stack([unit(rng, 16) for _ in range(3)])
    batch = level_scores(v, rep, 1)
    assert batch.shape == (3, len(rep.levels[1].cell_ids))
    assert np.allclose(batch[2], level_scores(v[2], rep, 1))


# --- Joint scores ---

def test_hand_built_two_level_toy(toy):
    h, rep = toy
    joint = hierarchical_scores(np.array([1.0, 0.0, 0.0]), h, rep)
    e = math.e
    coarse = [e / (e + 1), 1 / (e + 1)]
    fine = [e / (e + 3), 1 / (e + 3), 1 / (e + 3), 1 / (e + 3)]
    raw = [coarse[0] * fine[0], coarse[0] * fine[1], coarse[1] * fine[2], coarse[1] * fine[3]]
    expected = np.array(raw) / sum(raw)
    assert np.allclose(joint, expected)
    assert np.allclose(joint, [0.61030, 0.22451, 0.08259, 0.08259], atol=1e-4)


def test_per_level_probabilities_returned(toy):
    h, rep = toy
    joint, levels = hierarchical_scores(np.array([1.0, 0.0, 0.0]), h, rep, return_levels=True)
    assert [p.shape for p in levels] == [(2,), (4,)]
    assert levels[0][0] == pytest.approx(math.e / (math.e + 1))
    assert all(p.sum() == pytest.approx(1.0) for p in levels)


@pytest.mark.parametrize("seed", range(6))
def test_joint_matches_brute_force(seed):
    h = build_hierarchy(random_samples(100 + seed, 600), 4, [200, 60, 15])
    rep = init_embeddings(h, seed=seed, dim=12, dtype=np.float64, temperature=0.3)
    v = unit(np.random.default_rng(seed), 12)
    joint = hierarchical_scores(v, h, rep)
    assert np.all(joint >= 0.0)
    assert joint.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(joint, brute_force_joint(v, h, rep), rtol=1e-9, atol=1e-15)


def test_single_level_joint_is_softmax(random_setup):
    h, rep = random_setup
    one = select_levels(h, [1])
    single = GeoRepresentation([rep.levels[1]], [rep.log_taus[1]])
    v = unit(np.random.default_rng(2), 16)
    s = level_scores(v, single, 0) / single.temperature(0)
    expected = np.exp(s - s.max())
    expected /= expected.sum()
    assert np.allclose(hierarchical_scores(v, one, single), expected)


def test_matrix_input_gives_one_row_per_query(random_setup):
    h, rep = random_setup
    rng = np.random.default_rng(3)
    vs = np.stack([unit(rng, 16) for _ in range(4)])
    joint = hierarchical_scores(vs, h, rep)
    assert joint.shape == (4, len(h.finest))
    assert np.allclose(joint[1], hierarchical_scores(vs[1], h, rep))


def test_level_count_mismatch(random_setup):
    h, rep = random_setup
    with pytest.raises(IntegrityError):
        hierarchical_scores(np.ones(16) / 4.0, select_levels(h, [0]), rep)


def test_raw_product_mode(toy):
    h, rep = toy
    v = np.array([0.6, 0.8, 0.0])
    joint = hierarchical_scores(v, h, rep, mode="raw_product")
    coarse = [0.6, 0.8]
    fine = [0.6, 0.0, 0.8, 0.0]
    parent = [0, 0, 1, 1]
    raw = np.array([(1 + coarse[parent[k]]) / 2 * (1 + fine[k]) / 2 for k in range(4)])
    assert np.allclose(joint, raw / raw.sum())


def test_unknown_mode(toy):
    h, rep = toy
    with pytest.raises(ConfigError):
        hierarchical_scores(np.array([1.0, 0.0, 0.0]), h, rep, mode="max")
    with pytest.raises(ConfigError):
        Predictor(h, rep, mode="max")


def test_classification_objective_uses_logits():
    part = Partition(1, 5, [GeoCell(A, 1), GeoCell(B, 1)])
    h = PartitionHierarchy(levels=[part], tau_min=1)
    level = LevelEmbedding(part.cell_ids, Param("geo/level_0/embedding", np.array([[2.0, 0.0], [0.0, 0.0]]),
                                                np.float64),
                           Param("geo/level_0/bias", np.array([0.0, 1.0]), np.float64))
    rep = GeoRepresentation([level], [], objective="classification")
    joint = hierarchical_scores(np.array([1.0, 0.0]), h, rep)
    assert np.allclose(joint, [math.e / (math.e + 1), 1 / (math.e + 1)])
    with pytest.raises(ConfigError):
        hierarchical_scores(np.array([1.0, 0.0]), h, rep, mode="raw_product")


# --- Decision ---

@pytest.mark.parametrize("mode", ["softmax", "raw_product"])
def test_scale_of_query_does_not_matter(random_setup, mode):
    h, rep = random_setup
    rng = np.random.default_rng(4)
    for _ in range(200):
        raw = rng.normal(size=16)
        a = predict(raw, h, rep, mode=mode)
        b = predict(20.0 * raw, h, rep, mode=mode)
        assert a.cell_id == b.cell_id
        assert np.allclose(a.joint, b.joint)


def test_unnormalized_query_scores_are_cosines(random_setup):
    _, rep = random_setup
    raw = np.random.default_rng(6).normal(size=16)
    assert np.allclose(level_scores(7.5 * raw, rep, 0), level_scores(raw / np.linalg.norm(raw), rep, 0))


def test_raising_winner_similarity_keeps_it(random_setup):
    h, rep = random_setup
    v = unit(np.random.default_rng(5), 16)
    first = predict(v, h, rep)
    emb = rep.levels[-1].embedding
    row = rep.levels[-1].row(first.cell_id)
    saved = emb.data[row].copy()
    try:
        emb.value.data[row] = v * np.linalg.norm(saved)
        again = predict(v, h, rep)
    finally:
        emb.value.data[row] = saved
    assert again.cell_id == first.cell_id
    assert again.joint_score >= first.joint_score


def test_prediction_fields(random_setup):
    h, rep = random_setup
    pred = Predictor(h, rep, top_k=3, keep_levels=True).predict(unit(np.random.default_rng(6), 16))
    assert pred.cell_id in h.finest
    assert len(pred.top_k) == 3
    assert pred.top_k[0] == (pred.cell_id, pred.joint_score)
    assert [s for _, s in pred.top_k] == sorted((s for _, s in pred.top_k), reverse=True)
    assert len(pred.per_level) == h.depth
    ranked = pred.ranked(h.finest.cell_ids)
    assert len(ranked) == len(h.finest)
    assert sum(s for _, s in ranked) == pytest.approx(1.0, abs=1e-6)
    assert pred.location == h.finest.cell(pred.cell_id).decoded_location


def test_record_layout(toy):
    h, rep = toy
    pred = predict(np.array([1.0, 0.0, 0.0]), h, rep, top_k=2)
    record = pred.to_record("q1")
    assert set(record) == {"query_id", "lat", "lon", "cell_id", "joint_score", "top_k"}
    assert record["cell_id"] == A0.token()
    assert [t["cell_id"] for t in record["top_k"]][0] == A0.token()
    # no member locations stored, so the cell center is used
    center = cell_center(A0)
    assert (record["lat"], record["lon"]) == (center.lat, center.lon)


def test_multi_with_one_or_repeated_features_equals_single(random_setup):
    h, rep = random_setup
    v = unit(np.random.default_rng(7), 16)
    single = predict(v, h, rep)
    one = predict_multi([v], h, rep)
    many = predict_multi([v] * 10, h, rep)
    assert one.cell_id == single.cell_id == many.cell_id
    assert np.allclose(one.joint, single.joint)
    assert np.allclose(many.joint, single.joint)


def test_multi_picks_larger_mean_probability():
    part = Partition(1, 5, [GeoCell(A, 1), GeoCell(B, 1)])
    h = PartitionHierarchy(levels=[part], tau_min=1)
    rep = representation([part], [np.array([[1.0, 0.0], [0.0, 1.0]])], [1.0])
    strong_a = np.array([1.0, 0.0])
    weak_b = np.array([0.6, 0.8])
    pa = 1 / (1 + math.exp(-1.0))
    pb = 1 / (1 + math.exp(-0.2))
    # mean probability of A: (pa + (1 - pb)) / 2 > 0.5
    assert (pa + (1 - pb)) / 2 > 0.5
    pred = predict_multi([strong_a, weak_b], h, rep)
    assert pred.cell_id == A
    assert pred.joint_score == pytest.approx((pa + (1 - pb)) / 2)
    assert predict(weak_b, h, rep).cell_id == B


def test_multi_needs_features(toy):
    h, rep = toy
    with pytest.raises(GeoSurgeError):
        predict_multi([], h, rep)


def test_predict_many_threads_keep_order(random_setup):
    h, rep = random_setup
    rng = np.random.default_rng(8)
    groups = [[unit(rng, 16) for _ in range(rng.integers(1, 4))] for _ in range(12)]
    serial = Predictor(h, rep).predict_many(groups)
    threaded = Predictor(h, rep, threads=4).predict_many(groups)
    assert [p.cell_id for p in serial] == [p.cell_id for p in threaded]
    assert all(np.array_equal(a.joint, b.joint) for a, b in zip(serial, threaded))


def test_empty_finest_level_rejected():
    h = PartitionHierarchy(levels=[Partition(1, 5, [])], tau_min=1)
    rep = GeoRepresentation([], [])
    with pytest.raises(GeoSurgeError):
        Predictor(h, rep)


# --- Decoding ---

def test_decode_single_point():
    p = GeoPoint(12.5, -45.0)
    out = decode_location(A, [p, p, p])
    assert haversine_km(out, p) < 1e-6


def test_decode_symmetric_about_equator():
    out = decode_location(A, [GeoPoint(20.0, 30.0), GeoPoint(-20.0, 30.0)])
    assert out.lat == pytest.approx(0.0, abs=1e-9)
    assert out.lon == pytest.approx(30.0)


def test_decode_without_members_uses_center():
    assert decode_location(B1) == cell_center(B1)
    assert decode_location(B1, [GeoPoint(0.0, 0.0), GeoPoint(0.0, 180.0)]) == cell_center(B1)


# --- Output files ---

def test_predictions_document(toy):
    h, rep = toy
    records = [predict(np.array([0.0, 1.0, 0.0]), h, rep).to_record("q7")]
    doc = json.loads(predictions_document(records, {"mode": "softmax"}))
    assert doc["format"] == "geosurge-predictions"
    assert doc["config"] == {"mode": "softmax"}
    assert doc["predictions"][0]["query_id"] == "q7"


def test_predictions_csv(tmp_path):
    path = tmp_path / "pred.csv"
    write_predictions_csv(path, [{"query_id": "a", "lat": 1.5, "lon": -2.25}, {"query_id": "b", "lat": 0, "lon": 0}])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows == [["query_id", "lat", "lon"], ["a", "1.5", "-2.25"], ["b", "0.0", "0.0"]]
