# File: tests/test_evalkit.py
import json
import math

import pytest
from hypothesis import given, strategies as st

from geosurge.errors import DataError, GeoSurgeError
from geosurge.evalkit import (
    EvalRecord, ThresholdReport, evaluate_files, gcd_accuracy, join_records, parse_report_json, read_points_csv,
    render_report,
)
from geosurge.geodesy import EARTH_RADIUS_KM, GeoPoint, haversine_km

PAPER_ROW = [0.270, 0.544, 0.700, 0.844, 0.932]

points = st.builds(GeoPoint, st.floats(-90, 90), st.floats(-180, 180))
records = st.lists(st.builds(EvalRecord, st.text("abc", min_size=1, max_size=4), points, points),
                   min_size=1, max_size=30)


def north_of(p, km):
    return GeoPoint(p.lat + math.degrees(km / EARTH_RADIUS_KM), p.lon)


def write_csv(path, rows):
    path.write_text("query_id,lat,lon\n" + "".join(f"{q},{a},{b}\n" for q, a, b in rows))
    return path


# --- Accuracy ---

def test_exact_predictions_score_everywhere():
    rs = [EvalRecord(f"q{k}", GeoPoint(k, 2 * k), GeoPoint(k, 2 * k)) for k in range(10)]
    report = gcd_accuracy(rs)
    assert report.fractions == [1.0] * 5
    assert report.count == 10
    assert report.median_km == 0.0


def test_single_ten_km_error():
    truth = GeoPoint(10.0, 20.0)
    r = EvalRecord("q", north_of(truth, 10.0), truth)
    assert r.gcd_km == pytest.approx(10.0, abs=1e-6)
    assert gcd_accuracy([r]).fractions == [0.0, 1.0, 1.0, 1.0, 1.0]


def test_boundary_is_inclusive():
    p = GeoPoint(1.0, 1.0)
    assert gcd_accuracy([EvalRecord("q", p, p)], [0.0, 1.0]).fractions == [1.0, 1.0]


def test_default_thresholds():
    report = gcd_accuracy([EvalRecord("q", GeoPoint(0, 0), GeoPoint(0, 0))])
    assert report.thresholds == [1.0, 25.0, 200.0, 750.0, 2500.0]


def test_empty_records_rejected():
    with pytest.raises(GeoSurgeError):
        gcd_accuracy([])


@pytest.mark.parametrize("thresholds", [[], [25, 1], [1, 1, 25]])
def test_thresholds_must_increase(thresholds):
    with pytest.raises(GeoSurgeError):
        gcd_accuracy([EvalRecord("q", GeoPoint(0, 0), GeoPoint(0, 0))], thresholds)


@given(records)
def test_matches_naive_loop_and_is_monotone(rs):
    report = gcd_accuracy(rs)
    for t, f in zip(report.thresholds, report.fractions):
        naive = sum(1 for r in rs if haversine_km(r.predicted, r.truth) <= t) / len(rs)
        assert f == pytest.approx(naive)
        assert 0.0 <= f <= 1.0
    assert all(a <= b for a, b in zip(report.fractions, report.fractions[1:]))


@given(records, st.randoms(use_true_random=False))
def test_order_invariant(rs, rnd):
    shuffled = list(rs)
    rnd.shuffle(shuffled)
    assert gcd_accuracy(rs).fractions == gcd_accuracy(shuffled).fractions


# --- Rendering ---

def paper_report():
    return ThresholdReport([1.0, 25.0, 200.0, 750.0, 2500.0], PAPER_ROW, 100, 321.5, 1234.25)


def test_text_table_columns_street_to_continent():
    text = render_report(paper_report(), "text")
    header, values, summary = text.splitlines()
    names = ["Street", "City", "Region", "Country", "Continent"]
    positions = [header.index(n) for n in names]
    assert positions == sorted(positions)
    assert values.split() == ["27.0", "54.4", "70.0", "84.4", "93.2"]
    assert summary.startswith("n=100")


def test_csv_has_header_plus_row_per_threshold():
    lines = render_report(paper_report(), "csv").splitlines()
    assert lines[0] == "threshold_km,label,fraction"
    assert len(lines) == 6
    assert lines[1] == "1,Street,0.27"


def test_json_round_trip_is_stable():
    first = render_report(paper_report(), "json")
    again = render_report(parse_report_json(first), "json")
    assert first == again
    assert json.loads(first)["format"] == "geosurge-report"


def test_unlabelled_threshold_rendering():
    report = ThresholdReport([5.0], [0.5], 2, 1.0, 1.0)
    assert "5 km" in render_report(report, "text")


def test_unknown_format():
    with pytest.raises(GeoSurgeError):
        render_report(paper_report(), "xml")


@pytest.mark.parametrize("text", ["not json", '{"format": "other"}', '{"format": "geosurge-report"}'])
def test_bad_report_documents(text):
    with pytest.raises(DataError):
        parse_report_json(text)


# --- Files ---

def test_equal_files_score_everywhere(tmp_path):
    rows = [("a", 48.85, 2.35), ("b", -33.87, 151.21), ("c", 40.71, -74.0)]
    pred = write_csv(tmp_path / "pred.csv", rows)
    truth = write_csv(tmp_path / "truth.csv", rows + [("d", 0.0, 0.0)])
    report, rs = evaluate_files(pred, truth)
    assert report.fractions == [1.0] * 5
    assert [r.query_id for r in rs] == ["a", "b", "c"]


def test_unmatched_predictions_are_listed():
    pred = {"a": GeoPoint(0, 0), "zz": GeoPoint(0, 0), "yy": GeoPoint(1, 1)}
    with pytest.raises(DataError, match="yy, zz"):
        join_records(pred, {"a": GeoPoint(0, 0)})


def test_points_csv_errors(tmp_path):
    with pytest.raises(DataError):
        read_points_csv(tmp_path / "missing.csv")
    bad_header = tmp_path / "h.csv"
    bad_header.write_text("id,lat,lon\nx,1,2\n")
    with pytest.raises(DataError):
        read_points_csv(bad_header)
    with pytest.raises(DataError, match="line 3"):
        read_points_csv(write_csv(tmp_path / "d.csv", [("x", 1, 2), ("x", 3, 4)]))
    with pytest.raises(DataError, match="line 2"):
        read_points_csv(write_csv(tmp_path / "f.csv", [("x", "north", 2)]))


def test_empty_csv_is_a_data_error(tmp_path):
    truth = write_csv(tmp_path / "truth.csv", [("a", 1.0, 2.0)])
    empty = write_csv(tmp_path / "empty.csv", [])
    with pytest.raises(DataError, match="no rows"):
        evaluate_files(empty, truth)
    with pytest.raises(DataError, match="no rows"):
        evaluate_files(truth, empty)
