# File: geosurge/evalkit.py
"""Great-circle threshold accuracy of predicted locations."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .config import PAPER_THRESHOLDS_KM
from .errors import DataError, GeoSurgeError
from .geodesy import GeoPoint, haversine_km, haversine_km_array

logger = logging.getLogger(__name__)

REPORT_FORMAT = "geosurge-report"
FORMATS = ("text", "csv", "json")

# column labels for the standard thresholds
SCALE_NAMES = {1.0: "Street", 25.0: "City", 200.0: "Region", 750.0: "Country", 2500.0: "Continent"}


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    predicted: GeoPoint
    truth: GeoPoint

    @property
    def gcd_km(self) -> float:
        return haversine_km(self.predicted, self.truth)


@dataclass
class ThresholdReport:
    thresholds: List[float]
    fractions: List[float]
    count: int
    median_km: float
    mean_km: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": REPORT_FORMAT,
            "version": 1,
            "thresholds_km": self.thresholds,
            "fractions": self.fractions,
            "count": self.count,
            "median_km": self.median_km,
            "mean_km": self.mean_km,
        }


def gcd_accuracy(records: Sequence[EvalRecord], thresholds: Sequence[float] = PAPER_THRESHOLDS_KM) -> ThresholdReport:
    """Fraction of records with gcd_km <= t for every threshold t."""
    if not records:
        raise GeoSurgeError("gcd_accuracy needs at least one record")
    ts = [float(t) for t in thresholds]
    if not ts or any(b <= a for a, b in zip(ts, ts[1:])):
        raise GeoSurgeError(f"thresholds must be strictly increasing, got {ts}")
    d = haversine_km_array(
        [r.predicted.lat for r in records], [r.predicted.lon for r in records],
        [r.truth.lat for r in records], [r.truth.lon for r in records],
    )
    n = len(records)
    fractions = [float(np.count_nonzero(d <= t)) / n for t in ts]
    return ThresholdReport(ts, fractions, n, float(np.median(d)), float(np.mean(d)))


def _label(t: float) -> str:
    return SCALE_NAMES.get(t, f"{t:g} km")


def render_report(report: ThresholdReport, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["threshold_km", "label", "fraction"])
        for t, f in zip(report.thresholds, report.fractions):
            writer.writerow([f"{t:g}", _label(t), repr(f)])
        return buf.getvalue()
    if fmt == "text":
        heads = [f"{_label(t)} {t:g} km" if t in SCALE_NAMES else _label(t) for t in report.thresholds]
        cells = [f"{100.0 * f:.1f}" for f in report.fractions]
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(heads, widths)),
            "  ".join(c.rjust(w) for c, w in zip(cells, widths)),
            f"n={report.count}  median {report.median_km:.1f} km  mean {report.mean_km:.1f} km",
        ]
        return "\n".join(lines) + "\n"
    raise GeoSurgeError(f"Unknown report format: {fmt}")


def parse_report_json(text: str) -> ThresholdReport:
    try:
        data = json.loads(text)
        if data.get("format") != REPORT_FORMAT:
            raise DataError(f"Not a report document (format={data.get('format')!r})")
        return ThresholdReport(
            thresholds=[float(t) for t in data["thresholds_km"]],
            fractions=[float(f) for f in data["fractions"]],
            count=int(data["count"]),
            median_km=float(data["median_km"]),
            mean_km=float(data["mean_km"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
        raise DataError(f"Malformed report document: {e}") from e


def read_points_csv(path) -> Dict[str, GeoPoint]:
    """query_id -> point from a ``query_id,lat,lon`` CSV."""
    points: Dict[str, GeoPoint] = {}
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or not {"query_id", "lat", "lon"} <= set(reader.fieldnames):
                raise DataError(f"{path}: expected columns query_id, lat, lon")
            for lineno, row in enumerate(reader, start=2):
                qid = row["query_id"]
                if qid in points:
                    raise DataError(f"{path} line {lineno}: duplicate query_id {qid}")
                try:
                    points[qid] = GeoPoint(float(row["lat"]), float(row["lon"]))
                except (TypeError, ValueError) as e:
                    raise DataError(f"{path} line {lineno}: {e}") from e
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    return points


def join_records(predicted: Dict[str, GeoPoint], truth: Dict[str, GeoPoint]) -> List[EvalRecord]:
    """Pair predictions with truth by query_id; predictions without truth are an error."""
    unmatched = sorted(set(predicted) - set(truth))
    if unmatched:
        shown = ", ".join(unmatched[:20]) + (" ..." if len(unmatched) > 20 else "")
        raise DataError(f"{len(unmatched)} prediction id(s) have no ground truth: {shown}")
    return [EvalRecord(qid, predicted[qid], truth[qid]) for qid in sorted(predicted)]


def evaluate_files(predictions_csv, truth_csv, thresholds: Sequence[float] = PAPER_THRESHOLDS_KM
                   ) -> Tuple[ThresholdReport, List[EvalRecord]]:
    predicted, truth = read_points_csv(predictions_csv), read_points_csv(truth_csv)
    for path, rows in ((predictions_csv, predicted), (truth_csv, truth)):
        if not rows:
            raise DataError(f"{path} has no rows")
    records = join_records(predicted, truth)
    report = gcd_accuracy(records, thresholds)
    logger.info("evaluated %d predictions", report.count)
    return report, records
