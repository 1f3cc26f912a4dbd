# File: geosurge/cli.py
import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from .config import PAPER_SCHEDULE, FusionConfig, RunConfig
from .datakit import (
    BLOB_MAGIC, CHECKPOINT_MAGIC, BlobReader, checkpoint_from_model, generate_synthetic, load_arrays,
    model_from_checkpoint, read_checkpoint, read_manifest, split, write_checkpoint,
)
from .errors import ConfigError, DataError, GeoSurgeError, IntegrityError
from .evalkit import evaluate_files, parse_report_json, render_report
from .fusion import encode_batch
from .inference import Predictor, predictions_document, write_predictions_csv
from .partition import Sample, build_hierarchy, coverage_report, read_hierarchy, select_levels, write_hierarchy
from .trainer import build_model, fit, make_batch

logger = logging.getLogger("geosurge")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_config(args, overrides: Dict[str, object]) -> RunConfig:
    config = RunConfig.load(args.config)
    preset = getattr(args, "preset", None)
    if preset is not None:
        data = config.to_dict()
        data["fusion"] = dataclasses.asdict(FusionConfig.preset(preset))
        config = RunConfig.from_dict(data)
    overrides = dict(overrides)
    overrides["seed"] = args.seed
    overrides["threads"] = args.threads
    config = config.with_overrides(overrides)
    logger.debug("effective config: %s", config.to_json())
    return config


def _write_json(path: str, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _base_dir(manifest: str) -> str:
    return os.path.dirname(os.path.abspath(manifest))


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------

def cmd_synth(args):
    config = _load_config(args, {
        "synthetic.n_clusters": args.clusters,
        "synthetic.samples_per_cluster": args.per_cluster,
        "synthetic.noise_sigma": args.sigma,
        "synthetic.seed": args.seed,
    })
    ds = generate_synthetic(config.synthetic, args.out)
    _write_json(os.path.join(args.out, "dataset.json"), {"format": "geosurge-dataset", "config": config.to_dict()})
    counts: Dict[str, int] = {}
    for r in ds.records:
        counts[r.split] = counts.get(r.split, 0) + 1
    print(f"Wrote {len(ds.records)} records to {ds.manifest_path}")
    for name in sorted(counts):
        print(f"  {name}: {counts[name]}")


def cmd_partition(args):
    config = _load_config(args, {
        "hierarchy.tau_min": args.tau_min,
        "hierarchy.tau_max_schedule": args.tau_max,
    })
    records = [r for r in read_manifest(args.manifest) if r.split == args.split]
    if not records:
        raise DataError(f"No records with split {args.split!r} in {args.manifest}")
    samples = [Sample(r.id, r.location, cluster=r.cluster) for r in records]
    h = build_hierarchy(samples, config.hierarchy.tau_min, config.hierarchy.tau_max_schedule)
    if config.hierarchy.levels is not None:
        h = select_levels(h, config.hierarchy.levels)
    digest = write_hierarchy(args.out, h, config=config.to_dict())
    report = coverage_report(h, samples)
    print(f"Wrote {h.depth}-level hierarchy to {args.out} (sha256 {digest[:12]})")
    for stats in report.levels:
        print(f"  tau_max={stats.tau_max:>6}  cells={stats.cells:>6}  "
              f"members {stats.min_members}..{stats.max_members}  covered {100 * stats.covered_fraction:.1f}%")
    print(f"  excluded from training: {report.excluded_from_training} of {report.samples}")


def cmd_train(args):
    config = _load_config(args, {
        "train.epochs_max": args.epochs,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
        "train.seed": args.seed,
        "fusion.blocks": args.blocks,
        "train.objective": args.objective,
    })
    h, digest, _ = read_hierarchy(args.hierarchy)
    records = [r for r in read_manifest(args.manifest) if r.split == args.split]
    if not records:
        raise DataError(f"No records with split {args.split!r} in {args.manifest}")
    tc = config.train
    tagged = split(records, {"fit": 1.0 - tc.val_fraction, "val": tc.val_fraction}, tc.seed)
    base = _base_dir(args.manifest)

    def batch_for(name):
        chosen, rgb, seg = load_arrays(tagged, base, name)
        return make_batch(h, [r.location for r in chosen], rgb, seg)

    train_batch, val_batch = batch_for("fit"), batch_for("val")
    fc = config.fusion
    if train_batch.rgb.shape[2] != fc.kv_dim or train_batch.seg.shape[1:] != (fc.seg_height, fc.seg_width):
        raise ConfigError(
            f"fusion config expects tokens of width {fc.kv_dim} and maps {fc.seg_height}x{fc.seg_width}; "
            f"data has width {train_batch.rgb.shape[2]} and maps {train_batch.seg.shape[1]}x{train_batch.seg.shape[2]}")
    model = build_model(h, fc, seed=config.seed, objective=tc.objective, precision=tc.precision)
    result = fit(model, train_batch, val_batch, tc, log_path=args.log)
    write_checkpoint(args.out, checkpoint_from_model(model, config.to_dict(), digest))
    print(f"Trained on {len(train_batch)} samples ({len(val_batch)} validation), "
          f"{len(result.history)} epochs; best validation loss {result.best_val_loss:.4f}")
    print(f"Wrote checkpoint to {args.out}")


def cmd_infer(args):
    config = _load_config(args, {
        "inference.mode": args.mode,
        "inference.top_k": args.top_k,
        "inference.split": args.split,
    })
    h, digest, _ = read_hierarchy(args.hierarchy)
    model = model_from_checkpoint(read_checkpoint(args.checkpoint), h, digest)
    records, rgb, seg = load_arrays(read_manifest(args.manifest), _base_dir(args.manifest), config.inference.split)
    if not records:
        raise DataError(f"No records with split {config.inference.split!r} in {args.manifest}")
    features = encode_batch(rgb, seg, model.fusion)

    groups: Dict[str, List[int]] = {}
    for k, r in enumerate(records):
        groups.setdefault(r.query_id, []).append(k)
    query_ids = sorted(groups)
    predictor = Predictor(h, model.representation, config.inference.mode, config.inference.top_k,
                          threads=config.resolve_threads())
    preds = predictor.predict_many([features[groups[q]] for q in query_ids])
    out = [p.to_record(q) for q, p in zip(query_ids, preds)]
    write_predictions_csv(args.out, out)
    if args.json:
        with open(args.json, "w", encoding="utf-8", newline="\n") as f:
            f.write(predictions_document(out, config.to_dict()))
    print(f"Wrote {len(out)} predictions to {args.out}")


def cmd_eval(args):
    config = _load_config(args, {"eval.thresholds_km": args.thresholds})
    report, _ = evaluate_files(args.predictions, args.truth, config.eval.thresholds_km)
    if args.format == "json":
        doc = report.to_dict()
        doc["config"] = config.to_dict()
        text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    else:
        text = render_report(report, args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    sys.stdout.write(text)


def _inspect_json(path: str, doc) -> None:
    kind = doc.get("format") if isinstance(doc, dict) else None
    if kind == "geosurge-hierarchy":
        print(f"hierarchy: tau_min={doc['tau_min']} schedule={doc['schedule']}")
        for level in doc["levels"]:
            counts = [c["member_count"] for c in level["cells"]]
            print(f"  tau_max={level['tau_max']:>6}  cells={len(counts):>6}  members={sum(counts)}")
    elif kind == "geosurge-report":
        sys.stdout.write(render_report(parse_report_json(json.dumps(doc)), "text"))
    elif kind == "geosurge-predictions":
        print(f"predictions: {len(doc['predictions'])} queries, mode={doc['config'].get('inference', {}).get('mode')}")
    elif kind == "geosurge-dataset":
        syn = doc["config"]["synthetic"]
        print(f"synthetic dataset: {syn['n_clusters']} clusters x {syn['samples_per_cluster']} samples, seed {syn['seed']}")
    else:
        raise DataError(f"{path}: unrecognized JSON document (format={kind!r})")


def cmd_inspect(args):
    path = args.path
    try:
        with open(path, "rb") as f:
            head = f.read(4)
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e

    if head == CHECKPOINT_MAGIC:
        ckpt = read_checkpoint(path)
        total = int(np.sum([t.size for t in ckpt.tensors.values()]))
        print(f"checkpoint: {len(ckpt.tensors)} tensors, {total} values, objective={ckpt.objective}")
        print(f"  hierarchy sha256 {ckpt.hierarchy_hash}")
        for name in sorted(ckpt.tensors):
            t = ckpt.tensors[name]
            print(f"  {name:<40} {str(t.dtype):<8} {tuple(t.shape)}")
    elif head == BLOB_MAGIC:
        shapes: Dict[tuple, int] = {}
        for _, arr in BlobReader(path):
            key = (str(arr.dtype), arr.shape)
            shapes[key] = shapes.get(key, 0) + 1
        print(f"blob file: {sum(shapes.values())} records")
        for (dtype, shape), n in sorted(shapes.items()):
            print(f"  {n:>8} x {dtype} {shape}")
    elif path.endswith(".jsonl"):
        records = read_manifest(path)
        counts: Dict[str, int] = {}
        for r in records:
            counts[r.split] = counts.get(r.split, 0) + 1
        print(f"manifest: {len(records)} records")
        for name in sorted(counts):
            print(f"  {name}: {counts[name]}")
    elif path.endswith(".csv"):
        with open(path, "r", encoding="utf-8") as f:
            rows = sum(1 for _ in f) - 1
        print(f"csv: {max(rows, 0)} rows")
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: not a geosurge artifact ({e})") from e
        _inspect_json(path, doc)


# -----------------------------------------------------------------------------
# Entry point
# -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file; flags override its keys")
    common.add_argument("--seed", type=int, help="Global seed (overrides config)")
    common.add_argument("--threads", type=int, help="Worker cap (falls back to $GEOSURGE_THREADS, then 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = _Parser(description="GeoSURGE geolocation pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic geotagged dataset")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--clusters", type=int, help="Number of location clusters")
    p.add_argument("--per-cluster", type=int, help="Samples per cluster")
    p.add_argument("--sigma", type=float, help="Feature noise standard deviation")
    p.set_defaults(func=cmd_synth)

    p = subparsers.add_parser("partition", parents=[common], help="Build the partition hierarchy")
    p.add_argument("--manifest", required=True, help="Manifest JSON lines")
    p.add_argument("--tau-min", type=int, help="Minimum samples per cell")
    p.add_argument("--tau-max", type=_int_list,
                   help=f"Comma-separated decreasing maxima (default {','.join(map(str, PAPER_SCHEDULE))})")
    p.add_argument("--split", default="train", help="Manifest split to partition (default: train)")
    p.add_argument("--out", required=True, help="Hierarchy JSON output")
    p.set_defaults(func=cmd_partition)

    p = subparsers.add_parser("train", parents=[common], help="Train fusion network and geographic embeddings")
    p.add_argument("--manifest", required=True, help="Manifest JSON lines")
    p.add_argument("--hierarchy", required=True, help="Hierarchy JSON from 'partition'")
    p.add_argument("--out", required=True, help="Checkpoint output")
    p.add_argument("--log", help="Per-epoch JSON-lines training log")
    p.add_argument("--split", default="train", help="Manifest split to train on (default: train)")
    p.add_argument("--preset", choices=["desk", "paper"], help="Fusion dimensions preset")
    p.add_argument("--epochs", type=int, help="Maximum epochs")
    p.add_argument("--batch-size", type=int, help="Contrastive batch size")
    p.add_argument("--lr", type=float, help="Initial learning rate")
    p.add_argument("--blocks", type=int, help="Fusion blocks (0 disables fusion)")
    p.add_argument("--objective", choices=["contrastive", "classification"], help="Training objective")
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("infer", parents=[common], help="Predict locations for a manifest split")
    p.add_argument("--manifest", required=True, help="Manifest JSON lines")
    p.add_argument("--hierarchy", required=True, help="Hierarchy JSON used for training")
    p.add_argument("--checkpoint", required=True, help="Checkpoint from 'train'")
    p.add_argument("--split", help="Manifest split to predict (default: test)")
    p.add_argument("--mode", choices=["softmax", "raw_product"], help="Per-level scoring")
    p.add_argument("--top-k", type=int, help="Cells listed per prediction")
    p.add_argument("--out", required=True, help="Predictions CSV (query_id, lat, lon)")
    p.add_argument("--json", help="Also write the prediction JSON document here")
    p.set_defaults(func=cmd_infer)

    p = subparsers.add_parser("eval", parents=[common], help="Great-circle threshold accuracy")
    p.add_argument("--predictions", required=True, help="Predictions CSV")
    p.add_argument("--truth", required=True, help="Ground-truth CSV")
    p.add_argument("--thresholds", type=_float_list, help="Comma-separated km thresholds")
    p.add_argument("--format", choices=["text", "csv", "json"], default="text", help="Report format")
    p.add_argument("--out", help="Also write the report here")
    p.set_defaults(func=cmd_eval)

    p = subparsers.add_parser("inspect", parents=[common], help="Summarize any geosurge artifact")
    p.add_argument("path", help="Artifact file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except GeoSurgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
