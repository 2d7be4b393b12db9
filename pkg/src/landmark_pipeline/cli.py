"""Command-line interface.

One subcommand per pipeline stage plus ``pipeline`` for end-to-end runs and
``gen-synthetic`` for reproducible fixtures. Worker count comes from
``--threads`` or the ``LP_THREADS`` environment variable and never changes
results. Failures exit with a stage-specific code.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

from landmark_pipeline import __version__, metric_math, metrics, pipeline, vector_ops
from landmark_pipeline.cleaning import CleaningConfig, clean_train_set
from landmark_pipeline.dataset import (
    SyntheticConfig,
    generate_synthetic,
    load_descriptors,
    load_labels,
    load_local_features,
    save_descriptors,
    save_labels,
    save_local_features,
)
from landmark_pipeline.geometry import RansacConfig, verify_pair
from landmark_pipeline.knn import knn_search, read_ranked_csv, to_ranked_list, write_ranked_csv
from landmark_pipeline.recognition import (
    DistractorConfig,
    RecognitionConfig,
    read_predictions,
    recognize_batch,
    suppress_distractors,
    write_predictions,
)
from landmark_pipeline.rerank import rerank_batch

EXIT_CODES = {
    "config": 2,
    "ingest": 3,
    "gen-synthetic": 4,
    "augment": 5,
    "search": 6,
    "verify": 7,
    "clean": 8,
    "recognize": 9,
    "suppress": 10,
    "rerank": 11,
    "evaluate": 12,
    "mathcheck": 13,
}


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


def _fail(stage: str, message: str) -> "CliError":
    return CliError(stage, message)


def _default_threads() -> int:
    return int(os.environ.get("LP_THREADS", "1"))


def _load_normalized(path: str, stage: str):
    try:
        return vector_ops.l2_normalize(load_descriptors(path))
    except Exception as err:
        raise _fail(stage, f"{path}: {err}") from err


def _ransac_from_args(args) -> RansacConfig:
    return RansacConfig(
        iterations=args.iterations,
        reprojection_tolerance=args.tolerance,
        inlier_threshold=args.inlier_threshold,
        match_distance_max=args.match_distance,
        mutual_check=not args.no_mutual,
        seed=args.seed,
    )


def _add_ransac_args(p: argparse.ArgumentParser):
    p.add_argument("--inlier-threshold", type=int, default=30)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=3.0)
    p.add_argument("--match-distance", type=float, default=0.8)
    p.add_argument("--no-mutual", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def cmd_ingest(args) -> int:
    for path in args.descriptors or []:
        m = _load_normalized(path, "ingest") if args.normalize else None
        if m is None:
            try:
                m = load_descriptors(path)
            except Exception as err:
                raise _fail("ingest", f"{path}: {err}") from err
        zero = vector_ops.zero_row_ids(m)
        print(f"{path}: {m.n} descriptors, dim {m.dim}, {len(zero)} zero rows")
    if args.features:
        try:
            feats = load_local_features(args.features)
        except Exception as err:
            raise _fail("ingest", f"{args.features}: {err}") from err
        counts = [feats[i].count for i in feats.ids()]
        total = sum(counts)
        print(
            f"{args.features}: {len(feats)} images, {total} keypoints, "
            f"d_local {feats.d_local}"
        )
    if args.labels:
        try:
            table = load_labels(args.labels)
        except Exception as err:
            raise _fail("ingest", f"{args.labels}: {err}") from err
        hist = table.histogram()
        print(f"{args.labels}: {len(table)} images, {len(hist)} labels")
    return 0


def cmd_gen_synthetic(args) -> int:
    cfg = SyntheticConfig(
        n_labels=args.num_labels,
        train_per_label=args.train_per_label,
        index_per_label=args.index_per_label,
        test_per_label=args.test_per_label,
        dim=args.dim,
        spread=args.spread,
        distractor_fraction=args.distractor_fraction,
        train_outliers_per_label=args.train_outliers_per_label,
        n_keypoints=args.keypoints,
        n_outlier_keypoints=args.outlier_keypoints,
        d_local=args.d_local,
        keypoint_noise_px=args.keypoint_noise,
        descriptor_noise=args.descriptor_noise,
        seed=args.seed,
    )
    try:
        data = generate_synthetic(cfg)
    except ValueError as err:
        raise _fail("gen-synthetic", str(err)) from err
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_descriptors(data.train, out / "train.gldv")
    save_descriptors(data.index, out / "index.gldv")
    save_descriptors(data.test, out / "test.gldv")
    save_local_features(data.features, out / "features.lfea")
    save_labels(data.labels, out / "labels.csv")
    metrics.write_relevance(
        metrics.RelevanceTable(relevant=data.relevance), out / "relevance.csv"
    )
    metrics.write_recognition_truth(
        metrics.RecognitionTruth(labels=data.test_labels), out / "recognition_truth.csv"
    )
    print(
        f"wrote fixture to {out}: train {data.train.n}, index {data.index.n}, "
        f"test {data.test.n}, {len(data.features)} feature sets"
    )
    return 0


def cmd_search(args) -> int:
    queries = _load_normalized(args.query, "search")
    db = _load_normalized(args.index, "search")
    try:
        neighbor_lists = knn_search(queries, db, k=args.k)
    except ValueError as err:
        raise _fail("search", str(err)) from err
    write_ranked_csv([to_ranked_list(nl) for nl in neighbor_lists], args.out)
    print(f"wrote {len(neighbor_lists)} ranked lists to {args.out}")
    return 0


def cmd_augment(args) -> int:
    wrote = False
    try:
        if args.multiscale:
            if not args.out:
                raise ValueError("--multiscale needs --out")
            if args.scales and len(args.scales) != len(args.multiscale):
                raise ValueError("--scales count must match --multiscale inputs")
            models = [_load_normalized(p, "augment") for p in args.multiscale]
            save_descriptors(vector_ops.multiscale_average(models), args.out)
            print(f"averaged {len(models)} scale sets -> {args.out}")
            wrote = True
        if args.concat:
            if not args.out:
                raise ValueError("--concat needs --out")
            models = [_load_normalized(p, "augment") for p in args.concat]
            merged = vector_ops.concat_ensemble(models)
            save_descriptors(merged, args.out)
            print(f"concatenated {len(models)} models (dim {merged.dim}) -> {args.out}")
            wrote = True
        db = None
        if args.db:
            db = _load_normalized(args.db, "augment")
            if args.dba_k > 0:
                db = vector_ops.dba(db, args.dba_k)
            if args.out_db:
                save_descriptors(db, args.out_db)
                print(f"DBA(k={args.dba_k}) db -> {args.out_db}")
                wrote = True
        if args.query:
            if db is None:
                raise ValueError("--query expansion needs --db")
            q = _load_normalized(args.query, "augment")
            if args.qe_k > 0:
                q = vector_ops.alpha_qe(q, db, args.qe_k, args.qe_alpha)
            if args.out_query:
                save_descriptors(q, args.out_query)
                print(f"alphaQE(k={args.qe_k}, alpha={args.qe_alpha}) -> {args.out_query}")
                wrote = True
    except CliError:
        raise
    except ValueError as err:
        raise _fail("augment", str(err)) from err
    if not wrote:
        raise _fail("augment", "nothing to do: pass --multiscale, --concat, or --db/--query")
    return 0


def cmd_verify(args) -> int:
    try:
        features = load_local_features(args.features)
    except Exception as err:
        raise _fail("verify", f"{args.features}: {err}") from err
    cfg = _ransac_from_args(args)
    pairs = []
    with open(args.pairs, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["src", "dst"]:
            raise _fail("verify", f"{args.pairs}: expected header 'src,dst'")
        pairs = [(row[0], row[1]) for row in reader if row]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst", "inliers", "verified"])
        for src, dst in pairs:
            try:
                result = verify_pair(src, dst, features, cfg)
            except KeyError as err:
                raise _fail("verify", str(err)) from err
            writer.writerow(
                [src, dst, result.inlier_count, "true" if result.verified else "false"]
            )
    print(f"verified {len(pairs)} pairs -> {args.out}")
    return 0


def cmd_clean(args) -> int:
    train = _load_normalized(args.train, "clean")
    try:
        labels = load_labels(args.labels)
        features = load_local_features(args.features)
        cfg = CleaningConfig(
            k=args.k,
            verify_cap=args.verify_cap,
            t_frequency=args.t_frequency,
            ransac=_ransac_from_args(args),
        )
        report = clean_train_set(train, labels, features, cfg)
    except CliError:
        raise
    except (ValueError, KeyError) as err:
        raise _fail("clean", str(err)) from err
    kept_in_order = [i for i in train.ids if i in report.kept]
    Path(args.out).write_text("\n".join(kept_in_order) + ("\n" if kept_in_order else ""))
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "same_label_neighbors", "verified", "kept"])
            for image_id in train.ids:
                rec = report.records[image_id]
                writer.writerow(
                    [
                        rec.image_id,
                        rec.same_label_neighbors,
                        rec.verified,
                        "true" if rec.kept else "false",
                    ]
                )
    print(f"kept {len(report.kept)} of {train.n} train images -> {args.out}")
    return 0


def cmd_recognize(args) -> int:
    queries = _load_normalized(args.query, "recognize")
    train = _load_normalized(args.train, "recognize")
    try:
        labels = load_labels(args.labels)
        features = load_local_features(args.features) if not args.no_spatial else None
        cfg = RecognitionConfig(
            knn=args.knn,
            t=args.t,
            use_spatial=not args.no_spatial,
            spatial_outside_sum=args.spatial_outside_sum,
            ransac=_ransac_from_args(args),
        )
        preds = recognize_batch(
            queries, train, labels, cfg, features=features, threads=args.threads
        )
    except CliError:
        raise
    except (ValueError, KeyError) as err:
        raise _fail("recognize", str(err)) from err
    if args.raw_out:
        write_predictions(preds, args.raw_out)
    try:
        final = suppress_distractors(
            preds, DistractorConfig(frequency_threshold=args.distractor_threshold)
        )
    except ValueError as err:
        raise _fail("suppress", str(err)) from err
    write_predictions(final, args.out)
    print(f"predicted {len(final)} queries -> {args.out}")
    return 0


def cmd_rerank(args) -> int:
    try:
        ranked = read_ranked_csv(args.ranked)
        test_preds = {p.query_id: p for p in read_predictions(args.test_preds)}
        index_preds = {p.query_id: p for p in read_predictions(args.index_preds)}
        out = rerank_batch(
            ranked, test_preds, index_preds, args.cap, args.min_confidence
        )
    except (ValueError, KeyError) as err:
        raise _fail("rerank", str(err)) from err
    write_ranked_csv(out, args.out)
    print(f"re-ranked {len(out)} queries -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    metric = args.metric.lower()
    try:
        if metric == "gap":
            preds = read_predictions(args.pred)
            truth = metrics.read_recognition_truth(args.truth)
            value = metrics.gap(preds, truth)
        elif metric == "map":
            ranked = read_ranked_csv(args.pred)
            truth_rel = metrics.read_relevance(args.truth)
            value = metrics.mean_ap(ranked, truth_rel)
        elif metric.startswith("map@"):
            k = int(metric.split("@", 1)[1])
            ranked = read_ranked_csv(args.pred)
            truth_rel = metrics.read_relevance(args.truth)
            value = metrics.map_at_k(ranked, truth_rel, k)
        else:
            raise ValueError(f"unknown metric {args.metric!r} (use map@K, map, or gap)")
    except (ValueError, KeyError) as err:
        raise _fail("evaluate", str(err)) from err
    print(f"{metric}: {value:.6f}")
    if args.breakdown:
        _write_breakdown(metric, args, args.breakdown)
    return 0


def _write_breakdown(metric: str, args, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if metric == "gap":
            preds = read_predictions(args.pred)
            truth = metrics.read_recognition_truth(args.truth)
            ordered = sorted(preds, key=lambda p: (-p.confidence, p.query_id))
            writer.writerow(["rank", "id", "confidence", "correct"])
            for rank, p in enumerate(ordered, start=1):
                true_label = truth.labels[p.query_id]
                correct = true_label is not None and p.label == true_label
                writer.writerow([rank, p.query_id, repr(p.confidence), int(correct)])
        else:
            ranked = read_ranked_csv(args.pred)
            truth_rel = metrics.read_relevance(args.truth)
            writer.writerow(["id", "ap"])
            for rl in ranked:
                if not truth_rel.relevant.get(rl.query_id):
                    writer.writerow([rl.query_id, ""])
                    continue
                if metric == "map":
                    value = metrics.mean_ap([rl], truth_rel)
                else:
                    value = metrics.map_at_k([rl], truth_rel, int(metric.split("@")[1]))
                writer.writerow([rl.query_id, f"{value:.6f}"])


def cmd_mathcheck(args) -> int:
    rows = metric_math.self_check(seed=args.seed, instances=args.instances)
    width = max(len(name) for name, _, _ in rows)
    failures = 0
    for name, ok, detail in rows:
        status = "PASS" if ok else "FAIL"
        failures += 0 if ok else 1
        suffix = f"  ({detail})" if detail else ""
        print(f"{name:<{width}}  {status}{suffix}")
    print(f"{len(rows) - failures}/{len(rows)} checks passed")
    return 0 if failures == 0 else EXIT_CODES["mathcheck"]


def cmd_pipeline(args) -> int:
    try:
        cfg = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    except ValueError as err:
        raise _fail("config", str(err)) from err
    overrides = {}
    for name in (
        "mode", "train", "index", "test", "labels", "features",
        "relevance_truth", "recognition_truth", "out_dir", "seed",
        "dba_k", "qe_k", "qe_alpha", "cap", "knn", "t",
        "distractor_threshold", "inlier_threshold",
    ):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.ensemble_train:
        overrides["ensemble_train"] = args.ensemble_train
    if args.ensemble_index:
        overrides["ensemble_index"] = args.ensemble_index
    if args.ensemble_test:
        overrides["ensemble_test"] = args.ensemble_test
    if args.no_spatial:
        overrides["use_spatial"] = False
    if args.spatial_outside_sum:
        overrides["spatial_outside_sum"] = True
    # Flag beats environment beats config file; none of them changes results.
    if args.threads is not None:
        overrides["threads"] = args.threads
    elif "LP_THREADS" in os.environ:
        overrides["threads"] = _default_threads()
    cfg = replace(cfg, **overrides)

    if cfg.mode not in ("retrieval", "recognition", "both"):
        raise _fail("config", f"mode must be retrieval|recognition|both, got {cfg.mode!r}")

    all_metrics: list[pipeline.StageMetric] = []
    if cfg.mode in ("retrieval", "both"):
        all_metrics += pipeline.run_retrieval_pipeline(cfg)
    if cfg.mode in ("recognition", "both"):
        all_metrics += pipeline.run_recognition_pipeline(cfg)
    if all_metrics:
        print(f"{'stage':<12} {'metric':<10} value")
        for row in all_metrics:
            print(f"{row.stage:<12} {row.metric:<10} {row.value:.6f}")
    print(f"outputs in {cfg.out_dir} (manifest.json records config hash and checksums)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lp", description="landmark retrieval/recognition pipeline"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and summarize input files")
    p.add_argument("--descriptors", nargs="*", default=[])
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("gen-synthetic", help="write a deterministic synthetic fixture")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-labels", type=int, default=4)
    p.add_argument("--train-per-label", type=int, default=6)
    p.add_argument("--index-per-label", type=int, default=4)
    p.add_argument("--test-per-label", type=int, default=2)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--spread", type=float, default=0.05)
    p.add_argument("--distractor-fraction", type=float, default=0.0)
    p.add_argument("--train-outliers-per-label", type=int, default=0)
    p.add_argument("--keypoints", type=int, default=40)
    p.add_argument("--outlier-keypoints", type=int, default=10)
    p.add_argument("--d-local", type=int, default=16)
    p.add_argument("--keypoint-noise", type=float, default=0.5)
    p.add_argument("--descriptor-noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("search", help="exact brute-force euclidean search")
    p.add_argument("--query", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--metric", choices=["l2"], default="l2")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("augment", help="multiscale average, ensemble concat, DBA, alpha-QE")
    p.add_argument("--multiscale", nargs="*", default=[])
    p.add_argument("--scales", nargs="*", type=float, default=[])
    p.add_argument("--concat", nargs="*", default=[])
    p.add_argument("--db")
    p.add_argument("--query")
    p.add_argument("--dba-k", type=int, default=vector_ops.DEFAULT_DBA_K)
    p.add_argument("--qe-k", type=int, default=vector_ops.DEFAULT_QE_K)
    p.add_argument("--qe-alpha", type=float, default=vector_ops.DEFAULT_QE_ALPHA)
    p.add_argument("--out")
    p.add_argument("--out-db")
    p.add_argument("--out-query")
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("verify", help="spatially verify image pairs")
    p.add_argument("--features", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    _add_ransac_args(p)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("clean", help="three-step automated train-set cleaning")
    p.add_argument("--train", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--verify-cap", type=int, default=100)
    p.add_argument("--t-frequency", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_ransac_args(p)
    p.set_defaults(fn=cmd_clean)

    p = sub.add_parser("recognize", help="soft-voting recognition with suppression")
    p.add_argument("--query", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--t", type=float, default=70.0)
    p.add_argument("--knn", type=int, default=3)
    p.add_argument("--distractor-threshold", type=int, default=30)
    p.add_argument("--no-spatial", action="store_true")
    p.add_argument("--spatial-outside-sum", action="store_true")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--out", required=True)
    p.add_argument("--raw-out")
    _add_ransac_args(p)
    p.set_defaults(fn=cmd_recognize)

    p = sub.add_parser("rerank", help="discriminative re-ranking by predicted label")
    p.add_argument("--ranked", required=True)
    p.add_argument("--test-preds", required=True)
    p.add_argument("--index-preds", required=True)
    p.add_argument("--cap", type=int, default=100)
    p.add_argument("--min-confidence", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rerank)

    p = sub.add_parser("evaluate", help="score predictions (map@K, map, gap)")
    p.add_argument("--metric", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--breakdown")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("mathcheck", help="gradient and property checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(fn=cmd_mathcheck)

    p = sub.add_parser("pipeline", help="end-to-end retrieval/recognition run")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["retrieval", "recognition", "both"], default=None)
    p.add_argument("--train")
    p.add_argument("--index")
    p.add_argument("--test")
    p.add_argument("--labels")
    p.add_argument("--features")
    p.add_argument("--relevance-truth")
    p.add_argument("--recognition-truth")
    p.add_argument("--ensemble-train", nargs="*", default=[])
    p.add_argument("--ensemble-index", nargs="*", default=[])
    p.add_argument("--ensemble-test", nargs="*", default=[])
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--dba-k", type=int, default=None)
    p.add_argument("--qe-k", type=int, default=None)
    p.add_argument("--qe-alpha", type=float, default=None)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--knn", type=int, default=None)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--distractor-threshold", type=int, default=None)
    p.add_argument("--inlier-threshold", type=int, default=None)
    p.add_argument("--no-spatial", action="store_true")
    p.add_argument("--spatial-outside-sum", action="store_true")
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as err:
        print(f"error [{err.stage}]: {err}", file=sys.stderr)
        return EXIT_CODES.get(err.stage, 1)
    except pipeline.StageError as err:
        print(f"error [{err.stage}]: {err.cause}", file=sys.stderr)
        return EXIT_CODES.get(err.stage, 1)


if __name__ == "__main__":
    sys.exit(main())
