"""Command-line pipeline: synth -> import -> label -> train -> eval -> report.

Configuration comes from a JSON file (--config); --k/--threshold/--seed/--out
override it. One top-level seed drives every stage through named substreams,
so any command rerun with the same config+seed writes identical bytes (traces
and latency.json carry wall-clock fields and are the documented exception).
Commands stage all output in memory and write nothing until they succeed.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import (
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    import_shards,
    kmeans_shard,
    split_by_query,
)
from .features import assemble_features
from .federation import (
    decision_from_probabilities,
    generate_labels,
    oracle_decision,
    relevant_shards,
    result_from_hit_lists,
)
from .metrics import report_from_traces, render_report_files, summarize_latency
from .router import (
    LabeledExample,
    ModelFormatError,
    TrainConfig,
    load_model,
    predict_batch,
    serialize_model,
    train,
)
from .store import search_top_k
from .vecio import VectorFileError, read_vectors, vector_file_bytes


class CliError(Exception):
    """Validation failure surfaced as exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    seed: int
    k: int
    threshold: float
    out: Path
    manifest: Path
    queries_train: Path
    queries_eval: Path
    synthetic: SyntheticSpec
    train: TrainConfig
    split: SplitSpec

    @property
    def labels_path(self) -> Path:
        return self.out / "labels.npy"

    @property
    def model_path(self) -> Path:
        return self.out / "router.rrm"

    @property
    def traces_path(self) -> Path:
        return self.out / "traces.jsonl"


def load_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc

    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    k = args.k if args.k is not None else int(doc.get("k", 10))
    threshold = args.threshold if args.threshold is not None else float(doc.get("threshold", 0.5))
    out = Path(args.out if args.out is not None else doc.get("out", "run"))
    if k < 1:
        raise CliError("k must be >= 1")
    if not 0.0 <= threshold <= 1.0:
        raise CliError("threshold must be in [0, 1]")

    def build(cls, key: str, defaults: dict):
        fields_doc = {**defaults, **doc.get(key, {})}
        try:
            return cls(**fields_doc)
        except TypeError as exc:
            raise CliError(f"bad '{key}' config block: {exc}") from exc

    syn_doc = dict(doc.get("synthetic", {}))
    if "points_per_cluster" in syn_doc:
        syn_doc["points_per_cluster"] = tuple(syn_doc["points_per_cluster"])
    syn_doc.setdefault("seed", seed)
    try:
        synthetic = SyntheticSpec(**syn_doc)
    except TypeError as exc:
        raise CliError(f"bad 'synthetic' config block: {exc}") from exc

    train_cfg = build(TrainConfig, "train", {"seed": seed})
    split = build(SplitSpec, "split", {"seed": seed})
    return RunConfig(
        seed=seed,
        k=k,
        threshold=threshold,
        out=out,
        manifest=Path(doc.get("manifest", out / "manifest.json")),
        queries_train=Path(doc.get("queries_train", out / "queries_train.fvr")),
        queries_eval=Path(doc.get("queries_eval", out / "queries_eval.fvr")),
        synthetic=synthetic,
        train=train_cfg,
        split=split,
    )


def _write_all(files: dict[Path, bytes]) -> None:
    """All-or-nothing output: every file lands, or none survive."""
    written: list[Path] = []
    try:
        for path, blob in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(blob)
            os.replace(tmp, path)
            written.append(path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise


def _executor(n_shards: int) -> ThreadPoolExecutor | None:
    cap = os.environ.get("FEDVEC_THREADS")
    try:
        workers = min(n_shards, int(cap)) if cap else min(n_shards, 8)
    except ValueError as exc:
        raise CliError(f"FEDVEC_THREADS must be an integer, got {cap!r}") from exc
    return ThreadPoolExecutor(max_workers=workers) if workers > 1 else None


def cmd_synth(cfg: RunConfig) -> None:
    data = generate_synthetic(cfg.synthetic)
    shards = kmeans_shard(data.corpus, cfg.synthetic.n_clusters, cfg.seed)

    files: dict[Path, bytes] = {}
    shard_paths: dict[int, str] = {}
    for shard in shards:
        rel = f"shards/shard_{shard.shard_id:03d}.fvr"
        shard_paths[shard.shard_id] = rel
        files[cfg.out / rel] = vector_file_bytes(shard.ids, shard.vectors)

    manifest_doc = {
        "dimension": cfg.synthetic.dim,
        "shards": [
            {"shard_id": sid, "path": shard_paths[sid]} for sid in sorted(shard_paths)
        ],
    }
    files[cfg.out / "manifest.json"] = (
        json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n"
    ).encode()
    files[cfg.queries_train] = vector_file_bytes(
        np.arange(len(data.train_queries)), data.train_queries
    )
    files[cfg.queries_eval] = vector_file_bytes(
        np.arange(len(data.eval_queries)), data.eval_queries
    )
    _write_all(files)

    sizes = sorted(s.stats.count for s in shards)
    print(
        f"synth: {data.corpus.shape[0]} vectors (dim {cfg.synthetic.dim}) in "
        f"{len(shards)} shards, sizes {sizes[0]}..{sizes[-1]}; "
        f"{len(data.train_queries)} train + {len(data.eval_queries)} eval queries -> {cfg.out}"
    )


def cmd_import(cfg: RunConfig, manifest: Path | None) -> None:
    path = manifest or cfg.manifest
    shards = import_shards(path)
    print(f"import: {len(shards)} shards from {path}")
    for s in shards:
        print(
            f"  shard {s.shard_id}: {s.stats.count} vectors, dim {s.dim}, "
            f"density {s.stats.density:.4f}"
        )


def cmd_label(cfg: RunConfig) -> None:
    shards = import_shards(cfg.manifest)
    qids, qvecs = read_vectors(cfg.queries_train)
    executor = _executor(len(shards))
    try:
        examples = generate_labels(
            shards, list(zip(qids.tolist(), qvecs)), cfg.k, executor
        )
    finally:
        if executor:
            executor.shutdown()

    feat_dim = examples[0].features.shape[0]
    table = np.zeros(
        len(examples),
        dtype=[
            ("query_id", "<i8"),
            ("shard_id", "<i8"),
            ("label", "<i8"),
            ("features", "<f8", (feat_dim,)),
        ],
    )
    for i, ex in enumerate(examples):
        table[i] = (ex.query_id, ex.shard_id, ex.label, ex.features)

    buf = io.BytesIO()
    np.save(buf, table)
    _write_all({cfg.labels_path: buf.getvalue()})

    n_pos = int(table["label"].sum())
    per_query = table["label"].reshape(len(qids), len(shards)).sum(axis=1)
    print(
        f"label: {len(examples)} rows ({len(qids)} queries x {len(shards)} shards), "
        f"{n_pos} positive ({100.0 * n_pos / len(examples):.1f}%), "
        f"mean relevant shards/query {per_query.mean():.2f}"
    )


def _load_examples(path: Path) -> list[LabeledExample]:
    try:
        table = np.load(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read labels {path}: {exc}") from exc
    return [
        LabeledExample(
            features=row["features"].copy(),
            label=int(row["label"]),
            query_id=int(row["query_id"]),
            shard_id=int(row["shard_id"]),
        )
        for row in table
    ]


def cmd_train(cfg: RunConfig) -> None:
    examples = _load_examples(cfg.labels_path)
    result = train(examples, cfg.split, cfg.train)

    log_lines = ["epoch,train_loss,val_accuracy,lr_start,lr_end"]
    for e in result.history:
        log_lines.append(
            f"{e.epoch},{e.train_loss!r},{e.val_accuracy!r},{e.lr_start!r},{e.lr_end!r}"
        )
    _write_all(
        {
            cfg.model_path: serialize_model(result.model),
            cfg.out / "training_log.csv": ("\n".join(log_lines) + "\n").encode(),
        }
    )
    best = result.history[result.best_epoch - 1]
    print(
        f"train: {len(result.history)} epochs on {len(examples)} rows; "
        f"best epoch {result.best_epoch} (val accuracy {best.val_accuracy:.4f}) -> {cfg.model_path}"
    )


def cmd_eval(cfg: RunConfig) -> None:
    shards = import_shards(cfg.manifest)
    if any(s is None for s in shards):
        raise CliError("manifest contains unavailable shards")
    model = load_model(cfg.model_path)
    qids, qvecs = read_vectors(cfg.queries_train)
    _, _, test_q = split_by_query(qids, cfg.split)
    keep = np.isin(qids, sorted(test_q))
    qids, qvecs = qids[keep], qvecs[keep]
    if qids.size == 0:
        raise CliError("test split is empty")

    stats = [s.stats for s in shards]
    dim = shards[0].dim
    n_shards = len(shards)
    executor = _executor(n_shards)
    traces: list[dict] = []
    route_latencies: list[int] = []

    def fan_out(query: np.ndarray) -> list:
        if executor is not None:
            return list(executor.map(lambda s: search_top_k(s, query, cfg.k), shards))
        return [search_top_k(s, query, cfg.k) for s in shards]

    try:
        for qid, query in zip(qids.tolist(), qvecs):
            hit_lists = fan_out(query)

            all_selected = decision_from_probabilities(qid, np.ones(n_shards), 0.5)
            naive_res = result_from_hit_lists(all_selected, hit_lists, dim, cfg.k)
            truth_ids = {(h.shard_id, h.vector_id) for h in naive_res.hits}
            shard_recall = [
                len({(h.shard_id, h.vector_id) for h in hits} & truth_ids) / len(truth_ids)
                for hits in hit_lists
            ]
            relevant = relevant_shards(naive_res.hits, shards)

            oracle = oracle_decision(qid, relevant.astype(bool), n_shards)
            oracle_res = result_from_hit_lists(oracle, hit_lists, dim, cfg.k)

            rows = np.stack([assemble_features(query, s) for s in stats])
            t0 = time.perf_counter_ns()
            probs = predict_batch(model, rows)
            latency = time.perf_counter_ns() - t0
            route_latencies.append(latency)
            decision = decision_from_probabilities(qid, probs, cfg.threshold)
            pred_res = result_from_hit_lists(decision, hit_lists, dim, cfg.k)
            pred_ids = {(h.shard_id, h.vector_id) for h in pred_res.hits}
            oracle_ids = {(h.shard_id, h.vector_id) for h in oracle_res.hits}

            base = {"query_id": qid, "k": cfg.k, "latency_ns": 0}
            traces.append(
                base
                | {
                    "strategy": "naive",
                    "probabilities": None,
                    "selected": [1] * n_shards,
                    "relevant": None,
                    "m": naive_res.shards_queried,
                    "embeddings_returned": naive_res.embeddings_returned,
                    "bytes_moved": naive_res.bytes_moved,
                    "recall": 1.0,
                    "shard_recalls": shard_recall,
                    "fallback_used": False,
                }
            )
            traces.append(
                base
                | {
                    "strategy": "oracle",
                    "probabilities": None,
                    "selected": [int(v) for v in oracle.selected],
                    "relevant": None,
                    "m": oracle_res.shards_queried,
                    "embeddings_returned": oracle_res.embeddings_returned,
                    "bytes_moved": oracle_res.bytes_moved,
                    "recall": len(oracle_ids & truth_ids) / len(truth_ids),
                    "shard_recalls": None,
                    "fallback_used": False,
                }
            )
            traces.append(
                base
                | {
                    "strategy": "predicted",
                    "probabilities": [float(p) for p in probs],
                    "selected": [int(v) for v in decision.selected],
                    "relevant": [int(v) for v in relevant],
                    "m": pred_res.shards_queried,
                    "embeddings_returned": pred_res.embeddings_returned,
                    "bytes_moved": pred_res.bytes_moved,
                    "recall": len(pred_ids & truth_ids) / len(truth_ids),
                    "shard_recalls": None,
                    "fallback_used": decision.fallback_used,
                    "latency_ns": latency,
                }
            )
    finally:
        if executor:
            executor.shutdown()

    # Batch-32 inference figure: median of 100 timed runs on real feature rows.
    bench_rows = np.stack([assemble_features(qvecs[i % len(qvecs)], stats[i % n_shards]) for i in range(32)])
    samples = []
    for _ in range(100):
        t0 = time.perf_counter_ns()
        predict_batch(model, bench_rows)
        samples.append(time.perf_counter_ns() - t0)
    latency_block = summarize_latency(route_latencies, float(np.median(samples)))

    report = report_from_traces(traces, n_shards, cfg.threshold, latency=latency_block)
    files = {
        cfg.traces_path: ("\n".join(json.dumps(t, sort_keys=True) for t in traces) + "\n").encode()
    }
    for name, blob in render_report_files(report).items():
        files[cfg.out / name] = blob
    _write_all(files)

    agg = report.aggregate
    print(
        f"eval: {agg['n_queries']} test queries over {n_shards} shards (k={cfg.k}); "
        f"mean recall {agg['mean_recall']:.4f}, "
        f"queries {agg['total_queries_routed']}/{agg['total_queries_naive']} "
        f"({agg['query_reduction_pct']:.1f}% reduction), "
        f"bytes {agg['volume_reduction_pct']:.1f}% reduction"
    )
    _print_quality(report.quality)


def _print_quality(quality: dict) -> None:
    for name, row in quality.items():
        bound = f">= {row['min']}" if "min" in row else f"<= {row['max']}"
        value = "n/a" if row["value"] is None else f"{row['value']:.4f}"
        print(f"  [{'PASS' if row['pass'] else 'FAIL'}] {name} {value} {bound}")


def cmd_report(cfg: RunConfig) -> None:
    try:
        lines = cfg.traces_path.read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read traces {cfg.traces_path}: {exc}") from exc
    traces = [json.loads(line) for line in lines if line.strip()]
    if not traces:
        raise CliError(f"no trace records in {cfg.traces_path}")
    n_shards = len(traces[0]["selected"])
    report = report_from_traces(traces, n_shards, cfg.threshold)
    files = {
        cfg.out / name: blob for name, blob in render_report_files(report).items()
    }
    _write_all(files)
    print(f"report: rebuilt {len(files)} files from {len(traces)} trace records")
    _print_quality(report.quality)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedvec",
        description="Federated vector search with a learned relevance router.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--k", type=int, help="top-k depth")
    parser.add_argument("--threshold", type=float, help="routing threshold")
    parser.add_argument("--seed", type=int, help="top-level seed")
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate a synthetic sharded corpus + queries")
    p_import = sub.add_parser("import", help="validate and summarize a shard manifest")
    p_import.add_argument("--manifest", help="manifest path (default: config)")
    sub.add_parser("label", help="derive ground-truth shard labels from naive search")
    sub.add_parser("train", help="train the relevance router")
    sub.add_parser("eval", help="run naive/oracle/predicted routing on the test split")
    sub.add_parser("report", help="rebuild report files from existing traces")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "import":
            cmd_import(cfg, Path(args.manifest) if args.manifest else None)
        elif args.command == "label":
            cmd_label(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "report":
            cmd_report(cfg)
    except (CliError, ValueError, VectorFileError, ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
