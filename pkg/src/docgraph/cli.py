"""Command-line pipeline: prep, train-attn, build, train-gat, eval, stats, render.

Configuration precedence is flags > TOML config file > defaults; the
DOCGRAPH_SEED environment variable is the seed fallback. Diagnostics go to
stderr; commands are idempotent for fixed inputs and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import attnmodel, autodiff, corpus, embedstore, evalstats, gatnet, graphgen

SCHEMES = (
    "learned-mean",
    "learned-max",
    "complete",
    "order",
    "window",
    "semantic-mean",
    "semantic-max",
)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


class _Resolver:
    """Merge parsed flags (None = unset), a TOML section, and defaults."""

    def __init__(self, args: argparse.Namespace, command: str):
        self.args = args
        self.table = {}
        config_path = getattr(args, "config", None)
        if config_path:
            with open(config_path, "rb") as fh:
                data = tomllib.load(fh)
            # per-command section when present, else the file is one flat table
            self.table = data.get(command, data)
            if not isinstance(self.table, dict):
                raise ValueError(f"config section {command!r} must be a table")

    def get(self, key: str, default=None):
        value = getattr(self.args, key.replace("-", "_"), None)
        if value is not None:
            return value
        if key in self.table:
            return self.table[key]
        return default

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise SystemExit(f"error: missing required option --{key}")
        return value

    def seed(self) -> int:
        value = self.get("seed")
        if value is None:
            value = os.environ.get("DOCGRAPH_SEED", 0)
        return int(value)


def _split_docs(items, split_of: dict[str, str], what: str):
    trains = [x for x in items if split_of.get(x.id if hasattr(x, "id") else x.doc_id) == "train"]
    vals = [x for x in items if split_of.get(x.id if hasattr(x, "id") else x.doc_id) == "val"]
    tests = [x for x in items if split_of.get(x.id if hasattr(x, "id") else x.doc_id) == "test"]
    if not trains or not vals:
        raise SystemExit(f"error: empty train or val split in {what}")
    return trains, vals, tests


def _infer_classes(labels, given) -> int:
    return int(given) if given is not None else max(labels) + 1


def _write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(
                json.dumps(
                    {"epoch": rec.epoch, "train_loss": rec.train_loss, "val_macro_f1": rec.val_macro_f1}
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_prep(args: argparse.Namespace) -> int:
    r = _Resolver(args, "prep")
    input_path = r.require("input")
    outdir = Path(r.require("outdir"))
    classes = int(r.require("classes"))
    cap = int(r.get("cap", 1800))
    min_words = int(r.get("min-words", corpus.MIN_SENTENCE_WORDS))
    name = str(r.get("name", "dataset"))
    fractions = r.get("fractions", "0.72,0.08,0.20")
    if isinstance(fractions, str):
        fractions = tuple(float(x) for x in fractions.split(","))
    seed = r.seed()

    meta = corpus.DatasetMeta(name=name, K=classes, truncation_cap=cap, split_fractions=tuple(fractions))
    raw_docs = corpus.load_raw_jsonl(input_path)
    prepared = []
    dropped_empty = 0
    for raw in raw_docs:
        doc = corpus.prepare_document(raw, cap=cap, min_words=min_words)
        if doc is None:
            dropped_empty += 1
        else:
            prepared.append(doc)
    if dropped_empty:
        _log(f"prep: dropped {dropped_empty} documents with empty text")

    test_ids = None
    test_ids_path = r.get("test-ids")
    if test_ids_path:
        test_ids = {line.strip() for line in open(test_ids_path, encoding="utf-8") if line.strip()}

    train, val, test = corpus.split_dataset(prepared, meta, seed=seed, test_ids=test_ids)
    kept = {d.id for d in train} | {d.id for d in val} | {d.id for d in test}
    duplicates = len(prepared) - len(kept)
    if duplicates:
        _log(f"prep: removed {duplicates} duplicate documents")

    outdir.mkdir(parents=True, exist_ok=True)
    ordered = [d for d in prepared if d.id in kept]
    corpus.write_documents_jsonl(ordered, outdir / "sentences.jsonl")
    corpus.write_split_manifest({"train": train, "val": val, "test": test}, outdir / "splits.jsonl")
    _log(f"prep: {len(train)} train / {len(val)} val / {len(test)} test documents -> {outdir}")

    synth_path = r.get("synth-embed")
    if synth_path:
        dim = int(r.get("synth-dim", 384))
        embedded = [embedstore.synth_embeddings(d, d=dim, seed=seed) for d in ordered]
        embedstore.write_embeddings(embedded, synth_path)
        _log(f"prep: wrote synthetic d={dim} embeddings for {len(embedded)} documents -> {synth_path}")
    return 0


def cmd_train_attn(args: argparse.Namespace) -> int:
    r = _Resolver(args, "train-attn")
    docs = embedstore.read_embeddings(r.require("embeddings"))
    if not docs:
        raise SystemExit("error: embeddings file holds no documents")
    split_of = corpus.read_split_manifest(r.require("splits"))
    train, val, _ = _split_docs(docs, split_of, "embeddings")

    cfg = attnmodel.AttnConfig(
        heads=int(r.get("heads", 4)),
        layers=int(r.get("layers", 1)),
        d_model=docs[0].d,
        K=_infer_classes([d.label for d in docs], r.get("classes")),
        lr=float(r.get("lr", 0.001)),
        batch_size=int(r.get("batch", 32)),
        max_epochs=int(r.get("epochs", 20)),
        patience=int(r.get("patience", 5)),
        seed=r.seed(),
    )
    model, history = attnmodel.train(train, val, cfg)
    out = r.require("out")
    autodiff.save_params(model.named_parameters(), out)
    with open(str(out) + ".json", "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, sort_keys=True)
    history_path = r.get("history", str(out) + ".history.jsonl")
    _write_history(history, history_path)
    _log(f"train-attn: best val macro-F1 {max(h.val_macro_f1 for h in history):.4f} over {len(history)} epochs")
    return 0


def _load_attn_model(checkpoint_path: str) -> attnmodel.AttnModel:
    with open(str(checkpoint_path) + ".json", encoding="utf-8") as fh:
        cfg = attnmodel.AttnConfig(**json.load(fh))
    model = attnmodel.AttnModel(cfg)
    model.load_state(autodiff.load_params(checkpoint_path))
    return model


def cmd_build(args: argparse.Namespace) -> int:
    r = _Resolver(args, "build")
    schemes = r.require("scheme")
    if isinstance(schemes, str):
        schemes = [schemes]
    if "all" in schemes:
        schemes = list(SCHEMES)
    unknown = [s for s in schemes if s not in SCHEMES]
    if unknown:
        raise SystemExit(f"error: unknown schemes {unknown}; choose from {list(SCHEMES)} or 'all'")

    docs = corpus.read_documents_jsonl(r.require("sentences"))
    embedded = {e.id: e for e in embedstore.read_embeddings(r.require("embeddings"))}
    missing = [d.id for d in docs if d.id not in embedded]
    if missing:
        raise SystemExit(f"error: {len(missing)} documents missing embeddings (first: {missing[0]!r})")

    delta = float(r.get("delta", 0.5))
    model = None
    if any(s.startswith("learned") for s in schemes):
        model = _load_attn_model(r.require("checkpoint"))

    out = Path(r.require("out"))
    multi = len(schemes) > 1
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    binary = bool(r.get("binary", False))

    for scheme in schemes:
        graphs = []
        for doc in docs:
            emb = embedded[doc.id]
            if scheme == "complete":
                g = graphgen.build_complete(doc, emb)
            elif scheme == "order":
                g = graphgen.build_order(doc, emb)
            elif scheme == "window":
                g = graphgen.build_window(doc, emb)
            elif scheme in ("semantic-mean", "semantic-max"):
                strategy = graphgen.MEAN_BOUND if scheme.endswith("mean") else graphgen.MAX_BOUND
                g = graphgen.build_semantic(doc, emb, graphgen.FilterConfig(strategy=strategy, delta=delta))
            else:
                strategy = graphgen.MEAN_BOUND if scheme.endswith("mean") else graphgen.MAX_BOUND
                attention = attnmodel.extract_attention(model, emb)
                g = graphgen.build_learned(doc, emb, attention, graphgen.FilterConfig(strategy=strategy, delta=delta))
            graphs.append(g)
        ext = "dggr" if binary else "jsonl"
        target = out / f"graphs-{scheme}.{ext}" if multi else out
        if binary or str(target).endswith(".dggr"):
            graphgen.write_graphs_binary(graphs, target)
        else:
            graphgen.write_graphs_jsonl(graphs, target)
        _log(f"build: wrote {len(graphs)} {scheme} graphs -> {target}")
    return 0


def _read_graphs(path: str) -> list[graphgen.DocumentGraph]:
    if str(path).endswith(".dggr"):
        return graphgen.read_graphs_binary(path)
    return graphgen.read_graphs_jsonl(path)


def cmd_train_gat(args: argparse.Namespace) -> int:
    r = _Resolver(args, "train-gat")
    graphs = _read_graphs(r.require("graphs"))
    split_of = corpus.read_split_manifest(r.require("splits"))
    train, val, _ = _split_docs(graphs, split_of, "graphs")

    cfg = gatnet.GatConfig(
        layers=int(r.get("layers", 2)),
        hidden=int(r.get("hidden", 64)),
        keep_prob=float(r.get("keep-prob", 0.8)),
        lr=float(r.get("lr", 0.001)),
        batch_size=int(r.get("batch", 64)),
        max_epochs=int(r.get("epochs", 50)),
        patience=int(r.get("patience", 5)),
        K=_infer_classes([g.label for g in graphs], r.get("classes")),
        seed=r.seed(),
    )
    model, history = gatnet.train_gat(train, val, cfg)
    out = r.require("out")
    autodiff.save_params(model.named_parameters(), out)
    with open(str(out) + ".json", "w", encoding="utf-8") as fh:
        json.dump({**asdict(cfg), "feat_dim": model.feat_dim}, fh, sort_keys=True)
    history_path = r.get("history", str(out) + ".history.jsonl")
    _write_history(history, history_path)
    _log(f"train-gat: best val macro-F1 {max(h.val_macro_f1 for h in history):.4f} over {len(history)} epochs")
    return 0


def _load_gat_model(checkpoint_path: str) -> gatnet.GatModel:
    with open(str(checkpoint_path) + ".json", encoding="utf-8") as fh:
        blob = json.load(fh)
    feat_dim = blob.pop("feat_dim")
    cfg = gatnet.GatConfig(**blob)
    model = gatnet.GatModel(cfg, feat_dim=feat_dim)
    model.load_state(autodiff.load_params(checkpoint_path))
    return model


def cmd_eval(args: argparse.Namespace) -> int:
    r = _Resolver(args, "eval")
    graphs_path = r.require("graphs")
    graphs = _read_graphs(graphs_path)
    split_of = corpus.read_split_manifest(r.require("splits"))
    model = _load_gat_model(r.require("checkpoint"))
    test = [g for g in graphs if split_of.get(g.doc_id) == "test"]
    if not test:
        raise SystemExit("error: no test graphs found")

    preds = [gatnet.predict(model, g)[0] for g in test]
    metrics = evalstats.compute_metrics(preds, [g.label for g in test], model.cfg.K)
    stats = evalstats.graph_stats(graphs, disk_bytes=os.path.getsize(graphs_path))
    report = {
        "scheme": graphs[0].scheme,
        "dataset": str(r.get("dataset", "dataset")),
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
        "per_class_f1": list(metrics.per_class_f1),
        "avg_nodes": stats.avg_nodes,
        "avg_edges": stats.avg_edges,
        "avg_degree": stats.avg_degree,
        "disk_bytes": stats.disk_bytes,
    }
    payload = json.dumps(report, sort_keys=True)
    report_path = r.get("report")
    if report_path:
        Path(report_path).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    _log(f"eval: accuracy {metrics.accuracy:.4f}, macro-F1 {metrics.macro_f1:.4f} on {len(test)} test graphs")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    r = _Resolver(args, "stats")
    graphs_path = r.require("graphs")
    graphs = _read_graphs(graphs_path)
    stats = evalstats.graph_stats(graphs, disk_bytes=os.path.getsize(graphs_path))
    report = {
        "scheme": graphs[0].scheme,
        "graphs": len(graphs),
        "avg_nodes": stats.avg_nodes,
        "avg_edges": stats.avg_edges,
        "avg_degree": stats.avg_degree,
        "disk_bytes": stats.disk_bytes,
    }
    payload = json.dumps(report, sort_keys=True)
    report_path = r.get("report")
    if report_path:
        Path(report_path).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    r = _Resolver(args, "render")
    graphs = _read_graphs(r.require("graphs"))
    doc_id = r.get("doc-id")
    if doc_id is None:
        graph = graphs[0]
    else:
        matches = [g for g in graphs if g.doc_id == doc_id]
        if not matches:
            raise SystemExit(f"error: no graph with doc id {doc_id!r}")
        graph = matches[0]
    mode = str(r.get("mode", "weighted"))
    out = r.require("out")
    evalstats.render_adjacency(graph, mode, out)
    _log(f"render: {len(graph.nodes)}x{len(graph.nodes)} {mode} adjacency -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file mirroring the flags")
        p.add_argument("--seed", type=int, help="random seed (env DOCGRAPH_SEED is the fallback)")

    p = sub.add_parser("prep", help="clean, tokenize, merge, truncate and split a dataset")
    p.add_argument("--input", help="raw dataset JSON-lines ({id, label, text})")
    p.add_argument("--outdir", help="directory for sentences.jsonl and splits.jsonl")
    p.add_argument("--classes", type=int, help="number of classes K")
    p.add_argument("--cap", type=int, help="max sentences per document")
    p.add_argument("--min-words", type=int, help="short-sentence merge threshold")
    p.add_argument("--name", help="dataset name")
    p.add_argument("--fractions", help="train,val,test fractions")
    p.add_argument("--test-ids", help="file of predefined test document ids")
    p.add_argument("--synth-embed", help="also write synthetic embeddings to this path")
    p.add_argument("--synth-dim", type=int, help="synthetic embedding dimension")
    common(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train-attn", help="train the self-attention classifier")
    p.add_argument("--embeddings")
    p.add_argument("--splits")
    p.add_argument("--out", help="checkpoint path (DGPT container)")
    p.add_argument("--history", help="training history JSON-lines path")
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    common(p)
    p.set_defaults(func=cmd_train_attn)

    p = sub.add_parser("build", help="construct document graphs (precomputed, stored once)")
    p.add_argument("--scheme", action="append", help=f"one of {list(SCHEMES)} or 'all'; repeatable")
    p.add_argument("--sentences")
    p.add_argument("--embeddings")
    p.add_argument("--checkpoint", help="attention checkpoint (learned schemes)")
    p.add_argument("--delta", type=float)
    p.add_argument("--out", help="output file, or directory for multiple schemes")
    p.add_argument("--binary", action="store_const", const=True, help="write the DGGR binary container")
    common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train-gat", help="train the GAT classifier on stored graphs")
    p.add_argument("--graphs")
    p.add_argument("--splits")
    p.add_argument("--out")
    p.add_argument("--history")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--keep-prob", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    common(p)
    p.set_defaults(func=cmd_train_gat)

    p = sub.add_parser("eval", help="evaluate a GAT checkpoint and emit a report row")
    p.add_argument("--graphs")
    p.add_argument("--splits")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--report", help="output JSON path (stdout when omitted)")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="structural statistics of a graphs file")
    p.add_argument("--graphs")
    p.add_argument("--report")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("render", help="render an adjacency matrix as a PGM image")
    p.add_argument("--graphs")
    p.add_argument("--doc-id")
    p.add_argument("--mode", choices=("weighted", "binarized"))
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, KeyError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
