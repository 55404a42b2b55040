"""Sentence-graph construction: statistical filtering of attention, consolidation,
and the five heuristic baseline schemes.

Every builder returns a connected, self-loop-free graph over unique sentences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .attnmodel import AttentionMatrix
from .corpus import Document
from .embedstore import EmbeddedDocument

MEAN_BOUND = "mean_bound"
MAX_BOUND = "max_bound"


@dataclass(frozen=True)
class FilterConfig:
    strategy: str = MEAN_BOUND
    delta: float = 0.5

    def __post_init__(self):
        if self.strategy not in (MEAN_BOUND, MAX_BOUND):
            raise ValueError(f"unknown filter strategy {self.strategy!r}")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True)
class GraphNode:
    text: str
    feat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "feat", np.asarray(self.feat, dtype=np.float32))


@dataclass(frozen=True)
class DocumentGraph:
    """Undirected weighted graph over a document's unique sentences.

    Edges are canonical (i < j); construction validates distinct node texts,
    absence of self-loops, finite weights and connectivity from node 0.
    """

    doc_id: str
    label: int
    nodes: tuple[GraphNode, ...]
    edges: tuple[tuple[int, int, float], ...]
    scheme: str

    def __post_init__(self):
        texts = [node.text for node in self.nodes]
        if len(set(texts)) != len(texts):
            raise ValueError(f"graph {self.doc_id!r}: duplicate node texts")
        if not self.nodes:
            raise ValueError(f"graph {self.doc_id!r}: no nodes")
        seen = set()
        for i, j, w in self.edges:
            if i == j:
                raise ValueError(f"graph {self.doc_id!r}: self-loop at node {i}")
            if not (0 <= i < j < len(self.nodes)):
                raise ValueError(f"graph {self.doc_id!r}: non-canonical edge ({i}, {j})")
            if (i, j) in seen:
                raise ValueError(f"graph {self.doc_id!r}: duplicate edge ({i}, {j})")
            if not np.isfinite(w):
                raise ValueError(f"graph {self.doc_id!r}: non-finite weight on ({i}, {j})")
            seen.add((i, j))
        if not _connected(len(self.nodes), self.edges):
            raise ValueError(f"graph {self.doc_id!r}: not connected")


def _connected(n: int, edges: Iterable[tuple[int, int, float]]) -> bool:
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j, _ in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


# ---------------------------------------------------------------------------
# Statistical filtering


def threshold_mean(row: np.ndarray, delta: float) -> float:
    """mean + delta * population std of the full row."""
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty row")
    return float(row.mean() + delta * row.std())


def threshold_max(row: np.ndarray, delta: float) -> float:
    """max - delta * population std of the full row."""
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty row")
    return float(row.max() - delta * row.std())


@dataclass(frozen=True)
class RetentionSet:
    """Per-row retained (column, value) pairs; the diagonal is never retained."""

    rows: tuple[tuple[tuple[int, float], ...], ...]

    def pairs(self) -> Iterable[tuple[int, int, float]]:
        for i, row in enumerate(self.rows):
            for j, value in row:
                yield i, j, value

    def row_empty(self, i: int) -> bool:
        return not self.rows[i]


def filter_matrix(A: np.ndarray, cfg: FilterConfig) -> RetentionSet:
    """Row-wise thresholding; statistics run over the full row, diagonal included,
    but the diagonal entry itself is never retained."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"attention matrix must be square, got {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError("attention matrix has non-finite entries")
    threshold = threshold_mean if cfg.strategy == MEAN_BOUND else threshold_max
    rows = []
    for i in range(A.shape[0]):
        tau = threshold(A[i], cfg.delta)
        retained = tuple((j, float(A[i, j])) for j in range(A.shape[1]) if j != i and A[i, j] >= tau)
        rows.append(retained)
    return RetentionSet(rows=tuple(rows))


# ---------------------------------------------------------------------------
# Consolidation


def unique_sentence_map(sentences: Sequence[str]) -> tuple[list[str], list[int]]:
    """First-occurrence unique sentences and the position -> node index map."""
    unique: list[str] = []
    index: dict[str, int] = {}
    mapping = []
    for s in sentences:
        if s not in index:
            index[s] = len(unique)
            unique.append(s)
        mapping.append(index[s])
    return unique, mapping


def merge_duplicates(
    sentences: Sequence[str], retention: RetentionSet, A: np.ndarray
) -> tuple[list[str], list[int], dict[tuple[int, int], float]]:
    """Collapse identical sentences onto their first occurrence.

    Retained pairs are remapped to node indices; collisions keep the maximum
    weight and pairs that collapse onto a single node are dropped. The pair
    dict stays directional (row node -> column node).
    """
    n = len(sentences)
    if A.shape[0] != n:
        raise ValueError(f"matrix size {A.shape[0]} != sentence count {n}")
    unique, mapping = unique_sentence_map(sentences)
    pairs: dict[tuple[int, int], float] = {}
    for i, j, value in retention.pairs():
        a, b = mapping[i], mapping[j]
        if a == b:
            continue
        key = (a, b)
        if key not in pairs or value > pairs[key]:
            pairs[key] = value
    return unique, mapping, pairs


def repair_edges(
    mapping: Sequence[int], pairs: dict[tuple[int, int], float], A: np.ndarray
) -> dict[int, list[tuple[int, float]]]:
    """Edges restoring nodes whose row retained nothing.

    Such a node links to the unique-mapped neighbours of its first position,
    splitting its self-attention weight evenly; a boundary node puts the full
    weight on its single neighbour. The added weights per node always sum to
    the self-attention value whenever at least one distinct neighbour exists.
    """
    n = len(mapping)
    node_count = max(mapping) + 1
    first_pos = [-1] * node_count
    for pos, node in enumerate(mapping):
        if first_pos[node] < 0:
            first_pos[node] = pos
    has_row = {a for a, _ in pairs}
    repairs: dict[int, list[tuple[int, float]]] = {}
    for node in range(node_count):
        if node in has_row:
            continue
        pos = first_pos[node]
        self_weight = float(A[pos, pos])
        targets: list[int] = []
        for neighbour_pos in (pos - 1, pos + 1):
            if 0 <= neighbour_pos < n:
                target = mapping[neighbour_pos]
                if target != node and target not in targets:
                    targets.append(target)
        if not targets:
            continue
        share = self_weight / len(targets)
        repairs[node] = [(target, share) for target in targets]
    return repairs


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(a)] = self.find(b)


def preserve_connectivity(
    mapping: Sequence[int], pairs: dict[tuple[int, int], float], A: np.ndarray
) -> list[tuple[int, int, float]]:
    """Symmetrize retained pairs and guarantee a single connected component.

    An undirected edge exists when either direction was retained, carrying the
    maximum weight. Empty-row nodes get their neighbour repairs; any residual
    disconnection (possible after duplicate merging) is bridged between
    consecutive-sentence representatives at half self-attention weight.
    """
    node_count = max(mapping) + 1
    edges: dict[tuple[int, int], float] = {}

    def put(a: int, b: int, w: float) -> None:
        key = (a, b) if a < b else (b, a)
        if key not in edges or w > edges[key]:
            edges[key] = w

    for (a, b), w in pairs.items():
        put(a, b, w)
    for node, targets in repair_edges(mapping, pairs, A).items():
        for target, w in targets:
            put(node, target, w)

    uf = _UnionFind(node_count)
    for a, b in edges:
        uf.union(a, b)
    components = {uf.find(x) for x in range(node_count)}
    if len(components) > 1:
        for pos in range(len(mapping) - 1):
            a, b = mapping[pos], mapping[pos + 1]
            if a != b and uf.find(a) != uf.find(b):
                put(a, b, float(A[pos, pos]) / 2.0)
                uf.union(a, b)

    return [(i, j, w) for (i, j), w in sorted(edges.items())]


# ---------------------------------------------------------------------------
# Graph builders


def _check_consistent(doc: Document, emb: EmbeddedDocument) -> None:
    if emb.n != doc.n:
        raise ValueError(f"document {doc.id!r}: {doc.n} sentences but {emb.n} embedding rows")


def _nodes_from(doc: Document, emb: EmbeddedDocument, mapping: Sequence[int]) -> tuple[GraphNode, ...]:
    node_count = max(mapping) + 1
    first_pos = [-1] * node_count
    for pos, node in enumerate(mapping):
        if first_pos[node] < 0:
            first_pos[node] = pos
    return tuple(GraphNode(text=doc.sentences[first_pos[u]], feat=emb.X[first_pos[u]]) for u in range(node_count))


def build_learned(
    doc: Document, emb: EmbeddedDocument, attention: AttentionMatrix, cfg: FilterConfig
) -> DocumentGraph:
    """Attention matrix -> filtered, consolidated, connected weighted graph."""
    _check_consistent(doc, emb)
    if attention.n != doc.n:
        raise ValueError(f"document {doc.id!r}: attention size {attention.n} != {doc.n} sentences")
    retention = filter_matrix(attention.A, cfg)
    unique, mapping, pairs = merge_duplicates(doc.sentences, retention, attention.A)
    edges = preserve_connectivity(mapping, pairs, attention.A)
    tag = "learned-mean" if cfg.strategy == MEAN_BOUND else "learned-max"
    return DocumentGraph(
        doc_id=doc.id,
        label=doc.label,
        nodes=_nodes_from(doc, emb, mapping),
        edges=tuple(edges),
        scheme=f"{tag}:delta={cfg.delta:g}",
    )


def build_complete(doc: Document, emb: EmbeddedDocument) -> DocumentGraph:
    """Unweighted edges between every pair of unique sentences."""
    _check_consistent(doc, emb)
    _, mapping = unique_sentence_map(doc.sentences)
    k = max(mapping) + 1
    edges = tuple((i, j, 1.0) for i in range(k) for j in range(i + 1, k))
    return DocumentGraph(
        doc_id=doc.id, label=doc.label, nodes=_nodes_from(doc, emb, mapping), edges=edges, scheme="complete"
    )


def build_order(doc: Document, emb: EmbeddedDocument) -> DocumentGraph:
    """Binary edges between consecutive sentences, after unique-mapping."""
    _check_consistent(doc, emb)
    _, mapping = unique_sentence_map(doc.sentences)
    seen = set()
    for pos in range(len(mapping) - 1):
        a, b = mapping[pos], mapping[pos + 1]
        if a != b:
            seen.add((min(a, b), max(a, b)))
    edges = tuple((i, j, 1.0) for i, j in sorted(seen))
    return DocumentGraph(
        doc_id=doc.id, label=doc.label, nodes=_nodes_from(doc, emb, mapping), edges=edges, scheme="order"
    )


def build_window(doc: Document, emb: EmbeddedDocument, half_width: int = 2) -> DocumentGraph:
    """Binary edges between sentences within half_width positions of each other."""
    _check_consistent(doc, emb)
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    _, mapping = unique_sentence_map(doc.sentences)
    seen = set()
    n = len(mapping)
    for pos in range(n):
        for other in range(pos + 1, min(n, pos + half_width + 1)):
            a, b = mapping[pos], mapping[other]
            if a != b:
                seen.add((min(a, b), max(a, b)))
    edges = tuple((i, j, 1.0) for i, j in sorted(seen))
    return DocumentGraph(
        doc_id=doc.id, label=doc.label, nodes=_nodes_from(doc, emb, mapping), edges=edges, scheme="window"
    )


def similarity_matrix(emb: EmbeddedDocument) -> np.ndarray:
    """Pairwise cosine similarity of the embedding rows; unit diagonal."""
    X = emb.X.astype(np.float64)
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0).any():
        raise ValueError(f"document {emb.id!r}: zero-norm embedding row")
    unit = X / norms[:, None]
    S = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return S


def build_semantic(doc: Document, emb: EmbeddedDocument, cfg: FilterConfig) -> DocumentGraph:
    """Cosine-similarity graph filtered and consolidated like the learned graphs."""
    _check_consistent(doc, emb)
    S = similarity_matrix(emb)
    retention = filter_matrix(S, cfg)
    unique, mapping, pairs = merge_duplicates(list(doc.sentences), retention, S)
    edges = preserve_connectivity(mapping, pairs, S)
    tag = "semantic-mean" if cfg.strategy == MEAN_BOUND else "semantic-max"
    return DocumentGraph(
        doc_id=doc.id,
        label=doc.label,
        nodes=_nodes_from(doc, emb, mapping),
        edges=tuple(edges),
        scheme=f"{tag}:delta={cfg.delta:g}",
    )


# ---------------------------------------------------------------------------
# Serialization: JSON-lines and the DGGR binary container

GRAPH_MAGIC = b"DGGR"
GRAPH_VERSION = 1


def graph_to_json_line(graph: DocumentGraph) -> str:
    return json.dumps(
        {
            "doc_id": graph.doc_id,
            "label": graph.label,
            "scheme": graph.scheme,
            "nodes": [{"text": n.text, "feat": [float(x) for x in n.feat]} for n in graph.nodes],
            "edges": [[i, j, float(w)] for i, j, w in graph.edges],
        }
    )


def graph_from_json_line(line: str) -> DocumentGraph:
    obj = json.loads(line)
    nodes = tuple(GraphNode(text=n["text"], feat=np.asarray(n["feat"], dtype=np.float32)) for n in obj["nodes"])
    edges = tuple((int(i), int(j), float(w)) for i, j, w in obj["edges"])
    return DocumentGraph(
        doc_id=obj["doc_id"], label=int(obj["label"]), nodes=nodes, edges=edges, scheme=obj["scheme"]
    )


def write_graphs_jsonl(graphs: Iterable[DocumentGraph], path: str | Path) -> int:
    written = 0
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            written += fh.write(graph_to_json_line(g) + "\n")
    return written


def read_graphs_jsonl(path: str | Path) -> list[DocumentGraph]:
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                graphs.append(graph_from_json_line(line))
    return graphs


def write_graphs_binary(graphs: Sequence[DocumentGraph], path: str | Path) -> int:
    """DGGR container: per graph a text block, a feature block, and u32,u32,f32 edge triples."""
    dims = {g.nodes[0].feat.shape[0] for g in graphs}
    if len(dims) > 1:
        raise ValueError(f"mixed feature dimensions: {sorted(dims)}")
    d = dims.pop() if dims else 0
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(GRAPH_MAGIC)
        written += fh.write(struct.pack("<HIQ", GRAPH_VERSION, d, len(graphs)))
        for g in graphs:
            id_bytes = g.doc_id.encode("utf-8")
            scheme_bytes = g.scheme.encode("utf-8")
            written += fh.write(struct.pack("<H", len(id_bytes)))
            written += fh.write(id_bytes)
            written += fh.write(struct.pack("<I", g.label))
            written += fh.write(struct.pack("<H", len(scheme_bytes)))
            written += fh.write(scheme_bytes)
            written += fh.write(struct.pack("<II", len(g.nodes), len(g.edges)))
            for node in g.nodes:
                text_bytes = node.text.encode("utf-8")
                written += fh.write(struct.pack("<H", len(text_bytes)))
                written += fh.write(text_bytes)
            feats = np.vstack([n.feat for n in g.nodes]).astype("<f4")
            written += fh.write(feats.tobytes())
            for i, j, w in g.edges:
                written += fh.write(struct.pack("<IIf", i, j, w))
    return written


def read_graphs_binary(path: str | Path) -> list[DocumentGraph]:
    from .embedstore import BadMagicError, TruncatedPayloadError, VersionMismatchError

    def read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
        buf = fh.read(count)
        if len(buf) != count:
            raise TruncatedPayloadError(f"truncated payload while reading {what}")
        return buf

    graphs = []
    with open(path, "rb") as fh:
        magic = read_exact(fh, 4, "magic")
        if magic != GRAPH_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {GRAPH_MAGIC!r}")
        version, d, count = struct.unpack("<HIQ", read_exact(fh, 14, "header"))
        if version != GRAPH_VERSION:
            raise VersionMismatchError(f"unsupported version {version}")
        for _ in range(count):
            (id_len,) = struct.unpack("<H", read_exact(fh, 2, "id length"))
            doc_id = read_exact(fh, id_len, "id").decode("utf-8")
            (label,) = struct.unpack("<I", read_exact(fh, 4, "label"))
            (scheme_len,) = struct.unpack("<H", read_exact(fh, 2, "scheme length"))
            scheme = read_exact(fh, scheme_len, "scheme").decode("utf-8")
            node_count, edge_count = struct.unpack("<II", read_exact(fh, 8, "counts"))
            texts = []
            for _ in range(node_count):
                (text_len,) = struct.unpack("<H", read_exact(fh, 2, "text length"))
                texts.append(read_exact(fh, text_len, "text").decode("utf-8"))
            payload = read_exact(fh, 4 * node_count * d, "features")
            feats = np.frombuffer(payload, dtype="<f4").reshape(node_count, d)
            edges = []
            for _ in range(edge_count):
                i, j, w = struct.unpack("<IIf", read_exact(fh, 12, "edge"))
                edges.append((int(i), int(j), float(w)))
            nodes = tuple(GraphNode(text=t, feat=feats[k].copy()) for k, t in enumerate(texts))
            graphs.append(
                DocumentGraph(doc_id=doc_id, label=int(label), nodes=nodes, edges=tuple(edges), scheme=scheme)
            )
    return graphs
