"""Classification metrics, graph structural statistics, adjacency rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    per_class_f1: tuple[float, ...]
    macro_f1: float
    confusion: tuple[tuple[int, ...], ...]  # confusion[true][pred]


def compute_metrics(preds: Sequence[int], labels: Sequence[int], K: int) -> Metrics:
    """Accuracy, per-class F1 (0 when precision+recall is 0), unweighted macro-F1."""
    if len(preds) != len(labels) or not labels:
        raise ValueError("preds and labels must be equal-length and non-empty")
    confusion = np.zeros((K, K), dtype=np.int64)
    for p, y in zip(preds, labels):
        if not (0 <= y < K and 0 <= p < K):
            raise ValueError(f"label or prediction out of range for K={K}: ({p}, {y})")
        confusion[y][p] += 1
    accuracy = float(np.trace(confusion)) / len(labels)
    per_class = []
    for k in range(K):
        tp = confusion[k][k]
        predicted = confusion[:, k].sum()
        actual = confusion[k, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append(float(f1))
    macro = float(np.mean(per_class))
    return Metrics(
        accuracy=accuracy,
        per_class_f1=tuple(per_class),
        macro_f1=macro,
        confusion=tuple(tuple(int(x) for x in row) for row in confusion),
    )


@dataclass(frozen=True)
class GraphStats:
    """Edge counts follow the directed-entry convention: 2x the undirected count."""

    avg_nodes: float
    avg_edges: float
    avg_degree: float
    disk_bytes: int


def graph_stats(graphs: Sequence, disk_bytes: int | None = None) -> GraphStats:
    """Mean node count, directed entry count and per-document degree.

    Degree is averaged per document (entries/nodes), so a corpus of complete
    graphs reports mean(|V|) - 1. When disk_bytes is not supplied it is the
    size of the JSON-lines serialization.
    """
    if not graphs:
        raise ValueError("graph_stats requires at least one graph")
    nodes = np.array([len(g.nodes) for g in graphs], dtype=np.float64)
    entries = np.array([2 * len(g.edges) for g in graphs], dtype=np.float64)
    if disk_bytes is None:
        from .graphgen import graph_to_json_line

        disk_bytes = sum(len(graph_to_json_line(g).encode("utf-8")) + 1 for g in graphs)
    return GraphStats(
        avg_nodes=float(nodes.mean()),
        avg_edges=float(entries.mean()),
        avg_degree=float((entries / nodes).mean()),
        disk_bytes=int(disk_bytes),
    )


def graph_to_matrix(graph) -> np.ndarray:
    """Symmetric weighted adjacency in first-occurrence node order, zero diagonal."""
    n = len(graph.nodes)
    m = np.zeros((n, n), dtype=np.float32)
    for i, j, w in graph.edges:
        m[i, j] = w
        m[j, i] = w
    return m


def adjacency_to_pgm_bytes(matrix: np.ndarray, mode: str = "weighted") -> bytes:
    """Render a square matrix as a binary PGM (P5), one pixel per cell.

    weighted: linear map of [0, max] to [255, 0] (dark = strong);
    binarized: nonzero -> black, zero -> white.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("matrix must be 2-D and non-empty")
    if mode == "binarized":
        pixels = np.where(m != 0, 0, 255).astype(np.uint8)
    elif mode == "weighted":
        vmax = m.max()
        if vmax <= 0:
            pixels = np.full(m.shape, 255, dtype=np.uint8)
        else:
            pixels = np.round(255.0 * (1.0 - np.clip(m, 0, vmax) / vmax)).astype(np.uint8)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def render_adjacency(source, mode: str, path: str | Path) -> int:
    """Write a PGM for a DocumentGraph or a raw square matrix; returns bytes written."""
    matrix = source if isinstance(source, np.ndarray) else graph_to_matrix(source)
    data = adjacency_to_pgm_bytes(matrix, mode)
    with open(path, "wb") as fh:
        return fh.write(data)
