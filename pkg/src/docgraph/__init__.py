"""Document-graph construction and classification toolkit.

Pipeline stages: corpus preparation, sentence-embedding storage, a
ReLU-attention document classifier, attention-to-graph conversion with
statistical filtering, heuristic baseline graphs, a GAT classifier, and
evaluation utilities. See the CLI module for orchestration.
"""

from .attnmodel import AttentionMatrix, AttnConfig, AttnModel, extract_attention, relu_attention
from .corpus import DatasetMeta, Document, RawDocument, clean_text, merge_short, split_dataset, split_sentences, truncate
from .embedstore import EmbeddedDocument, cosine, read_embeddings, synth_embeddings, write_embeddings
from .evalstats import GraphStats, Metrics, compute_metrics, graph_stats, render_adjacency
from .gatnet import GatConfig, GatModel, predict, train_gat
from .graphgen import (
    DocumentGraph,
    FilterConfig,
    build_complete,
    build_learned,
    build_order,
    build_semantic,
    build_window,
    filter_matrix,
    threshold_max,
    threshold_mean,
)

__version__ = "0.1.0"
