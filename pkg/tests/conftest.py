"""Shared helpers: synthetic documents, embeddings and corpora used across suites."""

from __future__ import annotations

import numpy as np
import pytest

from docgraph.corpus import Document
from docgraph.embedstore import EmbeddedDocument, synth_embeddings


def make_document(doc_id: str, k: int, label: int = 0, duplicates: tuple[tuple[int, int], ...] = ()) -> Document:
    """A document with k distinct filler sentences; duplicates is a list of
    (src_pos, dst_pos) pairs copying sentence text onto another position."""
    sentences = [f"synthetic sentence number {i} of document {doc_id} padded out" for i in range(k)]
    for src, dst in duplicates:
        sentences[dst] = sentences[src]
    return Document(id=doc_id, label=label, sentences=tuple(sentences))


def make_embedded(doc: Document, d: int = 8, seed: int = 3) -> EmbeddedDocument:
    return synth_embeddings(doc, d=d, seed=seed)


def separable_corpus(
    n_docs: int = 100, d: int = 16, seed: int = 42, strength: float = 0.9
) -> tuple[list[Document], list[EmbeddedDocument]]:
    """Two-class corpus where the class is the sign of embedding coordinate 0;
    a linear classifier on the mean embedding separates it perfectly."""
    rng = np.random.default_rng(seed)
    docs, embs = [], []
    for k in range(n_docs):
        label = k % 2
        n = int(rng.integers(3, 11))
        sentences = tuple(f"document {k} sentence {i} with several filler words" for i in range(n))
        doc = Document(id=f"doc{k}", label=label, sentences=sentences)
        base = synth_embeddings(doc, d=d, seed=7)
        X = base.X.astype(np.float64)
        sign = 1.0 if label == 1 else -1.0
        X[:, 0] = sign * (strength + 0.1 * np.abs(X[:, 0]))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        docs.append(doc)
        embs.append(EmbeddedDocument(id=doc.id, label=label, X=X.astype(np.float32)))
    return docs, embs


@pytest.fixture
def rng():
    return np.random.default_rng(0)
