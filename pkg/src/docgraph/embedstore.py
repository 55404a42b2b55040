"""Sentence-embedding exchange format (DGEM), synthetic embeddings, cosine similarity.

File layout, all integers little-endian:

    magic b"DGEM" | version u16 = 1 | d u32 | doc_count u64
    per document: id_len u16 | id bytes UTF-8 | label u32 | n u32
                  | n*d float32 little-endian row-major
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .corpus import Document

MAGIC = b"DGEM"
VERSION = 1


class EmbeddingFormatError(ValueError):
    """Base class for malformed embedding files."""


class BadMagicError(EmbeddingFormatError):
    pass


class VersionMismatchError(EmbeddingFormatError):
    pass


class TruncatedPayloadError(EmbeddingFormatError):
    pass


class NonFiniteError(EmbeddingFormatError):
    pass


@dataclass(frozen=True)
class EmbeddedDocument:
    """Per-sentence embedding rows for one document, float32, n x d."""

    id: str
    label: int
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float32)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"document {self.id!r}: embedding matrix must be non-empty 2-D")
        if not np.isfinite(X).all():
            raise NonFiniteError(f"document {self.id!r}: non-finite embedding entry")
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def write_embeddings(docs: Sequence[EmbeddedDocument], path: str | Path) -> int:
    """Write documents to a DGEM file, returning the byte count written."""
    dims = {doc.d for doc in docs}
    if len(dims) > 1:
        raise ValueError(f"mixed embedding dimensions: {sorted(dims)}")
    d = dims.pop() if dims else 0
    written = 0
    try:
        with open(path, "wb") as fh:
            written += fh.write(MAGIC)
            written += fh.write(struct.pack("<HIQ", VERSION, d, len(docs)))
            for doc in docs:
                id_bytes = doc.id.encode("utf-8")
                written += fh.write(struct.pack("<H", len(id_bytes)))
                written += fh.write(id_bytes)
                written += fh.write(struct.pack("<II", doc.label, doc.n))
                written += fh.write(np.ascontiguousarray(doc.X, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return written


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedPayloadError(f"truncated payload while reading {what}")
    return buf


def read_header(path: str | Path) -> tuple[int, int, int]:
    """Return (version, d, doc_count) after validating magic and version."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, d, count = struct.unpack("<HIQ", _read_exact(fh, 14, "header"))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    return version, d, count


def read_embeddings(path: str | Path) -> list[EmbeddedDocument]:
    """Read a DGEM file; write(read(x)) is bit-identical to x."""
    docs = []
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, d, count = struct.unpack("<HIQ", _read_exact(fh, 14, "header"))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
        for k in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, f"doc {k} id length"))
            doc_id = _read_exact(fh, id_len, f"doc {k} id").decode("utf-8")
            label, n = struct.unpack("<II", _read_exact(fh, 8, f"doc {doc_id!r} counts"))
            payload = _read_exact(fh, 4 * n * d, f"doc {doc_id!r} rows")
            X = np.frombuffer(payload, dtype="<f4").reshape(n, d)
            if not np.isfinite(X).all():
                raise NonFiniteError(f"document {doc_id!r}: non-finite embedding entry")
            docs.append(EmbeddedDocument(id=doc_id, label=label, X=X.copy()))
    return docs


def synth_embeddings(doc: Document, d: int, seed: int) -> EmbeddedDocument:
    """Deterministic unit-norm pseudo-embeddings keyed by (sentence text, seed).

    A stand-in for the frozen encoder so the engine and its tests run without
    the exporter; identical sentences map to identical rows.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    rows = np.empty((doc.n, d), dtype=np.float32)
    for i, sentence in enumerate(doc.sentences):
        digest = hashlib.sha256(f"{seed}\x00{sentence}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(d)
        rows[i] = (v / np.linalg.norm(v)).astype(np.float32)
    return EmbeddedDocument(id=doc.id, label=doc.label, X=rows)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors; zero vectors are rejected."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine is undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))
