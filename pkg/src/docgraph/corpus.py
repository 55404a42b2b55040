"""Corpus loading and preparation: cleaning, sentence tokenization, merging, splits."""

from __future__ import annotations

import json
import random
import re
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

MIN_SENTENCE_WORDS = 5


@dataclass(frozen=True)
class RawDocument:
    """An unprocessed labeled document as read from disk."""

    id: str
    label: int
    text: str


@dataclass(frozen=True)
class Document:
    """A cleaned document as an ordered list of non-empty sentences."""

    id: str
    label: int
    sentences: tuple[str, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError(f"document {self.id!r} has no sentences")
        if any(not s.split() for s in self.sentences):
            raise ValueError(f"document {self.id!r} contains an empty sentence")

    @property
    def n(self) -> int:
        return len(self.sentences)

    @property
    def text(self) -> str:
        return " ".join(self.sentences)


@dataclass(frozen=True)
class DatasetMeta:
    """Dataset-level configuration: class count, truncation cap, split fractions."""

    name: str
    K: int
    truncation_cap: int
    split_fractions: tuple[float, float, float] = (0.72, 0.08, 0.20)

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.truncation_cap < 1:
            raise ValueError("truncation_cap must be >= 1")


def _load_abbreviations() -> frozenset[str]:
    text = resources.files("docgraph.data").joinpath("abbreviations.txt").read_text("utf-8")
    entries = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            entries.add(line.lower())
    return frozenset(entries)


ABBREVIATIONS = _load_abbreviations()


def clean_text(raw: str) -> str:
    """Drop control characters and collapse all whitespace runs to single spaces.

    Case is preserved; no markup stripping or lowercasing happens here.
    """
    kept = [c for c in raw if c.isspace() or unicodedata.category(c) != "Cc"]
    return " ".join("".join(kept).split())


# A candidate boundary: terminator, one space, then an uppercase letter or digit.
_BOUNDARY = re.compile(r"[.!?] (?=[A-Z0-9])")


def _guarded(text: str, term_index: int) -> bool:
    """True when the '.' at term_index ends an abbreviation or an initial."""
    start = text.rfind(" ", 0, term_index) + 1
    word = text[start : term_index + 1]
    if word.lower() in ABBREVIATIONS:
        return True
    # Single capital letter before the period reads as a person's initial.
    return len(word) == 2 and word[0].isalpha() and word[0].isupper()


def split_sentences(text: str) -> list[str]:
    """Segment cleaned text into sentences.

    Boundaries sit after '.', '!' or '?' followed by a space and an uppercase
    letter or digit; abbreviations from the guard list never terminate.
    """
    if not text:
        return []
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        if text[m.start()] == "." and _guarded(text, m.start()):
            continue
        sentences.append(text[start : m.start() + 1])
        start = m.end()
    tail = text[start:]
    if tail:
        sentences.append(tail)
    return sentences


def merge_short(sentences: Sequence[str], min_words: int = MIN_SENTENCE_WORDS) -> list[str]:
    """Merge sentences shorter than min_words into their neighbours.

    Short sentences join their predecessor; a short leading sentence is
    prepended to its successor. Passes repeat until the list is stable, so a
    document shorter than min_words collapses to a single sentence.
    """
    if not sentences:
        raise ValueError("merge_short requires a non-empty sentence list")
    sents = list(sentences)
    while True:
        out: list[str] = []
        pending: str | None = None
        for s in sents:
            if pending is not None:
                s = pending + " " + s
                pending = None
            if len(s.split()) < min_words:
                if out:
                    out[-1] = out[-1] + " " + s
                else:
                    pending = s
            else:
                out.append(s)
        if pending is not None:
            out.append(pending)
        if out == sents:
            return out
        sents = out


def truncate(sentences: Sequence[str], cap: int) -> list[str]:
    """Keep the first min(n, cap) sentences."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    return list(sentences[:cap])


def prepare_document(raw: RawDocument, cap: int, min_words: int = MIN_SENTENCE_WORDS) -> Document | None:
    """Run the full preparation chain on one raw document.

    Returns None when the text cleans to nothing (the caller decides whether
    to drop or report).
    """
    text = clean_text(raw.text)
    if not text:
        return None
    sentences = truncate(merge_short(split_sentences(text), min_words), cap)
    return Document(id=raw.id, label=raw.label, sentences=tuple(sentences))


def split_dataset(
    docs: Sequence[Document],
    meta: DatasetMeta,
    seed: int,
    test_ids: set[str] | None = None,
) -> tuple[list[Document], list[Document], list[Document]]:
    """Partition documents into (train, val, test), deterministically by seed.

    Exact-text duplicates are removed first (first occurrence wins). With a
    predefined test split only the validation carve-out is random.
    """
    seen: set[str] = set()
    unique: list[Document] = []
    for d in docs:
        if d.text not in seen:
            seen.add(d.text)
            unique.append(d)
    if len(unique) < meta.K:
        raise ValueError(f"need at least {meta.K} unique documents, got {len(unique)}")

    f_train, f_val, f_test = meta.split_fractions
    rng = random.Random(seed)

    if test_ids is not None:
        test = [d for d in unique if d.id in test_ids]
        rest = [d for d in unique if d.id not in test_ids]
        rng.shuffle(rest)
        n_val = round(len(rest) * f_val / (f_train + f_val))
        val, train = rest[:n_val], rest[n_val:]
    else:
        shuffled = list(unique)
        rng.shuffle(shuffled)
        n_test = round(len(shuffled) * f_test)
        n_val = round(len(shuffled) * f_val)
        test = shuffled[:n_test]
        val = shuffled[n_test : n_test + n_val]
        train = shuffled[n_test + n_val :]

    present = {d.label for d in train}
    missing = sorted(set(range(meta.K)) - present)
    if missing:
        raise ValueError(f"classes {missing} absent from the training partition")
    return train, val, test


# ---------------------------------------------------------------------------
# JSON-lines interfaces


def load_raw_jsonl(path: str | Path) -> list[RawDocument]:
    """Read a dataset file: one {id, label, text} object per line."""
    docs = []
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = RawDocument(id=str(obj["id"]), label=int(obj["label"]), text=str(obj["text"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if doc.id in ids:
                raise ValueError(f"{path}:{lineno}: duplicate id {doc.id!r}")
            ids.add(doc.id)
            docs.append(doc)
    return docs


def write_documents_jsonl(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "label": d.label, "sentences": list(d.sentences)}) + "\n")


def read_documents_jsonl(path: str | Path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(Document(id=str(obj["id"]), label=int(obj["label"]), sentences=tuple(obj["sentences"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return docs


def write_split_manifest(splits: dict[str, Sequence[Document]], path: str | Path) -> None:
    """Record which split each document landed in, one {id, split} per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for split_name, docs in splits.items():
            for d in docs:
                fh.write(json.dumps({"id": d.id, "split": split_name}) + "\n")


def read_split_manifest(path: str | Path) -> dict[str, str]:
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                mapping[obj["id"]] = obj["split"]
    return mapping
