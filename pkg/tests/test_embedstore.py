import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docgraph.corpus import Document
from docgraph.embedstore import (
    BadMagicError,
    EmbeddedDocument,
    NonFiniteError,
    TruncatedPayloadError,
    VersionMismatchError,
    cosine,
    read_embeddings,
    read_header,
    synth_embeddings,
    write_embeddings,
)


def _doc(doc_id, n, d, seed=0, label=1):
    rng = np.random.default_rng(seed)
    return EmbeddedDocument(id=doc_id, label=label, X=rng.standard_normal((n, d)).astype(np.float32))


class TestFormat:
    def test_expected_byte_length(self, tmp_path):
        # oracle: byte length computed directly from the format definition
        docs = [_doc("a", 3, 4), _doc("bb", 2, 4)]
        path = tmp_path / "x.dgem"
        written = write_embeddings(docs, path)
        header = 4 + 2 + 4 + 8
        per_doc = lambda doc: 2 + len(doc.id.encode()) + 4 + 4 + doc.n * doc.d * 4
        assert written == header + per_doc(docs[0]) + per_doc(docs[1])
        assert written == path.stat().st_size
        assert sum(doc.n * doc.d for doc in docs) == 20  # 20 payload floats

    def test_empty_corpus(self, tmp_path):
        path = tmp_path / "empty.dgem"
        write_embeddings([], path)
        assert read_embeddings(path) == []

    def test_reader_reports_dimension(self, tmp_path):
        path = tmp_path / "d384.dgem"
        write_embeddings([_doc("a", 2, 384)], path)
        version, d, count = read_header(path)
        assert (version, d, count) == (1, 384, 1)
        assert read_embeddings(path)[0].d == 384

    def test_round_trip_bit_identical(self, tmp_path):
        docs = [_doc(f"doc{i}", n=i + 1, d=6, seed=i) for i in range(5)]
        p1, p2 = tmp_path / "a.dgem", tmp_path / "b.dgem"
        write_embeddings(docs, p1)
        loaded = read_embeddings(p1)
        assert [d.id for d in loaded] == [d.id for d in docs]
        assert [d.label for d in loaded] == [d.label for d in docs]
        for a, b in zip(loaded, docs):
            assert a.X.tobytes() == b.X.tobytes()
        write_embeddings(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mixed_dimensions_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="mixed"):
            write_embeddings([_doc("a", 2, 4), _doc("b", 2, 5)], tmp_path / "x.dgem")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dgem"
        write_embeddings([_doc("a", 2, 4)], path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            read_embeddings(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "ver.dgem"
        write_embeddings([_doc("a", 2, 4)], path)
        data = bytearray(path.read_bytes())
        data[4:6] = (9).to_bytes(2, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            read_embeddings(path)

    def test_truncated_mid_row(self, tmp_path):
        path = tmp_path / "trunc.dgem"
        write_embeddings([_doc("a", 3, 4)], path)
        whole = path.read_bytes()
        path.write_bytes(whole[: len(whole) - 7])
        with pytest.raises(TruncatedPayloadError):
            read_embeddings(path)

    def test_nan_payload_rejected(self, tmp_path):
        path = tmp_path / "nan.dgem"
        write_embeddings([_doc("a", 2, 4)], path)
        data = bytearray(path.read_bytes())
        data[-4:] = np.float32("nan").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(NonFiniteError):
            read_embeddings(path)

    def test_nonfinite_document_rejected(self):
        X = np.ones((2, 3), dtype=np.float32)
        X[1, 1] = np.inf
        with pytest.raises(NonFiniteError):
            EmbeddedDocument(id="x", label=0, X=X)


class TestSynth:
    DOC = Document(id="d", label=0, sentences=("alpha beta gamma delta epsilon", "zeta eta theta iota kappa",
                                               "alpha beta gamma delta epsilon"))

    def test_identical_sentences_identical_rows(self):
        emb = synth_embeddings(self.DOC, d=12, seed=5)
        assert np.array_equal(emb.X[0], emb.X[2])
        assert not np.array_equal(emb.X[0], emb.X[1])

    def test_unit_norm(self):
        emb = synth_embeddings(self.DOC, d=48, seed=5)
        norms = np.linalg.norm(emb.X.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-6)

    def test_seed_changes_matrix(self):
        a = synth_embeddings(self.DOC, d=12, seed=1).X
        b = synth_embeddings(self.DOC, d=12, seed=2).X
        assert (a != b).any()

    def test_pure_function_of_inputs(self):
        a = synth_embeddings(self.DOC, d=12, seed=9).X
        b = synth_embeddings(self.DOC, d=12, seed=9).X
        assert a.tobytes() == b.tobytes()

    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            synth_embeddings(self.DOC, d=0, seed=1)


class TestCosine:
    def test_self_similarity(self):
        u = np.array([0.3, -1.2, 0.5])
        assert cosine(u, u) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_hand_value(self):
        assert cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(0.7071, abs=1e-4)
        assert abs(cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0])) - 2**-0.5) <= 1e-6

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cosine(np.zeros(3), np.ones(3))

    def test_symmetry(self, rng):
        u, v = rng.standard_normal(8), rng.standard_normal(8)
        assert cosine(u, v) == pytest.approx(cosine(v, u), abs=1e-12)

    @given(
        st.lists(st.floats(min_value=-10, max_value=10), min_size=2, max_size=8),
        st.lists(st.floats(min_value=-10, max_value=10), min_size=2, max_size=8),
    )
    @settings(max_examples=200, deadline=None)
    def test_bounded(self, a, b):
        n = min(len(a), len(b))
        u, v = np.array(a[:n]), np.array(b[:n])
        if np.linalg.norm(u) == 0 or np.linalg.norm(v) == 0:
            return
        assert abs(cosine(u, v)) <= 1.0 + 1e-6
