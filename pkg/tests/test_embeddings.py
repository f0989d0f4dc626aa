"""Embedding table, file ingestion, feature hashing, and lexical distance."""

import numpy as np
import pytest

from elfis.embeddings import (
    EmbeddingTable,
    hash_embed,
    lexical_dissimilarity,
    load_embeddings,
    save_embeddings,
)
from elfis.errors import ParseError, UsageError


def write(path, text):
    path.write_text(text, encoding="utf-8")


class TestLoadEmbeddings:
    def test_three_lines_dim_four(self, tmp_path):
        p = tmp_path / "emb.tsv"
        write(p, "# comment\nsparrow\t1 0 0 0\nrobin\t0 1 0 0\ncrow\t0 0 1 0\n")
        table = load_embeddings(p)
        assert table.n == 3
        assert table.dim == 4
        assert table.class_names == ["sparrow", "robin", "crow"]

    def test_duplicate_name(self, tmp_path):
        p = tmp_path / "emb.tsv"
        write(p, "sparrow\t1 0\nsparrow\t0 1\n")
        with pytest.raises(ParseError, match="sparrow"):
            load_embeddings(p)

    def test_ragged_row_reports_line(self, tmp_path):
        p = tmp_path / "emb.tsv"
        write(p, "a\t1 0 0\nb\t1 0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_embeddings(p)

    def test_zero_vector_rejected(self, tmp_path):
        p = tmp_path / "emb.tsv"
        write(p, "a\t1 0\nb\t0 0\n")
        with pytest.raises(UsageError, match="zero norm"):
            load_embeddings(p)

    def test_bad_float_reports_line(self, tmp_path):
        p = tmp_path / "emb.tsv"
        write(p, "a\t1 oops\n")
        with pytest.raises(ParseError, match="line 1"):
            load_embeddings(p)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        table = EmbeddingTable(["a", "b"], rng.normal(size=(2, 5)))
        p = tmp_path / "emb.tsv"
        save_embeddings(table, p)
        back = load_embeddings(p)
        assert back.class_names == table.class_names
        np.testing.assert_array_equal(back.vectors, table.vectors)


class TestHashEmbed:
    def test_deterministic(self):
        a = hash_embed(["sparrow"], dim=32, seed=5)
        b = hash_embed(["sparrow"], dim=32, seed=5)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_unit_norm(self):
        table = hash_embed(["group0_class1", "warbler", "x"], dim=64, seed=0)
        np.testing.assert_allclose(np.linalg.norm(table.vectors, axis=1), 1.0, atol=1e-12)

    def test_seed_changes_vectors(self):
        a = hash_embed(["sparrow"], dim=64, seed=1).vectors
        b = hash_embed(["sparrow"], dim=64, seed=2).vectors
        assert not np.array_equal(a, b)

    def test_shared_trigrams_raise_cosine(self):
        # Direct cosine oracle: names sharing the long group prefix should be
        # closer than names differing in both group and class digits, for a
        # majority of hash seeds.
        wins = 0
        for seed in range(20):
            table = hash_embed(
                ["group0_class1", "group0_class2", "group7_class2"], dim=64, seed=seed
            )
            v = table.vectors
            near = float(v[0] @ v[1])
            far = float(v[0] @ v[2])
            wins += near > far
        assert wins > 10

    def test_empty_name(self):
        with pytest.raises(UsageError):
            hash_embed(["ok", ""], dim=16, seed=0)

    def test_small_dim_rejected(self):
        with pytest.raises(UsageError):
            hash_embed(["a"], dim=4, seed=0)


class TestLexicalDissimilarity:
    def test_identical_vectors(self):
        table = EmbeddingTable(["a", "b"], np.array([[1.0, 2.0], [1.0, 2.0]]))
        d = lexical_dissimilarity(table)
        assert d.values[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        table = EmbeddingTable(["a", "b"], np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert lexical_dissimilarity(table).values[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_antipodal(self):
        table = EmbeddingTable(["a", "b"], np.array([[1.0, 0.0], [-1.0, 0.0]]))
        assert lexical_dissimilarity(table).values[0, 1] == pytest.approx(2.0, abs=1e-12)

    def test_symmetric_zero_diag_bounded(self):
        rng = np.random.default_rng(9)
        table = EmbeddingTable([f"c{i}" for i in range(12)], rng.normal(size=(12, 6)))
        d = lexical_dissimilarity(table).values
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), np.zeros(12))
        assert d.min() >= 0.0
        assert d.max() <= 2.0 + 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(21)
        vectors = rng.normal(size=(5, 8))
        base = lexical_dissimilarity(EmbeddingTable([f"c{i}" for i in range(5)], vectors))
        scaled = vectors.copy()
        scaled[2] *= 37.5
        other = lexical_dissimilarity(EmbeddingTable([f"c{i}" for i in range(5)], scaled))
        np.testing.assert_allclose(base.values, other.values, atol=1e-12)
