"""Class-name embeddings and the lexical dissimilarity matrix.

Embeddings either come from a file (one class per line, tab-separated from a
whitespace-separated float vector) or from a deterministic character-3-gram
feature hasher that needs no external model.  Lexical dissimilarity between
two classes is one minus the cosine similarity of their embedding vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UsageError
from .subsets import DissimilarityMatrix

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass
class EmbeddingTable:
    """One embedding row per class name, names unique and in a fixed order."""

    class_names: list[str]
    vectors: np.ndarray  # (n, e) float64

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.class_names)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n:
            raise UsageError(
                f"embedding table needs {n} rows, got array of shape {self.vectors.shape}"
            )
        if len(set(self.class_names)) != n:
            raise UsageError("embedding table class names must be unique")
        if any(not name for name in self.class_names):
            raise UsageError("embedding table class names must be non-empty")
        if not np.isfinite(self.vectors).all():
            raise UsageError("embedding vectors must be finite")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0.0):
            bad = self.class_names[int(np.argmin(norms))]
            raise UsageError(f"embedding vector for {bad!r} has zero norm")

    @property
    def n(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def load_embeddings(path) -> EmbeddingTable:
    """Read a tab-separated embeddings file; '#' lines are comments."""
    names: list[str] = []
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise ParseError(f"{path}: line {lineno}: expected '<name>\\t<floats>'")
            name, _, payload = line.partition("\t")
            name = name.strip()
            if not name:
                raise ParseError(f"{path}: line {lineno}: empty class name")
            if name in names:
                raise ParseError(f"{path}: line {lineno}: duplicate class name {name!r}")
            try:
                values = [float(tok) for tok in payload.split()]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            if not values:
                raise ParseError(f"{path}: line {lineno}: empty vector")
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(
                    f"{path}: line {lineno}: row has {len(values)} values, expected {width}"
                )
            names.append(name)
            rows.append(values)
    if not names:
        raise ParseError(f"{path}: no embedding rows found")
    return EmbeddingTable(names, np.array(rows, dtype=np.float64))


def save_embeddings(table: EmbeddingTable, path) -> None:
    lines = ["# class_name<TAB>v1 v2 ... ve"]
    for name, row in zip(table.class_names, table.vectors):
        lines.append(name + "\t" + " ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _hash64(seed: int, token: str) -> int:
    h = _FNV_OFFSET ^ (seed & _MASK64)
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _trigrams(name: str) -> list[str]:
    padded = "^" + name.lower() + "$"
    return [padded[i : i + 3] for i in range(len(padded) - 2)]


def hash_embed(names: list[str], dim: int, seed: int) -> EmbeddingTable:
    """Deterministic signed 3-gram feature hashing, L2-normalized per name.

    Names sharing many character 3-grams land close in cosine space, which is
    all the downstream clustering needs from a stand-in text encoder.
    """
    if dim < 8:
        raise UsageError(f"hash_embed requires dim >= 8, got {dim}")
    vectors = np.zeros((len(names), dim), dtype=np.float64)
    for row, name in enumerate(names):
        if not name:
            raise UsageError("hash_embed: class names must be non-empty")
        for gram in _trigrams(name):
            h = _hash64(seed, gram)
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vectors[row, h % dim] += sign
        norm = np.linalg.norm(vectors[row])
        if norm < 1e-15:
            # pathological sign cancellation; fall back to a single bucket
            vectors[row, _hash64(seed, name) % dim] = 1.0
            norm = 1.0
        vectors[row] /= norm
    return EmbeddingTable(list(names), vectors)


def lexical_dissimilarity(table: EmbeddingTable) -> DissimilarityMatrix:
    """1 - cosine(E_i, E_j), symmetric with an exactly-zero diagonal."""
    unit = table.vectors / np.linalg.norm(table.vectors, axis=1, keepdims=True)
    raw = 1.0 - unit @ unit.T
    np.clip(raw, 0.0, None, out=raw)
    upper = np.triu(raw, k=1)  # mirror the strict upper triangle: bitwise symmetry
    return DissimilarityMatrix(upper + upper.T)
