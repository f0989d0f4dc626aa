"""Class-subset construction from confusion and lexical dissimilarities.

The combined distance is the average of the Z-score-standardized confusion
distance and the standardized lexical distance; cutting a single-linkage
dendrogram of that matrix at K clusters yields the subsets each expert head
is responsible for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMatrixError, DimensionError, ParseError, UsageError

COMBINE_MODES = ("cm_only", "lex_only", "average", "std_average")
DEFAULT_CLUSTER_RATIO = 0.10


@dataclass
class ConfusionMatrix:
    """counts[i][j] = number of examples of true class i predicted as class j."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise UsageError("confusion matrix counts must be nonnegative")

    @property
    def n(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class DissimilarityMatrix:
    """Symmetric pairwise class distance with a zero diagonal.

    Standardized matrices may hold negative values; single linkage only
    compares order, so that is fine.  The diagonal is forced to zero by every
    constructor in this module and is never read downstream.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DimensionError(f"dissimilarity matrix must be square, got {v.shape}")
        if not np.isfinite(v).all():
            raise UsageError("dissimilarity matrix must be finite")
        if np.abs(v - v.T).max(initial=0.0) > 1e-9:
            raise UsageError("dissimilarity matrix must be symmetric within 1e-9")
        if v.shape[0] and np.abs(np.diag(v)).max() != 0.0:
            raise UsageError("dissimilarity matrix diagonal must be exactly zero")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])


@dataclass
class ClusterAssignment:
    """Surjective map from class indices onto K non-empty clusters.

    Cluster ids are ordered by each cluster's smallest member index, and the
    per-cluster member lists are ascending.
    """

    cluster_of: list[int]
    n_clusters: int
    members: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.cluster_of)
        if self.n_clusters < 1:
            raise UsageError("cluster assignment needs at least one cluster")
        if not self.members:
            self.members = [[] for _ in range(self.n_clusters)]
            for idx, k in enumerate(self.cluster_of):
                self.members[k].append(idx)
        if sorted(idx for group in self.members for idx in group) != list(range(n)):
            raise UsageError("cluster members must partition the class indices")
        if any(not group for group in self.members):
            raise UsageError("clusters must be non-empty")
        for group in self.members:
            group.sort()
        for k, group in enumerate(self.members):
            for idx in group:
                if self.cluster_of[idx] != k:
                    raise UsageError("cluster members inconsistent with cluster_of")

    @property
    def n_classes(self) -> int:
        return len(self.cluster_of)


def row_normalize(cm: ConfusionMatrix) -> np.ndarray:
    """Divide each row by its sum; rows with no support stay all-zero."""
    counts = cm.counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        normalized = np.where(sums > 0, counts / sums, 0.0)
    return normalized


def visual_dissimilarity(m: np.ndarray) -> DissimilarityMatrix:
    """D_CM = 1 - (M + M^T)/2 off-diagonal, from a row-normalized confusion matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    sums = m.sum(axis=1)
    if np.any((np.abs(sums - 1.0) > 1e-6) & (np.abs(sums) > 1e-12)):
        raise UsageError("rows must sum to 1 (or be all-zero for absent classes)")
    raw = 1.0 - 0.5 * (m + m.T)
    upper = np.triu(raw, k=1)
    return DissimilarityMatrix(upper + upper.T)


def standardize_offdiag(d: DissimilarityMatrix, label: str = "dissimilarity") -> DissimilarityMatrix:
    """Z-score the strict-upper-triangle population; mirror back symmetrically.

    The diagonal is structurally zero and would bias the statistics, so the
    population is the n(n-1)/2 unique off-diagonal pairs (population sigma).
    """
    n = d.n
    if n < 3:
        raise UsageError(f"standardization needs n >= 3 classes, got {n}")
    iu = np.triu_indices(n, k=1)
    values = d.values[iu]
    mu = values.mean()
    sigma = values.std()
    # identical values can leave sigma at rounding-noise level, not exactly 0
    if not np.isfinite(sigma) or sigma <= 1e-12 * max(1.0, abs(mu)):
        raise DegenerateMatrixError(
            f"cannot standardize {label} matrix: off-diagonal values are all identical"
        )
    out = np.zeros_like(d.values)
    out[iu] = (values - mu) / sigma
    return DissimilarityMatrix(out + out.T)


def combine(
    d_cm: DissimilarityMatrix,
    d_lex: DissimilarityMatrix,
    mode: str = "std_average",
) -> DissimilarityMatrix:
    """Fuse confusion and lexical distances.

    std_average (the default used by the pipeline) averages the standardized
    matrices; average skips standardization; cm_only / lex_only pass the
    respective raw matrix through.
    """
    if mode not in COMBINE_MODES:
        raise UsageError(f"unknown combine mode {mode!r}; expected one of {COMBINE_MODES}")
    if d_cm.n != d_lex.n:
        raise DimensionError(f"matrix sizes differ: {d_cm.n} vs {d_lex.n}")
    if mode == "cm_only":
        return DissimilarityMatrix(d_cm.values.copy())
    if mode == "lex_only":
        return DissimilarityMatrix(d_lex.values.copy())
    if mode == "average":
        return DissimilarityMatrix(0.5 * (d_cm.values + d_lex.values))
    z_cm = standardize_offdiag(d_cm, label="confusion")
    z_lex = standardize_offdiag(d_lex, label="lexical")
    return DissimilarityMatrix(0.5 * (z_cm.values + z_lex.values))


def _merge_sequence(values: np.ndarray) -> list[tuple[float, int, int]]:
    """Full greedy single-linkage merge sequence (n-1 merges).

    Inter-cluster distance is the minimum pairwise member distance,
    maintained with the Lance-Williams min-update.  Ties are broken by the
    lexicographically smallest (min member of A, min member of B) pair, so
    the sequence is deterministic.  Returned triples are
    (merge distance, surviving slot's min member, absorbed slot's min member).
    """
    n = values.shape[0]
    work = values.copy()
    alive = list(range(n))
    min_member = list(range(n))
    merges: list[tuple[float, int, int]] = []
    while len(alive) > 1:
        best = None
        for ai in range(len(alive)):
            for bi in range(ai + 1, len(alive)):
                i, j = alive[ai], alive[bi]
                dist = work[i, j]
                lo, hi = sorted((min_member[i], min_member[j]))
                key = (dist, lo, hi)
                if best is None or key < best[0]:
                    best = (key, i, j)
        (dist, lo, hi), i, j = best
        keep, drop = (i, j) if min_member[i] < min_member[j] else (j, i)
        for k in alive:
            if k != keep and k != drop:
                nearest = min(work[keep, k], work[drop, k])
                work[keep, k] = nearest
                work[k, keep] = nearest
        min_member[keep] = min(min_member[keep], min_member[drop])
        alive.remove(drop)
        merges.append((float(dist), lo, hi))
    return merges


def single_linkage_cluster(d: DissimilarityMatrix, n_clusters: int) -> ClusterAssignment:
    """Cut the single-linkage dendrogram of d at exactly n_clusters clusters."""
    n = d.n
    if not 1 <= n_clusters <= n:
        raise UsageError(f"cluster count {n_clusters} out of range [1, {n}]")
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for _, a, b in _merge_sequence(d.values)[: n - n_clusters]:
        ra, rb = find(a), find(b)
        parent[max(ra, rb)] = min(ra, rb)

    groups: dict[int, list[int]] = {}
    for idx in range(n):
        groups.setdefault(find(idx), []).append(idx)
    members = [sorted(groups[root]) for root in sorted(groups, key=lambda r: min(groups[r]))]
    cluster_of = [0] * n
    for k, group in enumerate(members):
        for idx in group:
            cluster_of[idx] = k
    return ClusterAssignment(cluster_of, len(members), members)


def num_clusters_for(n: int, ratio: float = DEFAULT_CLUSTER_RATIO) -> int:
    """floor(n * ratio), never below 2 so the expert stage is non-trivial."""
    if n < 2:
        raise UsageError(f"need at least 2 classes, got {n}")
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"cluster ratio must be in (0, 1), got {ratio}")
    return max(2, math.floor(n * ratio))


def save_confusion(cm: ConfusionMatrix, path, class_names: list[str] | None = None) -> None:
    lines = []
    if class_names is not None:
        if len(class_names) != cm.n:
            raise DimensionError(f"{len(class_names)} names for a {cm.n}x{cm.n} matrix")
        lines.append(",".join(class_names))
    for row in cm.counts:
        lines.append(",".join(str(int(v)) for v in row))
    from .ioutils import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def load_confusion(path) -> tuple[ConfusionMatrix, list[str] | None]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise ParseError(f"{path}: empty confusion file")
    names: list[str] | None = None
    start = 0
    first = lines[0].split(",")
    if any(not _is_int(tok) for tok in first):
        names = [tok.strip() for tok in first]
        start = 1
    rows = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        tokens = line.split(",")
        if any(not _is_int(tok) for tok in tokens):
            raise ParseError(f"{path}: line {lineno}: expected integer counts")
        rows.append([int(tok) for tok in tokens])
    counts = np.array(rows, dtype=np.int64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ParseError(f"{path}: expected a square matrix, got shape {counts.shape}")
    if names is not None and len(names) != counts.shape[0]:
        raise ParseError(f"{path}: header names {len(names)} != matrix size {counts.shape[0]}")
    return ConfusionMatrix(counts), names


def _is_int(token: str) -> bool:
    token = token.strip()
    if token.startswith("-"):
        token = token[1:]
    return token.isdigit()


def save_clusters(assignment: ClusterAssignment, class_names: list[str], path) -> None:
    """One line per cluster: `cluster_id: name1, name2, ...`."""
    if len(class_names) != assignment.n_classes:
        raise DimensionError(
            f"{len(class_names)} names for {assignment.n_classes} assigned classes"
        )
    lines = []
    for k, group in enumerate(assignment.members):
        lines.append(f"{k}: " + ", ".join(class_names[idx] for idx in group))
    from .ioutils import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def load_clusters(path, class_names: list[str]) -> ClusterAssignment:
    index_of = {name: idx for idx, name in enumerate(class_names)}
    members: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            head, _, payload = line.partition(":")
            if not _is_int(head):
                raise ParseError(f"{path}: line {lineno}: expected 'cluster_id: names'")
            if int(head) != len(members):
                raise ParseError(f"{path}: line {lineno}: cluster ids must be consecutive from 0")
            group = []
            for name in payload.split(","):
                name = name.strip()
                if name not in index_of:
                    raise ParseError(f"{path}: line {lineno}: unknown class name {name!r}")
                group.append(index_of[name])
            members.append(sorted(group))
    seen = [idx for group in members for idx in group]
    if sorted(seen) != list(range(len(class_names))):
        raise ParseError(f"{path}: clusters do not cover every class exactly once")
    cluster_of = [0] * len(class_names)
    for k, group in enumerate(members):
        for idx in group:
            cluster_of[idx] = k
    return ClusterAssignment(cluster_of, len(members), members)


def save_dissimilarity(d: DissimilarityMatrix, path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in d.values]
    from .ioutils import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")
