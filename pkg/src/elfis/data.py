"""Synthetic fine-grained datasets with planted meta-group structure.

Each class prototype sits at a fixed offset from its group prototype, so the
planted partition is recoverable both visually (confusable classes share a
group) and lexically (names are `group{g}_class{c}`, sharing 3-grams within
a group).  All generation is a pure function of the config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, StratificationError, UsageError
from .ioutils import atomic_write_text

_MASK63 = (1 << 63) - 1


def seeded_rng(*parts: int) -> np.random.Generator:
    """Generator seeded from one or more ints (negatives folded into range)."""
    return np.random.default_rng(np.random.SeedSequence([p & _MASK63 for p in parts]))


@dataclass
class SyntheticConfig:
    n_groups: int
    classes_per_group: int
    input_dim: int
    group_sep: float
    class_sep: float
    noise_sigma: float
    samples_per_class: int
    seed: int = 0

    def __post_init__(self):
        if min(self.n_groups, self.classes_per_group, self.input_dim, self.samples_per_class) < 1:
            raise UsageError("synthetic config counts must be positive")
        if self.group_sep <= 0 or self.class_sep <= 0:
            raise UsageError("separation scales must be positive")
        if self.class_sep >= self.group_sep:
            raise UsageError(
                f"class_sep ({self.class_sep}) must be smaller than group_sep ({self.group_sep})"
            )
        if self.noise_sigma < 0:
            raise UsageError("noise_sigma must be nonnegative")

    @property
    def n_classes(self) -> int:
        return self.n_groups * self.classes_per_group


@dataclass
class Dataset:
    features: np.ndarray  # (N, input_dim) float64
    labels: np.ndarray  # (N,) int64, global class indices
    class_names: list[str]
    planted_groups: list[int] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.class_names)
        if len(set(self.class_names)) != n:
            raise UsageError("dataset class names must be unique")
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise UsageError(
                f"features {self.features.shape} inconsistent with {self.labels.shape[0]} labels"
            )
        if not np.isfinite(self.features).all():
            raise UsageError("dataset features must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n):
            raise UsageError(f"labels must lie in [0, {n})")
        if self.planted_groups is not None and len(self.planted_groups) != n:
            raise UsageError("planted_groups must have one entry per class")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            self.features[indices], self.labels[indices], self.class_names, self.planted_groups
        )


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    rng = seeded_rng(cfg.seed)
    group_protos = rng.standard_normal((cfg.n_groups, cfg.input_dim)) * cfg.group_sep

    class_protos = np.empty((cfg.n_classes, cfg.input_dim))
    names: list[str] = []
    planted: list[int] = []
    for g in range(cfg.n_groups):
        for c in range(cfg.classes_per_group):
            offset = rng.standard_normal(cfg.input_dim)
            norm = np.linalg.norm(offset)
            while norm < 1e-12:
                offset = rng.standard_normal(cfg.input_dim)
                norm = np.linalg.norm(offset)
            idx = g * cfg.classes_per_group + c
            class_protos[idx] = group_protos[g] + offset * (cfg.class_sep / norm)
            names.append(f"group{g}_class{c}")
            planted.append(g)

    total = cfg.n_classes * cfg.samples_per_class
    features = np.empty((total, cfg.input_dim))
    labels = np.empty(total, dtype=np.int64)
    for idx in range(cfg.n_classes):
        lo = idx * cfg.samples_per_class
        hi = lo + cfg.samples_per_class
        noise = rng.standard_normal((cfg.samples_per_class, cfg.input_dim)) * cfg.noise_sigma
        features[lo:hi] = class_protos[idx] + noise
        labels[lo:hi] = idx
    return Dataset(features, labels, names, planted)


def split(ds: Dataset, fractions: tuple[float, float, float], seed: int):
    """Per-class stratified split into (train, val, test) datasets."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise UsageError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = seeded_rng(seed)
    buckets: list[list[np.ndarray]] = [[], [], []]
    for cls in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == cls)
        m = idx.size
        if m < 3:
            raise StratificationError(
                f"class {ds.class_names[cls]!r} has {m} samples; needs at least 3 to stratify"
            )
        perm = idx[rng.permutation(m)]
        c1 = int(np.floor(m * fractions[0]))
        c2 = int(np.floor(m * (fractions[0] + fractions[1]))) - c1
        counts = [c1, c2, m - c1 - c2]
        # every split keeps at least one sample per class
        while min(counts) == 0:
            counts[counts.index(max(counts))] -= 1
            counts[counts.index(min(counts))] += 1
        lo = 0
        for part, count in enumerate(counts):
            buckets[part].append(perm[lo : lo + count])
            lo += count
    parts = [np.concatenate(b) for b in buckets]
    return tuple(ds.subset(p) for p in parts)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded per-epoch shuffle, chunked; the final short batch is kept."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    perm = seeded_rng(seed, epoch).permutation(len(ds))
    return [perm[i : i + batch_size] for i in range(0, len(ds), batch_size)]


def save_dataset(ds: Dataset, path) -> None:
    lines = ["#classes: " + ",".join(ds.class_names)]
    if ds.planted_groups is not None:
        lines.append("#groups: " + ",".join(str(g) for g in ds.planted_groups))
    for label, row in zip(ds.labels, ds.features):
        lines.append(f"{int(label)}\t" + " ".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    class_names: list[str] | None = None
    planted: list[int] | None = None
    feature_rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#classes:"):
                class_names = [t.strip() for t in line[len("#classes:") :].split(",") if t.strip()]
                continue
            if line.startswith("#groups:"):
                try:
                    planted = [int(t) for t in line[len("#groups:") :].split(",")]
                except ValueError as exc:
                    raise ParseError(f"{path}: line {lineno}: bad group id: {exc}") from exc
                continue
            if line.startswith("#"):
                continue
            if class_names is None:
                raise ParseError(f"{path}: line {lineno}: missing '#classes:' header")
            head, tab, payload = line.partition("\t")
            if not tab:
                raise ParseError(f"{path}: line {lineno}: expected '<label>\\t<floats>'")
            try:
                label = int(head)
                values = [float(tok) for tok in payload.split()]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            if not 0 <= label < len(class_names):
                raise ParseError(
                    f"{path}: line {lineno}: label {label} outside [0, {len(class_names)})"
                )
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(
                    f"{path}: line {lineno}: row has {len(values)} values, expected {width}"
                )
            labels.append(label)
            feature_rows.append(values)
    if class_names is None:
        raise ParseError(f"{path}: missing '#classes:' header")
    if planted is not None and len(planted) != len(class_names):
        raise ParseError(
            f"{path}: '#groups:' lists {len(planted)} ids for {len(class_names)} classes"
        )
    return Dataset(
        np.array(feature_rows, dtype=np.float64).reshape(len(labels), width or 0),
        np.array(labels, dtype=np.int64),
        class_names,
        planted,
    )
