"""Metrics and reports: accuracy, per-class accuracy, confusion counts,
baseline-vs-expert comparison, and cluster-recovery scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DimensionError, UsageError
from .ioutils import atomic_write_text
from .model import ElfisModel
from .subsets import ClusterAssignment, ConfusionMatrix


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list[float | None]  # None for classes absent from the split
    confusion: ConfusionMatrix
    n_examples: int


@dataclass
class ComparisonSummary:
    baseline_accuracy: float
    elfis_accuracy: float
    delta: float
    improved: int
    equal: int
    worsened: int
    max_regression: float
    per_class: list[tuple[str, float | None, float | None]]


def evaluate(model: ElfisModel, ds: Dataset, batch_size: int = 256) -> EvalReport:
    if len(ds) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    n = model.config.n_classes
    if ds.n_classes != n:
        raise UsageError(f"dataset has {ds.n_classes} classes, model expects {n}")
    counts = np.zeros((n, n), dtype=np.int64)
    for lo in range(0, len(ds), batch_size):
        preds = model.predict(ds.features[lo : lo + batch_size])
        for true, pred in zip(ds.labels[lo : lo + batch_size], preds):
            counts[true, pred] += 1
    return report_from_confusion(ConfusionMatrix(counts))


def report_from_confusion(confusion: ConfusionMatrix) -> EvalReport:
    counts = confusion.counts
    support = counts.sum(axis=1)
    total = int(support.sum())
    if total == 0:
        raise UsageError("confusion matrix holds no examples")
    per_class: list[float | None] = [
        (counts[i, i] / support[i]) if support[i] > 0 else None for i in range(confusion.n)
    ]
    accuracy = float(np.trace(counts)) / total
    return EvalReport(accuracy, per_class, confusion, total)


def compare_reports(baseline: EvalReport, elfis: EvalReport) -> ComparisonSummary:
    if baseline.confusion.n != elfis.confusion.n:
        raise DimensionError(
            f"reports cover {baseline.confusion.n} vs {elfis.confusion.n} classes"
        )
    improved = equal = worsened = 0
    max_regression = 0.0
    per_class = []
    for i, (b, e) in enumerate(zip(baseline.per_class_accuracy, elfis.per_class_accuracy)):
        per_class.append((str(i), b, e))
        if b is None or e is None:
            continue
        if e > b:
            improved += 1
        elif e < b:
            worsened += 1
            max_regression = max(max_regression, b - e)
        else:
            equal += 1
    return ComparisonSummary(
        baseline_accuracy=baseline.accuracy,
        elfis_accuracy=elfis.accuracy,
        delta=elfis.accuracy - baseline.accuracy,
        improved=improved,
        equal=equal,
        worsened=worsened,
        max_regression=max_regression,
        per_class=per_class,
    )


def partition_match(assignment: ClusterAssignment, planted) -> tuple[bool, float]:
    """(exact up to relabeling, Rand index) against a class -> group map."""
    planted = list(planted)
    n = assignment.n_classes
    if len(planted) != n:
        raise DimensionError(f"planted map covers {len(planted)} classes, assignment {n}")
    ours = {frozenset(group) for group in assignment.members}
    theirs: dict[int, set[int]] = {}
    for idx, g in enumerate(planted):
        theirs.setdefault(g, set()).add(idx)
    exact = ours == {frozenset(group) for group in theirs.values()}

    if n < 2:
        return exact, 1.0
    agree = 0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            pairs += 1
            same_ours = assignment.cluster_of[i] == assignment.cluster_of[j]
            same_theirs = planted[i] == planted[j]
            agree += same_ours == same_theirs
    return exact, agree / pairs


def save_report(report: EvalReport, class_names: list[str], path) -> None:
    """CSV sections: summary, per-class rows, confusion counts."""
    if len(class_names) != report.confusion.n:
        raise DimensionError(f"{len(class_names)} names for {report.confusion.n} classes")
    support = report.confusion.counts.sum(axis=1)
    lines = ["#summary", "accuracy,n_examples", f"{report.accuracy!r},{report.n_examples}"]
    lines += ["#per_class", "class_name,support,accuracy"]
    for name, count, acc in zip(class_names, support, report.per_class_accuracy):
        lines.append(f"{name},{int(count)},{'' if acc is None else repr(acc)}")
    lines.append("#confusion")
    for row in report.confusion.counts:
        lines.append(",".join(str(int(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_comparison(summary: ComparisonSummary, class_names: list[str], path) -> None:
    lines = [
        "#summary",
        "baseline_accuracy,elfis_accuracy,delta,improved,equal,worsened,max_regression",
        f"{summary.baseline_accuracy!r},{summary.elfis_accuracy!r},{summary.delta!r},"
        f"{summary.improved},{summary.equal},{summary.worsened},{summary.max_regression!r}",
        "#per_class",
        "class_name,baseline_accuracy,elfis_accuracy",
    ]
    for (idx, b, e), name in zip(summary.per_class, class_names):
        b_txt = "" if b is None else repr(b)
        e_txt = "" if e is None else repr(e)
        lines.append(f"{name},{b_txt},{e_txt}")
    atomic_write_text(path, "\n".join(lines) + "\n")
