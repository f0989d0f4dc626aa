"""The training objective: per-head cross-entropies, two-way KL mutual
learning between H0 and the aggregation head, and their weighted composition

    L = lam1 * (CE_H0 + ML_H0) + lam2 * (1/K) * sum_k CE_Hk
        + lam3 * (CE_aggr + ML_aggr)

with defaults lam1=1, lam2=10, lam3=1.  Each mutual-learning term trains
only its named branch: the other distribution is detached by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .model import ModelOutputs
from .subsets import ClusterAssignment
from .tensor import Tensor


class DistillationMode(Enum):
    NONE = "none"
    TO_H0_ONLY = "to_h0_only"
    TWO_WAY = "two_way"


@dataclass
class LossWeights:
    lam1: float = 1.0
    lam2: float = 10.0
    lam3: float = 1.0

    def __post_init__(self):
        if min(self.lam1, self.lam2, self.lam3) <= 0:
            raise UsageError(f"loss weights must be positive, got {self}")


@dataclass
class SubsetLabelMap:
    """Per-cluster translation from global class index to the expert's local
    index; anything outside the cluster maps to the trailing "other" index."""

    members: list[list[int]]
    _local: list[dict[int, int]] = field(init=False, repr=False)

    def __post_init__(self):
        self._local = [
            {cls: i for i, cls in enumerate(sorted(group))} for group in self.members
        ]

    @classmethod
    def from_assignment(cls, assignment: ClusterAssignment) -> "SubsetLabelMap":
        return cls([list(group) for group in assignment.members])

    @property
    def n_clusters(self) -> int:
        return len(self.members)

    def other_index(self, k: int) -> int:
        return len(self.members[k])


def subset_target(global_class: int, k: int, label_map: SubsetLabelMap) -> int:
    """Local index of the class within cluster k, or the "other" index."""
    return label_map._local[k].get(int(global_class), label_map.other_index(k))


def _as_batch_logits(logits: Tensor) -> Tensor:
    if logits.ndim == 1:
        return T.stack([logits])
    if logits.ndim != 2:
        raise DimensionError(f"expected logits of shape (batch, c), got {logits.shape}")
    return logits


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    logits = _as_batch_logits(logits)
    batch, width = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != batch:
        raise DimensionError(f"{targets.shape[0]} targets for a batch of {batch}")
    if targets.size and (targets.min() < 0 or targets.max() >= width):
        raise UsageError(f"targets must lie in [0, {width})")
    onehot = np.zeros((batch, width))
    onehot[np.arange(batch), targets] = 1.0
    picked = T.mul(T.log_softmax(logits), Tensor(onehot))
    return T.scale(T.reduce(picked, "sum"), -1.0 / batch)


def kl_divergence(p_logits: Tensor, q_logits: Tensor, detach_target: bool = False) -> Tensor:
    """Mean over the batch of KL(P || Q), both given as logits.

    Computed from log_softmax for stability.  With detach_target the gradient
    does not flow into q_logits.
    """
    p_logits = _as_batch_logits(p_logits)
    q_logits = _as_batch_logits(q_logits)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"logit shapes differ: {p_logits.shape} vs {q_logits.shape}")
    if detach_target:
        q_logits = q_logits.detach()
    batch = p_logits.shape[0]
    log_p = T.log_softmax(p_logits)
    log_q = T.log_softmax(q_logits)
    per_entry = T.mul(T.softmax(p_logits), T.sub(log_p, log_q))
    return T.scale(T.reduce(per_entry, "sum"), 1.0 / batch)


def mutual_losses(
    h0_logits: Tensor,
    aggr_logits: Tensor,
    mode: DistillationMode,
    detach_targets: bool = True,
) -> tuple[Tensor, Tensor]:
    """(ML_H0, ML_aggr) as configured; disabled terms are exact zeros.

    ML_H0 = KL(P_H0 || P_aggr) pulls H0 toward the aggregated prediction;
    ML_aggr = KL(P_aggr || P_H0) guides the aggregation head.  Each term
    reaches only its named branch when detach_targets is set (the default).
    """
    if h0_logits.shape != aggr_logits.shape:
        raise DimensionError(f"logit widths differ: {h0_logits.shape} vs {aggr_logits.shape}")
    zero = Tensor(0.0)
    if mode == DistillationMode.NONE:
        return zero, zero
    ml_h0 = kl_divergence(h0_logits, aggr_logits, detach_target=detach_targets)
    if mode == DistillationMode.TO_H0_ONLY:
        return ml_h0, zero
    ml_aggr = kl_divergence(aggr_logits, h0_logits, detach_target=detach_targets)
    return ml_h0, ml_aggr


def expert_targets(targets, label_map: SubsetLabelMap) -> list[np.ndarray]:
    """Per-cluster local target vectors for a batch of global labels."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    return [
        np.array([subset_target(t, k, label_map) for t in targets], dtype=np.int64)
        for k in range(label_map.n_clusters)
    ]


def _compose(
    outputs: ModelOutputs,
    targets,
    weights: LossWeights,
    label_map: SubsetLabelMap | None,
    mode: DistillationMode,
    detach_targets: bool,
) -> tuple[Tensor, dict]:
    ce_h0 = cross_entropy(outputs.logits_h0, targets)
    n_experts = len(outputs.logits_experts)
    if n_experts == 0:
        total = T.scale(ce_h0, weights.lam1)
        terms = {
            "ce_h0": ce_h0.item(),
            "ml_h0": 0.0,
            "ce_experts": [],
            "ce_aggr": 0.0,
            "ml_aggr": 0.0,
            "total": total.item(),
        }
        return total, terms
    if label_map is None or label_map.n_clusters != n_experts:
        raise UsageError("label map must cover exactly the model's experts")
    if outputs.logits_aggr is None:
        raise UsageError("expert outputs present but aggregation logits missing")

    locals_per_cluster = expert_targets(targets, label_map)
    ce_experts = [
        cross_entropy(logits, local)
        for logits, local in zip(outputs.logits_experts, locals_per_cluster)
    ]
    expert_sum = ce_experts[0]
    for ce in ce_experts[1:]:
        expert_sum = T.add(expert_sum, ce)

    ce_aggr = cross_entropy(outputs.logits_aggr, targets)
    ml_h0, ml_aggr = mutual_losses(
        outputs.logits_h0, outputs.logits_aggr, mode, detach_targets=detach_targets
    )

    term1 = T.scale(T.add(ce_h0, ml_h0), weights.lam1)
    term2 = T.scale(expert_sum, weights.lam2 / n_experts)
    term3 = T.scale(T.add(ce_aggr, ml_aggr), weights.lam3)
    total = T.add(T.add(term1, term2), term3)
    terms = {
        "ce_h0": ce_h0.item(),
        "ml_h0": ml_h0.item(),
        "ce_experts": [ce.item() for ce in ce_experts],
        "ce_aggr": ce_aggr.item(),
        "ml_aggr": ml_aggr.item(),
        "total": total.item(),
    }
    return total, terms


def total_loss(
    outputs: ModelOutputs,
    targets,
    weights: LossWeights,
    label_map: SubsetLabelMap | None,
    mode: DistillationMode,
    detach_targets: bool = True,
) -> Tensor:
    """The composite objective; with no experts it reduces to lam1 * CE_H0."""
    return _compose(outputs, targets, weights, label_map, mode, detach_targets)[0]


def loss_components(
    outputs: ModelOutputs,
    targets,
    weights: LossWeights,
    label_map: SubsetLabelMap | None,
    mode: DistillationMode,
    detach_targets: bool = True,
) -> dict:
    """Scalar values of every term plus the total (same path as total_loss)."""
    return _compose(outputs, targets, weights, label_map, mode, detach_targets)[1]
