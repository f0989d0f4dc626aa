"""The subset-expert network: shared backbone, original head H0, one expert
head per class subset, and a final classifier over aggregated features.

H0 and the experts share the same feature-extractor architecture (a stack of
dense blocks plus a trailing linear map, all width d); they differ only in
the last classification layer.  H0 and the aggregation classifier use plain
linear layers, while each expert scores its |C_k|+1 local classes (members
plus "other") with cosine similarities against its weight columns, scaled by
a temperature so cross-entropy has usable gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParseError, UnsupportedModeError, UsageError
from .ioutils import atomic_write_text
from .subsets import ClusterAssignment
from .tensor import Tensor

AGGREGATION_METHODS = ("mean", "max", "median", "concat")

CHECKPOINT_FORMAT = "elfis-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int
    backbone_hidden: list[int] = field(default_factory=lambda: [64])
    feature_dim: int = 32
    n_classes: int = 2
    expert_blocks: int = 1
    cosine_scale: float = 10.0
    aggregation: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.feature_dim < 1 or self.n_classes < 2:
            raise UsageError("input_dim, feature_dim must be >= 1 and n_classes >= 2")
        if any(h < 1 for h in self.backbone_hidden):
            raise UsageError("backbone_hidden widths must be positive")
        if self.expert_blocks not in (0, 1, 2):
            raise UsageError(f"expert_blocks must be 0, 1 or 2, got {self.expert_blocks}")
        if self.cosine_scale <= 0:
            raise UsageError(f"cosine_scale must be positive, got {self.cosine_scale}")
        if self.aggregation not in AGGREGATION_METHODS:
            raise UsageError(
                f"aggregation must be one of {AGGREGATION_METHODS}, got {self.aggregation!r}"
            )


class Linear:
    """Dense layer y = x W + b with fan-in-scaled uniform init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


def normed_linear(f: Tensor, weights: Tensor, scale: float) -> Tensor:
    """Cosine-similarity logits: scale * (f . w_i) / (|f| |w_i| + 1e-12).

    Accepts a single feature vector (d,) or a batch (B, d); weights are
    (d, c).  Implemented as one fused graph node with a hand-derived backward
    (verified against finite differences in the gradient suite).
    """
    if weights.ndim != 2:
        raise DimensionError(f"normed_linear weights must be (d, c), got {weights.shape}")
    single = f.ndim == 1
    if f.ndim not in (1, 2) or f.shape[-1] != weights.shape[0]:
        raise DimensionError(
            f"normed_linear feature shape {f.shape} incompatible with weights {weights.shape}"
        )
    tau = float(scale)
    fd = f.data[None, :] if single else f.data
    wd = weights.data
    dots = T._gemm(fd, wd)
    f_norm = np.sqrt((fd * fd).sum(axis=1) + T.NORM_EPS)  # (B,)
    w_norm = np.sqrt((wd * wd).sum(axis=0) + T.NORM_EPS)  # (c,)
    denom = f_norm[:, None] * w_norm[None, :] + 1e-12
    scores = tau * dots / denom

    def backprop(g):
        g2 = g[None, :] if single else g
        d_dots = g2 * tau / denom
        d_denom = -g2 * tau * dots / (denom * denom)
        d_fnorm = (d_denom * w_norm[None, :]).sum(axis=1)  # (B,)
        d_wnorm = (d_denom * f_norm[:, None]).sum(axis=0)  # (c,)
        df = T._gemm(d_dots, wd.T) + d_fnorm[:, None] * (fd / f_norm[:, None])
        dw = T._gemm(fd.T, d_dots) + d_wnorm[None, :] * (wd / w_norm[None, :])
        return [(f, df[0] if single else df), (weights, dw)]

    return T._node(scores[0] if single else scores, (f, weights), backprop)


class FeatureHead:
    """expert_blocks dense d->d blocks with ReLU, then a trailing linear d->d.

    With zero blocks the features pass through the trailing map alone.
    """

    def __init__(self, feature_dim: int, n_blocks: int, rng: np.random.Generator):
        self.blocks = [Linear(feature_dim, feature_dim, rng) for _ in range(n_blocks)]
        self.trailing = Linear(feature_dim, feature_dim, rng)

    def features(self, h: Tensor) -> Tensor:
        for block in self.blocks:
            h = T.relu(block(h))
        return self.trailing(h)


class ExpertHead:
    """Feature head plus a normed-linear classifier over |C_k|+1 outputs."""

    def __init__(self, cluster_classes: list[int], cfg: ModelConfig, rng: np.random.Generator):
        self.cluster_classes = list(cluster_classes)
        self.extractor = FeatureHead(cfg.feature_dim, cfg.expert_blocks, rng)
        bound = 1.0 / np.sqrt(cfg.feature_dim)
        self.normed_weights = Tensor(
            rng.uniform(-bound, bound, size=(cfg.feature_dim, len(cluster_classes) + 1)),
            requires_grad=True,
        )

    @property
    def n_outputs(self) -> int:
        return len(self.cluster_classes) + 1


@dataclass
class ModelOutputs:
    """K+1 feature vectors and K+2 logit tensors (K=0: just f_0 and H0 logits)."""

    f: list[Tensor]
    logits_h0: Tensor
    logits_experts: list[Tensor]
    logits_aggr: Tensor | None


def aggregate(features: list[Tensor], method: str) -> Tensor:
    """Combine the K+1 head features: mean (default), max, median, or concat."""
    if method not in AGGREGATION_METHODS:
        raise UsageError(f"unknown aggregation method {method!r}")
    if not features:
        raise UsageError("aggregate needs at least one feature tensor")
    if method == "concat":
        return T.concat(features)
    if method == "median":
        if T.is_grad_enabled() and any(t.requires_grad for t in features):
            raise UnsupportedModeError(
                "median aggregation is inference-only; train with mean, max or concat"
            )
        return T.reduce(T.stack(features), "median", axis=0)
    return T.reduce(T.stack(features), method, axis=0)


class ElfisModel:
    """Backbone + H0 + K experts + aggregation classifier.

    Baseline mode (no cluster assignment) keeps only backbone + H0.  Use
    :func:`init_model` to construct; parameters are owned by the training
    loop during fit() and safe for read-only shared inference afterwards.
    """

    def __init__(self, config: ModelConfig, assignment: ClusterAssignment | None):
        if assignment is not None and assignment.n_classes != config.n_classes:
            raise UsageError(
                f"assignment covers {assignment.n_classes} classes, config says {config.n_classes}"
            )
        self.config = config
        self.assignment = assignment
        rng = np.random.default_rng(config.seed & ((1 << 63) - 1))

        widths = [config.input_dim] + list(config.backbone_hidden) + [config.feature_dim]
        self.backbone = [Linear(widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)]
        self.head0 = FeatureHead(config.feature_dim, config.expert_blocks, rng)
        self.classifier0 = Linear(config.feature_dim, config.n_classes, rng)
        self.experts: list[ExpertHead] = []
        self.agg_classifier: Linear | None = None
        if assignment is not None:
            for members in assignment.members:
                self.experts.append(ExpertHead(members, config, rng))
            agg_in = config.feature_dim
            if config.aggregation == "concat":
                agg_in *= assignment.n_clusters + 1
            self.agg_classifier = Linear(agg_in, config.n_classes, rng)

        self._slots = self._collect_slots()

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def _collect_slots(self):
        slots: dict[str, tuple[object, str]] = {}

        def linear(name, layer):
            slots[f"{name}.weight"] = (layer, "weight")
            if layer.bias is not None:
                slots[f"{name}.bias"] = (layer, "bias")

        def head(name, extractor):
            for i, block in enumerate(extractor.blocks):
                linear(f"{name}.block{i}", block)
            linear(f"{name}.trailing", extractor.trailing)

        for i, layer in enumerate(self.backbone):
            linear(f"backbone.{i}", layer)
        head("head0", self.head0)
        linear("head0.classifier", self.classifier0)
        for k, expert in enumerate(self.experts):
            head(f"expert.{k}", expert.extractor)
            slots[f"expert.{k}.normed_weights"] = (expert, "normed_weights")
        if self.agg_classifier is not None:
            linear("agg_classifier", self.agg_classifier)
        return slots

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(obj, attr) for name, (obj, attr) in self._slots.items()}

    def set_parameter(self, name: str, value: Tensor) -> None:
        obj, attr = self._slots[name]
        getattr(obj, attr)  # KeyError surfaced above is the contract
        setattr(obj, attr, value)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def backbone_features(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.backbone:
            h = T.relu(layer(h))
        return h

    def forward(self, x: Tensor) -> ModelOutputs:
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"expected input (batch, {self.config.input_dim}), got {x.shape}"
            )
        shared = self.backbone_features(x)  # computed once, reused by all heads
        f0 = self.head0.features(shared)
        logits_h0 = self.classifier0(f0)
        feature_list = [f0]
        logits_experts = []
        for expert in self.experts:
            fk = expert.extractor.features(shared)
            feature_list.append(fk)
            logits_experts.append(
                normed_linear(fk, expert.normed_weights, self.config.cosine_scale)
            )
        logits_aggr = None
        if self.agg_classifier is not None:
            logits_aggr = self.agg_classifier(
                aggregate(feature_list, self.config.aggregation)
            )
        return ModelOutputs(feature_list, logits_h0, logits_experts, logits_aggr)

    def predict(self, x: Tensor | np.ndarray) -> np.ndarray:
        """Argmax class per example: aggregation head if present, else H0.

        np.argmax takes the first maximum, which is the lowest class index.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        with T.no_grad():
            outputs = self.forward(x)
        logits = outputs.logits_aggr if outputs.logits_aggr is not None else outputs.logits_h0
        return np.argmax(logits.data, axis=-1)


def init_model(cfg: ModelConfig, assignment: ClusterAssignment | None = None) -> ElfisModel:
    """Build a model with seeded fan-in-uniform weights (deterministic per seed)."""
    return ElfisModel(cfg, assignment)


def save_checkpoint(model: ElfisModel, path) -> None:
    """Versioned JSON container; float64 values round-trip bit-exactly via repr."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "clusters": None
        if model.assignment is None
        else {
            "n_clusters": model.assignment.n_clusters,
            "cluster_of": list(model.assignment.cluster_of),
        },
        "params": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in model.parameters().items()
        },
    }
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def load_checkpoint(path) -> ElfisModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a valid checkpoint: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: unrecognized checkpoint format {payload.get('format')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig(**payload["config"])
    clusters = payload.get("clusters")
    assignment = None
    if clusters is not None:
        assignment = ClusterAssignment(list(clusters["cluster_of"]), int(clusters["n_clusters"]))
    model = ElfisModel(config, assignment)
    params = model.parameters()
    stored = payload["params"]
    if set(stored) != set(params):
        raise ParseError(f"{path}: parameter names do not match the rebuilt architecture")
    for name, p in params.items():
        entry = stored[name]
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != p.shape:
            raise ParseError(
                f"{path}: parameter {name} has shape {arr.shape}, expected {p.shape}"
            )
        p.data = arr
    return model
