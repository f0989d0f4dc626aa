"""Dense float64 tensors with reverse-mode automatic differentiation.

A deliberately small engine: just the operations needed to express and train
the subset-expert model, all in 64-bit precision so gradients can be checked
against central finite differences (see :func:`finite_diff_check`, the
independent oracle used by the verification suite).

Every operation produces a new :class:`Tensor`; when gradient mode is active
and an input requires gradients, the result keeps references to its parents
and a closure that routes the output gradient back to them.  Calling
``backward()`` on a scalar result walks the graph once in reverse topological
order, accumulating into ``.grad`` of every reachable tensor that requires a
gradient.  Propagation uses per-call buffers, so repeated ``backward()``
calls without zeroing accumulate (twice on a linear graph doubles the grads
exactly).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

NORM_EPS = 1e-12  # added under the square root in l2_norm and cosine norms

_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """n-dimensional float64 array plus autodiff bookkeeping.

    A tensor without parents is a leaf; leaves created with
    ``requires_grad=True`` receive gradients after ``backward()``.  A tensor
    with no graph attached is immutable in practice and safe to share
    read-only across threads.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[np.ndarray], list] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Return a leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Propagate gradients from this scalar to every reachable parameter."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")

        # Deterministic iterative post-order over the (acyclic) graph.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        # Fresh flow buffers per call; .grad only accumulates.
        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backprop is None:
                continue
            for parent, contribution in node._backprop(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flow:
                    flow[key] += contribution
                else:
                    flow[key] = np.array(contribution, dtype=np.float64)

    # Thin operator sugar over the module-level ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, other, "add")

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, other, "sub")

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, other, "mul")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    else:
        out.requires_grad = False
        out._parents = ()
        out._backprop = None
    return out


def _gemm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # unoptimized einsum: sequential k-sum per output element, so results are
    # bit-identical whether a batch is processed whole or row by row (BLAS
    # kernels are not), and free of threading nondeterminism
    return np.einsum("ik,kj->ij", x, y)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def backprop(g):
        return [(a, _gemm(g, bd.T)), (b, _gemm(ad.T, g))]

    return _node(_gemm(ad, bd), (a, b), backprop)


def _is_row_broadcast(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise add/sub/mul; b may also be a row vector over a's last axis."""
    if kind not in ("add", "sub", "mul"):
        raise UsageError(f"unknown elementwise kind {kind!r}")
    same = a.shape == b.shape
    if not same and not _is_row_broadcast(a, b):
        raise DimensionError(f"elementwise {kind} shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    width = bd.shape[-1] if bd.ndim else 1

    def reduce_to_b(g):
        return g if same else g.reshape(-1, width).sum(axis=0)

    if kind == "add":
        out = ad + bd

        def backprop(g):
            return [(a, g), (b, reduce_to_b(g))]

    elif kind == "sub":
        out = ad - bd

        def backprop(g):
            return [(a, g), (b, -reduce_to_b(g))]

    else:
        out = ad * bd

        def backprop(g):
            return [(a, g * bd), (b, reduce_to_b(g * ad))]

    return _node(out, (a, b), backprop)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a plain python scalar."""
    c = float(factor)

    def backprop(g):
        return [(a, g * c)]

    return _node(a.data * c, (a,), backprop)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = a.data > 0.0

    def backprop(g):
        return [(a, g * mask)]

    return _node(np.where(mask, a.data, 0.0), (a,), backprop)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op} received non-finite input")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    _check_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backprop(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return [(a, y * (g - inner))]

    return _node(y, (a,), backprop)


def log_softmax(a: Tensor) -> Tensor:
    """log(softmax(x)) computed as x - max - log-sum-exp."""
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backprop(g):
        return [(a, g - probs * g.sum(axis=-1, keepdims=True))]

    return _node(out, (a,), backprop)


def _normalize_axis(a: Tensor, axis: int | None) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def reduce(a: Tensor, kind: str, axis: int | None = None) -> Tensor:
    """Reduce along an axis (or fully, with axis=None).

    mean and sum are differentiable; max routes the gradient to the first
    argmax; median is forward-only and always returns a detached tensor.
    """
    ax = _normalize_axis(a, axis)
    ad = a.data

    if kind == "median":
        return Tensor(np.median(ad, axis=ax))

    if kind == "sum" or kind == "mean":
        count = ad.size if ax is None else ad.shape[ax]
        out = ad.sum(axis=ax) if kind == "sum" else ad.mean(axis=ax)

        def backprop(g):
            gg = g if kind == "sum" else g / count
            if ax is None:
                return [(a, np.full(ad.shape, gg))]
            return [(a, np.broadcast_to(np.expand_dims(gg, ax), ad.shape))]

        return _node(out, (a,), backprop)

    if kind == "max":
        if ax is None:
            out = ad.max()
            flat_idx = int(np.argmax(ad))

            def backprop(g):
                contribution = np.zeros(ad.shape)
                contribution.flat[flat_idx] = g
                return [(a, contribution)]

        else:
            out = ad.max(axis=ax)
            idx = np.expand_dims(np.argmax(ad, axis=ax), ax)

            def backprop(g):
                contribution = np.zeros(ad.shape)
                np.put_along_axis(contribution, idx, np.expand_dims(g, ax), ax)
                return [(a, contribution)]

        return _node(out, (a,), backprop)

    raise UsageError(f"unknown reduction kind {kind!r}")


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of a vector, with 1e-12 under the root to avoid NaN at zero."""
    if a.ndim != 1:
        raise DimensionError(f"l2_norm expects a vector, got shape {a.shape}")
    value = np.sqrt((a.data * a.data).sum() + NORM_EPS)

    def backprop(g):
        return [(a, g * (a.data / value))]

    return _node(value, (a,), backprop)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = list(tensors)
    if not ts:
        raise UsageError("stack requires at least one tensor")
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise DimensionError(f"stack requires equal shapes, got {[t.shape for t in ts]}")

    def backprop(g):
        return [(t, g[i]) for i, t in enumerate(ts)]

    return _node(np.stack([t.data for t in ts]), tuple(ts), backprop)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    ts = list(tensors)
    if not ts:
        raise UsageError("concat requires at least one tensor")
    lead = ts[0].shape[:-1]
    if any(t.shape[:-1] != lead or t.ndim == 0 for t in ts):
        raise DimensionError(f"concat requires equal leading dims, got {[t.shape for t in ts]}")
    widths = [t.shape[-1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def backprop(g):
        return [(t, g[..., offsets[i]:offsets[i + 1]]) for i, t in enumerate(ts)]

    return _node(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), backprop)


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tol: float = 1e-5,
    op_name: str = "f",
) -> GradCheckReport:
    """Compare backward() gradients of a scalar function against central differences.

    The numeric side uses per-coordinate steps h = 1e-5 * max(1, |x_i|) and
    never touches the reverse-mode path, so it serves as an independent
    oracle.  Relative error per coordinate is |g_a - g_n| / max(1, |g_a|, |g_n|).
    """
    base = np.array(x.data, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise UsageError("finite_diff_check requires f to return a scalar tensor")
    if not np.isfinite(out.data).all():
        raise NumericError("finite_diff_check: f produced a non-finite value")
    out.backward()
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(base)).ravel()

    def evaluate(values: np.ndarray) -> float:
        with no_grad():
            result = f(Tensor(values))
        v = float(result.data.reshape(()))
        if not np.isfinite(v):
            raise NumericError("finite_diff_check: f produced a non-finite value")
        return v

    flat = base.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        h = 1e-5 * max(1.0, abs(flat[i]))
        bumped = base.copy()
        bumped.flat[i] = flat[i] + h
        hi = evaluate(bumped)
        bumped.flat[i] = flat[i] - h
        lo = evaluate(bumped)
        numeric[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(op_name, max_rel, tol, max_rel < tol)
