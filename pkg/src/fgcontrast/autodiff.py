"""Minimal dense-array reverse-mode automatic differentiation.

Tensors wrap float64 ndarrays. Operations record an implicit acyclic graph on
their results (parents + a vector-Jacobian closure); `backward` walks it once
in reverse topological order with a fixed reduction order, so identical graphs
produce bitwise identical gradients. Broadcasting is deliberately restricted
to scalars and row vectors over rows.

relu'(0) is taken as 0. logsumexp uses the max-shift trick and is the required
route for every InfoNCE-style loss (tau = 0.1 exponentiates similarities by
10x; naive exp overflows).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from fgcontrast.errors import ArgumentError, ContractError, ShapeError

_uid_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_vjp", "_uid")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = tuple(p for p in _prev if p.requires_grad)
        self._vjp = _vjp
        self._uid = next(_uid_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return True
    # row vector over the rows of a 2-d (or trailing axis of an n-d) array
    for row, mat in ((sa, sb), (sb, sa)):
        if len(mat) >= 2 and row in ((mat[-1],), (1, mat[-1])):
            return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binop(a: Tensor, b: Tensor, out: np.ndarray, vjp_a, vjp_b) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"broadcast not allowed between {a.shape} and {b.shape}")

    def vjp(g):
        contrib = []
        if a.requires_grad:
            contrib.append((a, _unbroadcast(vjp_a(g), a.shape)))
        if b.requires_grad:
            contrib.append((b, _unbroadcast(vjp_b(g), b.shape)))
        return contrib

    return Tensor(out, a.requires_grad or b.requires_grad, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binop(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binop(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binop(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binop(
        a,
        b,
        a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs compatible 2-d shapes, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        contrib = []
        if a.requires_grad:
            contrib.append((a, g @ b.data.T))
        if b.requires_grad:
            contrib.append((b, a.data.T @ g))
        return contrib

    return Tensor(out, a.requires_grad or b.requires_grad, (a, b), vjp)


def _unop(a: Tensor, out: np.ndarray, vjp_a) -> Tensor:
    def vjp(g):
        return [(a, vjp_a(g))] if a.requires_grad else []

    return Tensor(out, a.requires_grad, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _unop(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _unop(a, out, lambda g: g * out)


def log(a: Tensor) -> Tensor:
    return _unop(a, np.log(a.data), lambda g: g / a.data)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _unop(a, out, lambda g: g * out * (1.0 - out))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp_a(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _unop(a, out, vjp_a)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp_a(g):
        if axis is None:
            return np.broadcast_to(g / count, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy()

    return _unop(a, out, vjp_a)


def gather(a: Tensor, indices) -> Tensor:
    """Index axis 0 with an arbitrary integer array; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def vjp_a(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ga

    return _unop(a, out, vjp_a)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        contrib = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                contrib.append((t, g[tuple(sl)]))
        return contrib

    rg = any(t.requires_grad for t in tensors)
    return Tensor(out, rg, tuple(tensors), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return _unop(a, a.data.reshape(shape), lambda g: g.reshape(a.shape))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _unop(
        a,
        np.transpose(a.data, axes),
        lambda g: np.transpose(g, inv) if inv is not None else np.transpose(g),
    )


_DEGENERATE_NORM = 1e-300


def l2_normalize(a: Tensor) -> Tensor:
    """Row-wise x / ||x||; rows with zero norm map to zero rows (degenerate)."""
    if a.data.ndim != 2:
        raise ShapeError("l2_normalize expects a 2-d tensor")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    ok = norms > _DEGENERATE_NORM
    safe = np.where(ok, norms, 1.0)
    out = np.where(ok, a.data / safe, 0.0)

    def vjp_a(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return np.where(ok, (g - out * dot) / safe, 0.0)

    return _unop(a, out, vjp_a)


def logsumexp(a: Tensor) -> Tensor:
    """Row-wise log(sum(exp(row))) with the max-shift trick; output (m,)."""
    if a.data.ndim != 2:
        raise ShapeError("logsumexp expects a 2-d tensor")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    soft = e / s
    return _unop(a, out, lambda g: g[:, None] * soft)


def softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("softmax expects a 2-d tensor")
    e = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def vjp_a(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return y * (g - dot)

    return _unop(a, y, vjp_a)


def logsumexp2(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(exp(a) + exp(b)), stable; broadcasting as in add."""
    m = np.maximum(a.data, b.data)
    out = m + np.log(np.exp(a.data - m) + np.exp(b.data - m))
    wa = np.exp(a.data - out)
    wb = np.exp(b.data - out)
    return _binop(a, b, out, lambda g: g * wa, lambda g: g * wb)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-pair cosine similarity; (m, f) x (m, f) -> (m,). Zero rows give 0."""
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs equal 2-d shapes, got {a.shape}, {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    denom = na * nb
    ok = denom > _DEGENERATE_NORM
    safe = np.where(ok, denom, 1.0)
    dots = (a.data * b.data).sum(axis=1)
    out = np.where(ok, dots / safe, 0.0)

    def vjp(g):
        contrib = []
        gs = np.where(ok, g / safe, 0.0)[:, None]
        if a.requires_grad:
            ga = gs * (b.data - a.data * (out / np.where(ok, na * na, 1.0))[:, None])
            contrib.append((a, np.where(ok[:, None], ga, 0.0)))
        if b.requires_grad:
            gb = gs * (a.data - b.data * (out / np.where(ok, nb * nb, 1.0))[:, None])
            contrib.append((b, np.where(ok[:, None], gb, 0.0)))
        return contrib

    return Tensor(out, a.requires_grad or b.requires_grad, (a, b), vjp)


# ---------------------------------------------------------------------------
# Backward pass


def _topo_order(output: Tensor) -> list:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._uid in visited:
            continue
        visited.add(node._uid)
        stack.append((node, True))
        for child in reversed(node._prev):
            if child._uid not in visited:
                stack.append((child, False))
    return order


def backward(output: Tensor, leaves=None) -> dict:
    """Gradients of a scalar output w.r.t. leaves (all reachable grad leaves
    by default). Unreachable requested leaves get zero gradients. Repeated
    calls on an unchanged graph return identical results."""
    if output.data.size != 1:
        raise ContractError("backward requires a scalar output")
    topo = _topo_order(output)
    grads: dict[int, np.ndarray] = {output._uid: np.ones_like(output.data)}
    for node in reversed(topo):
        g = grads.get(node._uid)
        if g is None or node._vjp is None:
            continue
        for parent, contribution in node._vjp(g):
            prev = grads.get(parent._uid)
            grads[parent._uid] = contribution if prev is None else prev + contribution
    if leaves is None:
        leaves = [t for t in topo if t._vjp is None and t.requires_grad]
    result = {}
    for t in leaves:
        g = grads.get(t._uid)
        result[t] = np.zeros_like(t.data) if g is None else g
        t.grad = result[t]
    return result


# ---------------------------------------------------------------------------
# Finite-difference harness


@dataclass(frozen=True)
class FdReport:
    max_rel_err: float
    worst_index: int


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> FdReport:
    """Compare backward() on f(x) against central differences per coordinate.

    Relative error uses denominator max(|analytic|, |numeric|, 1), i.e. plain
    absolute error below unit scale.
    """
    if not x.requires_grad:
        raise ArgumentError("finite_diff_check needs a grad-enabled input")
    analytic = backward(f(x), [x])[x].reshape(-1)
    base = x.data.copy()
    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            val = f(Tensor(probe.reshape(base.shape))).item()
            if sign > 0:
                hi = val
            else:
                lo = val
        numeric[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return FdReport(max_rel_err=float(rel.max()) if rel.size else 0.0, worst_index=worst)
