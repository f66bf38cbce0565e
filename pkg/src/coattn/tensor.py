"""Dense float64 tensors with reverse-mode differentiation.

A ``Tensor`` wraps a read-only NumPy array. Differentiable operations
record their parents and a backward closure; :func:`gradients` walks the
recorded graph in reverse topological order and accumulates
vector-Jacobian products. Every operation validates that its output is
finite so numerical blow-ups surface at the op that caused them.

Batch dimensions broadcast the way NumPy's ``matmul`` does; gradients are
summed back to each operand's shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    DomainError,
    GradientEvaluationError,
    NonFiniteError,
)

NORM_EPS = 1e-12


class Tensor:
    """Immutable n-d array of 64-bit reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        obj = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.setflags(write=False)
        obj.data = data
        obj.name = None
        obj.op = op
        obj.requires_grad = any(p.requires_grad for p in parents)
        if obj.requires_grad:
            obj._parents = tuple(parents)
            obj._backward = backward
        else:
            obj._parents = ()
            obj._backward = None
        return obj

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh_elem(v: Tensor) -> Tensor:
    """Elementwise hyperbolic tangent; derivative ``1 - tanh**2``."""
    y = np.tanh(v.data)
    return Tensor._from_op(y, (v,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(v: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * v.data))
    return Tensor._from_op(y, (v,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def hinge(v: Tensor) -> Tensor:
    """``max(0, v)``; the subgradient at exactly 0 is 0."""
    active = v.data > 0.0
    return Tensor._from_op(np.where(active, v.data, 0.0), (v,), lambda g: (g * active,), "hinge")


def mask_fill(v: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Overwrite entries where ``mask`` holds with a constant (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    out = np.where(mask, float(value), v.data)
    return Tensor._from_op(out, (v,), lambda g: (np.where(mask, 0.0, g),), "mask_fill")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(v: Tensor, axis: int | None = None) -> Tensor:
    shape = v.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(np.sum(v.data, axis=axis), (v,), backward, "sum")


def mean(v: Tensor, axis: int | None = None) -> Tensor:
    n = v.data.size if axis is None else v.shape[axis]
    return scale(tsum(v, axis), 1.0 / n)


def reshape(v: Tensor, shape: Sequence[int]) -> Tensor:
    old = v.shape
    return Tensor._from_op(v.data.reshape(shape), (v,), lambda g: (g.reshape(old),), "reshape")


def transpose(v: Tensor) -> Tensor:
    """Swap the last two axes."""
    if v.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got shape {v.shape}")
    return Tensor._from_op(np.swapaxes(v.data, -1, -2), (v,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def index(v: Tensor, key) -> Tensor:
    shape = v.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return Tensor._from_op(v.data[key], (v,), backward, "index")


def take(v: Tensor, idx) -> Tensor:
    """Gather along axis 0 (rows); repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = v.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(v.data[idx], (v,), backward, "take")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and normalizers


def linear_map(x: Tensor, W: Tensor) -> Tensor:
    """Matrix-vector product ``W @ x`` with broadcasting over leading axes.

    ``x`` has shape ``(..., D_in)`` and ``W`` has shape ``(..., D_out, D_in)``.
    """
    if W.ndim < 2 or x.ndim < 1 or W.shape[-1] != x.shape[-1]:
        raise DimensionError(f"linear_map: cannot apply W of shape {W.shape} to x of shape {x.shape}")
    out = np.matmul(W.data, x.data[..., None])[..., 0]

    def backward(g):
        gx = gW = None
        if x.requires_grad:
            gx = _unbroadcast(np.matmul(np.swapaxes(W.data, -1, -2), g[..., None])[..., 0], x.shape)
        if W.requires_grad:
            gW = _unbroadcast(g[..., :, None] * x.data[..., None, :], W.shape)
        return gx, gW

    return Tensor._from_op(out, (x, W), backward, "linear_map")


def softmax(v: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if v.ndim == 0 or v.shape[-1] < 1:
        raise DomainError("softmax of an empty vector")
    z = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (v,), backward, "softmax")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between ``u`` and ``v`` along the last axis."""
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape} disagree")
    nu = np.linalg.norm(u.data, axis=-1)
    nv = np.linalg.norm(v.data, axis=-1)
    if (nu <= NORM_EPS).any() or (nv <= NORM_EPS).any():
        raise DegenerateVectorError("cosine_similarity of a near-zero vector")
    dot = (u.data * v.data).sum(axis=-1)
    denom = nu * nv
    c = dot / denom

    def backward(g):
        gu = gv = None
        gg = g[..., None]
        if u.requires_grad:
            gu = gg * (v.data / denom[..., None] - (c / (nu * nu))[..., None] * u.data)
            gu = _unbroadcast(gu, u.shape)
        if v.requires_grad:
            gv = gg * (u.data / denom[..., None] - (c / (nv * nv))[..., None] * v.data)
            gv = _unbroadcast(gv, v.shape)
        return gu, gv

    return Tensor._from_op(c, (u, v), backward, "cosine")


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(output: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that do not influence ``output`` get an all-zero gradient.
    """
    if output.data.size != 1:
        raise DimensionError(f"gradients need a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones(output.shape)
        for node in reversed(_topological_order(output)):
            if node._backward is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return {name: np.asarray(grads.get(id(t), np.zeros(t.shape)), dtype=np.float64) for name, t in wrt.items()}


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    coords: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def check_gradients(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> list[GradCheckReport]:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps a dict of named tensors to a scalar tensor. Parameters with
    more than ``max_coords`` entries are checked on a random subsample.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays: Mapping[str, np.ndarray], track: bool) -> Tensor:
        try:
            out = f({k: Tensor(a, requires_grad=track, name=k) for k, a in arrays.items()})
        except NonFiniteError as exc:
            raise GradientEvaluationError(f"objective is not finite: {exc}") from exc
        if out.data.size != 1 or not np.isfinite(out.data).all():
            raise GradientEvaluationError("objective must be a finite scalar")
        return out

    leaves = {k: Tensor(a, requires_grad=True, name=k) for k, a in base.items()}
    try:
        out = f(leaves)
    except NonFiniteError as exc:
        raise GradientEvaluationError(f"objective is not finite: {exc}") from exc
    analytic = gradients(out, leaves)

    reports = []
    for name, arr in base.items():
        flat_size = arr.size
        if flat_size > max_coords:
            coords = np.sort(rng.choice(flat_size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat_size)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            vals = []
            for sign in (1.0, -1.0):
                probe = dict(base)
                pert = arr.copy()
                pert.flat[c] += sign * step
                probe[name] = pert
                vals.append(evaluate(probe, False).item())
            num[j] = (vals[0] - vals[1]) / (2.0 * step)
        ana = analytic[name].ravel()[coords]
        err = relative_error(ana, num)
        reports.append(GradCheckReport(name, float(err.max()) if err.size else 0.0, coords, ana, num))
    return reports
