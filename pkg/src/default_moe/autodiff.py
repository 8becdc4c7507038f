"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order and accumulates ``.grad`` on every leaf that requires it.

Broadcasting is deliberately absent: binary ops demand equal shapes, and the
only broadcast rule is :func:`add_bias` (a 1-D vector added to every row).
Surrogate gradients are written with :func:`custom_op`, which takes a forward
value and an arbitrary backward rule.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Record no graph inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(FloatingPointError):
    """A non-finite value reached an operation that forbids it."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar root, double backward)."""


class Tensor:
    """Dense array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values. Copied into a contiguous array of ``dtype``.
    requires_grad : bool
        Leaves with this flag receive ``.grad`` after :meth:`backward`.
    dtype : numpy dtype, optional
        Defaults to the dtype of ``data`` when it is a floating array,
        otherwise float64.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out.op = op
        out._consumed = False
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("root does not depend on any tensor requiring grad")
        if self._consumed:
            raise GraphError("backward already ran on this graph")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._consumed:
                raise GraphError("backward already ran through part of this graph")
            node._consumed = True
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        # saved forward values are released once the graph is spent
        for node in order:
            if node._backward is not None:
                node._backward = _spent
                node._parents = ()


def _spent(g):
    raise GraphError("backward already ran on this graph")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def custom_op(value: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, name: str = "custom") -> Tensor:
    """Wrap ``value`` as the output of ``parents`` with a user-supplied backward.

    ``backward(g)`` receives d(loss)/d(output) and must return one entry per
    parent: an array shaped like that parent, or ``None`` for no gradient.
    The rule need not be the true derivative of ``value``.
    """
    return Tensor._from_op(np.asarray(value), parents, backward, name)


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector to every row of ``x`` (the one broadcast this engine allows)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return Tensor._from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``r`` of a 2-D tensor by ``w[r]``."""
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: weights {w.shape} do not match rows of {x.shape}")
    xd, wd = x.data, w.data
    return Tensor._from_op(
        xd * wd[:, None], (x, w),
        lambda g: (g * wd[:, None], np.einsum("ij,ij->i", g, xd)),
        "scale_rows")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return Tensor._from_op(xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),), "silu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1)


# reductions and shape ---------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return Tensor._from_op(np.asarray(a.data.sum(), dtype=dt), (a,),
                           lambda g: (np.full(shape, g, dtype=dt),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.data.size
    return Tensor._from_op(np.asarray(a.data.mean(), dtype=dt), (a,),
                           lambda g: (np.full(shape, g / n, dtype=dt),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {a.shape}")
    return Tensor._from_op(np.swapaxes(a.data, -1, -2), (a,),
                           lambda g: (np.swapaxes(g, -1, -2),), "transpose")


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched product of equal-batch 3-D tensors."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3) or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def softmax_rows(logits: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum.

    With ``causal=True`` the input must be ``(..., S, S)`` and entry ``[i, j]``
    with ``j > i`` is masked out before normalising.
    """
    z = logits.data
    if np.isnan(z).any():
        raise NumericError("softmax_rows: NaN in logits")
    if causal:
        s = z.shape[-1]
        if z.shape[-2] != s:
            raise ShapeError(f"causal softmax needs square trailing axes, got {z.shape}")
        z = np.where(np.tri(s, dtype=bool), z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (logits,), backward, "softmax")


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """``(silu(x @ w_gate) * (x @ w_up)) @ w_down`` with a fused backward."""
    xd, wg, wu, wd = x.data, w_gate.data, w_up.data, w_down.data
    if xd.ndim != 2 or wg.shape != wu.shape or wg.shape[0] != xd.shape[1] or wd.shape != (wg.shape[1], wg.shape[0]):
        raise ShapeError(
            f"swiglu: x {x.shape}, gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape} do not conform")
    a = xd @ wg
    u = xd @ wu
    s = _sigmoid(a)
    act = a * s
    h = act * u

    def backward(g):
        gh = g @ wd.T
        g_wd = h.T @ g
        gu = gh * act
        ga = gh * u * (s * (1 + a * (1 - s)))
        gx = ga @ wg.T + gu @ wu.T if x.requires_grad else None
        return gx, xd.T @ ga, xd.T @ gu, g_wd

    return Tensor._from_op(h @ wd, (x, w_gate, w_up, w_down), backward, "swiglu")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each row by its root-mean-square, then scale by ``gain``."""
    xd, gd = x.data, gain.data
    if gd.shape != (xd.shape[-1],):
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match rows of {x.shape}")
    d = xd.shape[-1]
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    n = xd * r

    def backward(g):
        lead = tuple(range(xd.ndim - 1))
        gn = g * gd
        gx = r * (gn - n * (gn * n).sum(axis=-1, keepdims=True) / d)
        return gx, (g * n).sum(axis=lead)

    return Tensor._from_op(n * gd, (x, gain), backward, "rms_norm")


# indexing ---------------------------------------------------------------------

def take_rows(x: Tensor, index: np.ndarray, unique: bool = False) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate in backward.

    Pass ``unique=True`` when ``index`` has no repeats to use plain
    assignment instead of an unbuffered scatter-add.
    """
    index = np.asarray(index, dtype=np.intp)
    rows, dt = x.shape, x.dtype

    def backward(g):
        out = np.zeros(rows, dtype=dt)
        if unique:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(x.data[index], (x,), backward, "take_rows")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``weight`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {weight.shape[0]})")
    flat = take_rows(weight, ids.reshape(-1))
    return reshape(flat, ids.shape + (weight.shape[1],))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if z.ndim != 2 or z.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    n, v = z.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target outside [0, {v})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, targets]).mean()

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, targets] -= 1
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")
