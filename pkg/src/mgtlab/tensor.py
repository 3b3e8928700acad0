"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation is a plain function taking and returning
:class:`Tensor`.  Recording happens only inside an active :class:`GradTape`
and only when at least one input has ``requires_grad``.  The tape is rebuilt
for every forward pass::

    with GradTape() as tape:
        loss = tsum(mul(x, x))
    grads = backward(loss)        # {x: ndarray}

Storage is a C-contiguous numpy array; there are no strided views, ops
always produce fresh arrays.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InvalidConfigurationError, NumericalError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPES: list["GradTape"] = []


class Tensor:
    """A dense array of float64 values, optionally tracked by a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NumericalError(f"tensor {name or ''} constructed with non-finite values".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional[GradTape] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.require(arr, dtype=np.float64, requirements="C")
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Append-only record of operations; backward replays it in reverse append order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, backward: BackwardFn) -> None:
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> dict:
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss is not connected to this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.node_id is None or parent.tape is not self:
                    leaves[key] = parent

        out = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            out[leaf] = leaf.grad
        return out


def backward(loss: Tensor) -> dict:
    """Reverse-mode gradients of a scalar ``loss`` for every reachable leaf.

    Returns a map from leaf tensor to its gradient array; each leaf's
    ``.grad`` is also overwritten.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ContractError("loss is not tape-connected; run the forward pass inside GradTape()")
    return loss.tape.backward(loss)


def _active_tape() -> Optional[GradTape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _make(data: np.ndarray, parents: tuple, bwd: BackwardFn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, bwd)
    return out


# -- broadcasting -------------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(b) <= len(a) and (b == () or a[len(a) - len(b):] == b):
        return a
    if len(a) < len(b) and (a == () or b[len(b) - len(a):] == a):
        return b
    raise DimensionError(f"{op}: shapes {a} and {b} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with scalar / trailing-suffix broadcasting."""
    _broadcast_shape(a.shape, b.shape, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "hadamard")


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which keeps gradient checks tight)."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(y, (a,), bwd, "gelu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *args):
    """Dispatch by name to one of add, sub, hadamard, scale, tanh, sigmoid."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# -- structural ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or equal-batch ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise DimensionError(f"matmul cannot broadcast a 2-D left operand: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # fold leading dims into one GEMM
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(*ad.shape[:-1], bd.shape[1]), (a, b), bwd, "matmul")

    def bwd(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(y.copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; the gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"embedding ids must lie in [0, {n})")
    shape = table.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), bwd, "embedding")


# -- normalisation and probabilities -----------------------------------------


def softmax(a: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis; ``causal`` masks entries above the diagonal of the last two axes."""
    x = a.data
    if causal:
        s_q, s_k = x.shape[-2], x.shape[-1]
        allowed = np.tril(np.ones((s_q, s_k), dtype=bool))
        x = np.where(allowed, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bwd, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation with population variance, ``eps`` inside the square root."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs D >= 2, got {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must be ({d},), got {gain.shape} and {bias.shape}")
    if eps < 0:
        raise ContractError("layer_norm eps must be non-negative")
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    y = xhat * gd + bias.data

    def bwd(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _make(y, (x, gain, bias), bwd, "layer_norm")


def softmax_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over the positions selected by ``mask``.

    ``logits`` is ``(..., V)``; ``targets`` and ``mask`` have the leading shape.
    """
    v = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    z = logits.data.reshape(-1, v)
    if targets.shape[0] != z.shape[0] or mask.shape[0] != z.shape[0]:
        raise DimensionError(
            f"targets/mask length {targets.shape[0]}/{mask.shape[0]} does not match {z.shape[0]} logit rows")
    count = int(mask.sum())
    if count == 0:
        raise InvalidConfigurationError("softmax_cross_entropy: mask selects no positions")
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= v):
        raise ContractError(f"targets must lie in [0, {v})")
    safe_t = np.where(mask, targets, 0)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    logp_t = (z - zmax - np.log(se))[np.arange(z.shape[0]), safe_t]
    loss = -(logp_t * mask).sum() / count
    shape = logits.shape

    def bwd(g):
        p = e / se
        p[np.arange(z.shape[0]), safe_t] -= 1.0
        p *= (mask[:, None] * (float(g) / count))
        return (p.reshape(shape),)

    return _make(np.asarray(loss), (logits,), bwd, "softmax_cross_entropy")

