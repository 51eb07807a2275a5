"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` holding the saved
activations it needs and a closure mapping the output gradient to input
gradients. Nodes carry a global execution index, so a backward pass is a
walk over the reachable nodes in exactly reverse execution order.

Only scalar-vs-tensor broadcasting is supported; every other operand pair
must agree in shape.
"""
from __future__ import annotations

import itertools
import logging
from typing import Callable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

_order = itertools.count()

Scalar = Union[int, float]


class Node:
    """One executed operation in the graph."""

    __slots__ = ("op", "inputs", "backward_fn", "order")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.order = next(_order)

    def __repr__(self) -> str:
        return f"Node({self.op}, order={self.order})"


class Tensor:
    """N-dimensional float32 array participating in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = node

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self, seed: float = 1.0) -> None:
        backward(self, seed)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float32), requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op's forward result; a node is recorded only when some input needs gradients.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, node=Node(op, inputs, backward_fn))
    return Tensor(data)


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """The nodes reachable from a root tensor, in execution order."""

    def __init__(self, root: Tensor):
        self.root = root
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.node.inputs)
        nodes.sort(key=lambda t: t.node.order)
        self.tensors = nodes

    @property
    def nodes(self) -> list:
        return [t.node for t in self.tensors]

    def backward(self, seed: float = 1.0) -> None:
        root = self.root
        if root.size != 1:
            raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
        if not root.requires_grad:
            raise ValueError("backward root does not depend on any tensor requiring grad")
        grads = {id(root): np.full(root.shape, seed, dtype=np.float32)}
        for t in reversed(self.tensors):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            in_grads = t.node.backward_fn(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    ig = ig.reshape(inp.shape)
                if inp.node is None:
                    _accumulate_leaf(inp, ig)
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
        if root.node is None:
            _accumulate_leaf(root, np.full(root.shape, seed, dtype=np.float32))


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(np.float32, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(root: Tensor, seed: float = 1.0) -> None:
    """Accumulate ``seed * d(root)/d(leaf)`` into every leaf that requires grad."""
    if root.size != 1:
        raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
    Graph(root).backward(seed)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, Tensor) and x.ndim == 0
    )


def _operands(op: str, a, b) -> tuple:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a_s, b_s = _is_scalar(a), _is_scalar(b)
    if isinstance(a, Tensor) and isinstance(b, Tensor) and not (a_s or b_s):
        if a.shape != b.shape:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return as_tensor(a), as_tensor(b)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=np.float32).reshape(shape)


def apply_binary(op: str, a, b) -> Tensor:
    """Elementwise ``add``, ``sub`` or ``mul`` of equal shapes (or scalar with tensor)."""
    if op not in ("add", "sub", "mul"):
        raise ValueError(f"unknown binary op {op!r}")
    a, b = _operands(op, a, b)
    ad, bd = a.data, b.data
    if op == "add":
        out = ad + bd

        def bw(g):
            return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    elif op == "sub":
        out = ad - bd

        def bw(g):
            return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    else:
        out = ad * bd

        def bw(g):
            ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
            gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
            return ga, gb

    return make_result(np.asarray(out, dtype=np.float32), op, (a, b), bw)


def add(a, b) -> Tensor:
    return apply_binary("add", a, b)


def sub(a, b) -> Tensor:
    return apply_binary("sub", a, b)


def mul(a, b) -> Tensor:
    return apply_binary("mul", a, b)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, "neg", (a,), lambda g: (-g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out.astype(np.float64))).astype(np.float32),

    return make_result(out, "sqrt", (a,), bw)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def reduce(op: str, t: Tensor) -> Tensor:
    """Reduce all elements to a scalar with ``sum``, ``mean`` or ``max``.

    ``max`` routes its gradient to the first maximal element in row-major order.
    Accumulation is done in float64.
    """
    if t.size == 0:
        raise ValueError(f"{op} of an empty tensor")
    shape = t.shape
    if op == "sum":
        out = t.data.sum(dtype=np.float64)

        def bw(g):
            return np.full(shape, g.reshape(()), dtype=np.float32),

    elif op == "mean":
        n = t.size
        out = t.data.sum(dtype=np.float64) / n

        def bw(g):
            return np.full(shape, np.float64(g.reshape(())) / n, dtype=np.float32),

    elif op == "max":
        flat_idx = int(np.argmax(t.data))  # argmax returns the first occurrence
        out = t.data.reshape(-1)[flat_idx]

        def bw(g):
            grad = np.zeros(t.size, dtype=np.float32)
            grad[flat_idx] = g.reshape(())
            return grad.reshape(shape),

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return make_result(np.asarray(out, dtype=np.float32), op, (t,), bw)


def sum_all(t: Tensor) -> Tensor:
    return reduce("sum", t)


def mean(t: Tensor) -> Tensor:
    return reduce("mean", t)


def max_all(t: Tensor) -> Tensor:
    return reduce("max", t)


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result(out, "concat", tensors, bw)


def channel_slice(t: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an NCHW tensor."""
    if not 0 <= start < stop <= t.shape[1]:
        raise ValueError(f"channel slice {start}:{stop} out of range for {t.shape}")
    out = np.ascontiguousarray(t.data[:, start:stop])

    def bw(g):
        full = np.zeros(t.shape, dtype=np.float32)
        full[:, start:stop] = g
        return full,

    return make_result(out, "channel_slice", (t,), bw)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Largest ``|analytic - central difference| / max(1, |central difference|)`` over x.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.
    """
    base = np.array(x.data, dtype=np.float32)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = np.zeros(base.shape) if probe.grad is None else probe.grad.astype(np.float64)

    numeric = np.empty(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + np.float32(eps)
        x_hi = float(flat[i])
        hi = float(f(Tensor(base)).item())
        flat[i] = orig - np.float32(eps)
        x_lo = float(flat[i])
        lo = float(f(Tensor(base)).item())
        flat[i] = orig
        # float32 rounding makes the realised step differ from 2*eps
        numeric[i] = (hi - lo) / (x_hi - x_lo)
    numeric = numeric.reshape(base.shape)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())

