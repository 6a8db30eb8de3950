"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Tensors wrap numpy arrays and are immutable apart from ``grad``. Operations
are recorded on the innermost active :class:`Tape` (a context manager, local
to the calling thread) whenever at least one input requires a gradient.

Arrays may carry leading batch axes; matrices act on the last two axes, so a
sequence batch is stored as ``(batch, n, tau)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, values: np.ndarray) -> None:
        """Replace the stored values; the optimiser's write path between passes."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign_: shape {arr.shape} does not match {self.data.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("assign_: non-finite values")
        arr.setflags(write=False)
        self.data = arr

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def record(self, node: Node) -> None:
        node.output._node = node
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Gradients add into existing ``.grad`` buffers, so call ``zero_grad`` on
    parameters between optimisation steps.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss is detached: it was not produced under an active tape")
    tape = loss._node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # each node is visited once, newest first, so consumers precede producers
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------------------
# primitive registry

ForwardFn = Callable[..., tuple[np.ndarray, Callable]]
_PRIMITIVES: dict[str, ForwardFn] = {}


def register_primitive(name: str, fn: ForwardFn) -> None:
    """Register ``fn(*arrays, **params) -> (out, vjp)``.

    ``vjp(g)`` must return one gradient (or ``None``) per input array.
    """
    _PRIMITIVES[name] = fn


def primitive_forward(op_id: str, inputs: Sequence[Tensor], **params) -> Tensor:
    try:
        fn = _PRIMITIVES[op_id]
    except KeyError:
        raise KeyError(f"unknown primitive {op_id!r}") from None
    arrays = [t.data for t in inputs]
    out, vjp = fn(*arrays, **params)
    result = Tensor._wrap(np.asarray(out, dtype=np.float64))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(Node(op_id, tuple(inputs), result, vjp, tape))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _scale(a, *, c: float):
    return a * c, lambda g: (g * c,)


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ") from None
    if a.ndim == 2 and b.ndim == 3:
        # weight times a batch of sequences; the weight gradient contracts
        # the batch axis in one tensordot instead of summing per-sample products
        out = a @ b

        def vjp_shared(g):
            ga = np.tensordot(g, b, axes=([0, 2], [0, 2]))
            gb = a.T @ g
            return ga, gb

        return out, vjp_shared
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _transpose(a):
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
    return np.swapaxes(a, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)


def _sigmoid_np(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activation(a, *, kind: str):
    if kind == "sigmoid":
        s = _sigmoid_np(a)
        return s, lambda g: (g * s * (1.0 - s),)
    if kind == "tanh":
        t = np.tanh(a)
        return t, lambda g: (g * (1.0 - t * t),)
    if kind == "relu":
        mask = a > 0
        return a * mask, lambda g: (g * mask,)
    if kind == "identity":
        return a, lambda g: (g,)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_np(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max subtraction; exact up to rounding by shift invariance."""
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax(a, *, axis: int):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    s = softmax_np(a, axis)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return s, vjp


def _sum(a, *, axis=None, keepdims: bool = False):
    out = a.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


def _take_last(a, *, index: int):
    if not -a.shape[-1] <= index < a.shape[-1]:
        raise ShapeError(f"take_last: index {index} out of range for shape {a.shape}")
    i = index % a.shape[-1]
    out = a[..., i : i + 1].copy()

    def vjp(g):
        full = np.zeros_like(a)
        full[..., i : i + 1] = g
        return (full,)

    return out, vjp


def _reshape(a, *, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


def _concat_last(*arrays):
    lead = {x.shape[:-1] for x in arrays}
    if len(lead) != 1:
        raise ShapeError(f"concat_last: leading shapes differ: {[x.shape for x in arrays]}")
    out = np.concatenate(arrays, axis=-1)
    bounds = np.cumsum([0] + [x.shape[-1] for x in arrays])

    def vjp(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(arrays)))

    return out, vjp


for _name, _fn in [
    ("add", _add),
    ("sub", _sub),
    ("mul", _mul),
    ("scale", _scale),
    ("matmul", _matmul),
    ("transpose", _transpose),
    ("activation", _activation),
    ("softmax", _softmax),
    ("sum", _sum),
    ("take_last", _take_last),
    ("reshape", _reshape),
    ("concat_last", _concat_last),
]:
    register_primitive(_name, _fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("sub", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return primitive_forward("scale", (a,), c=float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("matmul", (a, b))


def transpose(a: Tensor) -> Tensor:
    return primitive_forward("transpose", (a,))


def activation(a: Tensor, kind: str) -> Tensor:
    return primitive_forward("activation", (a,), kind=kind)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return primitive_forward("softmax", (a,), axis=axis)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return primitive_forward("sum", (a,), axis=axis, keepdims=keepdims)


def take_last(a: Tensor, index: int) -> Tensor:
    return primitive_forward("take_last", (a,), index=index)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return primitive_forward("reshape", (a,), shape=tuple(shape))


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    return primitive_forward("concat_last", tuple(tensors))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over every axis of the squared error."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return scale(tsum(mul(d, d)), 1.0 / d.size)


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient and central differences.

    Non-scalar outputs are contracted with a fixed random weight so a single
    reverse pass gives the full gradient. The numeric quotient divides by the
    representable step ``(x + h) - (x - h)``, and output differences are
    taken elementwise before contraction, so linear maps check exactly.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.isfinite(x0).all():
        raise NonFiniteError("grad_check: non-finite input")

    xt = Tensor(x0, requires_grad=True)
    with Tape():
        y = f(xt)
        if y.size == 1:
            w = np.ones(y.shape)
        else:
            w = np.random.default_rng(seed).standard_normal(y.shape)
        loss = tsum(mul(y, Tensor(w)))
    backward(loss)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        h = xp[i] - xm[i]
        yp = f(Tensor(xp.reshape(x0.shape))).data
        ym = f(Tensor(xm.reshape(x0.shape))).data
        numeric.reshape(-1)[i] = np.sum(w * (yp - ym)) / h
    if not (np.isfinite(numeric).all() and np.isfinite(analytic).all()):
        raise NonFiniteError("grad_check: non-finite gradient")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
