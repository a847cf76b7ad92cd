"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous row-major numpy array. Every differentiable
operation records a node (backward closure + parent references) on the
output tensor; ``backward()`` on a scalar loss walks the recorded graph in
reverse topological order and accumulates gradients into the
``requires_grad`` leaves. The graph is rebuilt on every forward pass and
freed after backward, so episodic training never retains stale state.

Element precision is whatever dtype the leaf arrays carry (float32 for
training, float64 for gradient checking); operations preserve it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class DimensionError(ValueError):
    """Shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class Tensor:
    """N-dimensional dense float array, optionally tracked by the autodiff tape.

    Attributes:
        data: contiguous row-major numpy array (float32 or float64).
        requires_grad: whether gradients should accumulate on this leaf.
        grad: accumulated gradient, same shape as ``data``, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient array, with unreached leaves reading as zero."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self):
        backward(self)


def _wrap_const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], None], op: str) -> Tensor:
    """Wrap an op result, recording the graph node when grad mode is on."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out._parents = tuple(parents) if track else ()
    out._backward_fn = backward_fn if track else None
    out._op = op
    return out


def backward(loss: Tensor, free_graph: bool = True):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    ``loss`` must hold exactly one element. Gradients add (+=) onto any
    gradient already stored, matching the optimizer's zero_grad contract.
    The recorded graph is dismantled afterwards unless ``free_graph`` is
    False (grad_check re-walks closures and never reuses graphs either).
    """
    if loss.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p.requires_grad or p._parents):
                stack.append((p, False))

    # Transient grads for interior nodes live on .grad during the sweep and
    # are cleared afterwards; only leaves keep their accumulation.
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
        if node._parents:
            node.grad = None  # interior: transient
            if free_graph:
                node._parents = ()
                node._backward_fn = None


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# -- elementwise / structural ops -----------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    if b.size != 1:
        _binary_shapes(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(g)
        if b.requires_grad or b._parents:
            b.accumulate_grad(g if b.size != 1 else np.sum(g).reshape(b.data.shape))

    return make_node(out, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    if b.size != 1:
        _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(g)
        if b.requires_grad or b._parents:
            gb = -g if b.size != 1 else -np.sum(g).reshape(b.data.shape)
            b.accumulate_grad(gb)

    return make_node(out, (a, b), bwd, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    if b.size != 1:
        _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(g * b.data)
        if b.requires_grad or b._parents:
            gb = g * a.data
            if b.size == 1:
                gb = np.sum(gb).reshape(b.data.shape)
            b.accumulate_grad(gb)

    return make_node(out, (a, b), bwd, "mul")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        a.accumulate_grad(g * (a.data > 0))

    return make_node(out, (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    """1/(1+exp(-x)), computed stably for both signs of x."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return make_node(out, (a,), bwd, "sigmoid")


def reshape(a: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(a.data.reshape(shape))

    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return make_node(out, (a,), bwd, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        inv = np.argsort(axes) if axes is not None else None
        a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return make_node(out, (a,), bwd, "transpose")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
        else:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return make_node(out, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = np.asarray(a.data.mean(axis=axis))

    def bwd(g):
        scale = 1.0 / n
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g * scale, a.data.shape).copy())
        else:
            a.accumulate_grad(
                np.broadcast_to(np.expand_dims(g * scale, axis), a.data.shape).copy())

    return make_node(out, (a,), bwd, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D inputs give the plain product; matching leading
    batch dimensions give a stacked product."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(
            f"matmul: batch dimensions disagree, {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad or b._parents:
            b.accumulate_grad(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return make_node(out, (a, b), bwd, "matmul")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        ts = t.data.shape
        if len(ts) != len(ref) or any(
                i != axis % len(ref) and ts[i] != ref[i] for i in range(len(ref))):
            raise DimensionError(
                f"concat: incompatible shapes {ref} vs {ts} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(np.ascontiguousarray(g[tuple(idx)]))

    return make_node(out, tuple(tensors), bwd, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate feature maps along the channel (last) axis; spatial and
    batch dims must agree exactly."""
    return concat(tensors, axis=-1)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    out = np.ascontiguousarray(a.data[tuple(idx)])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[tuple(idx)] = g
        a.accumulate_grad(full)

    return make_node(out, (a,), bwd, "slice")


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each trailing-axis vector by sqrt(sum of squares + eps).

    eps keeps zero rows at exactly zero instead of NaN.
    """
    if eps <= 0:
        raise ContractError("l2_normalize_rows: eps must be > 0")
    x = a.data
    sq = np.sum(x * x, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    out = x * inv

    def bwd(g):
        # d/dx_j [x_j * inv] = inv - x_j * (g . x) * inv^3
        dot = np.sum(g * x, axis=-1, keepdims=True)
        a.accumulate_grad(g * inv - x * dot * (inv ** 3))

    return make_node(out, (a,), bwd, "l2_normalize_rows")


def tile_batch(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of the whole batch along axis 0
    (out[i*B + b] = a[b])."""
    out = np.tile(a.data, (reps,) + (1,) * (a.data.ndim - 1))

    def bwd(g):
        a.accumulate_grad(g.reshape((reps,) + a.data.shape).sum(axis=0))

    return make_node(out, (a,), bwd, "tile_batch")


def repeat_batch(a: Tensor, reps: int) -> Tensor:
    """Repeat each batch row ``reps`` times in place
    (out[b*reps + i] = a[b])."""
    out = np.repeat(a.data, reps, axis=0)

    def bwd(g):
        a.accumulate_grad(g.reshape((a.data.shape[0], reps) + a.data.shape[1:]).sum(axis=1))

    return make_node(out, (a,), bwd, "repeat_batch")
