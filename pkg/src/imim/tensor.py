"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations a pre-norm transformer with a
cross-attention module needs (matmul, softmax, layernorm, GELU, elementwise
arithmetic, reshape/transpose, row gather/scatter, reductions). Buffers are
row-major numpy float64 arrays; transposes materialize. Gradients accumulate
with += and are cleared explicitly.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ValueError):
    """Non-finite input where finite values are required."""


class GraphError(RuntimeError):
    """Backward-graph contract violation (e.g. non-scalar loss)."""


class OpNode:
    """One recorded operation: input handles plus a backward rule.

    backward_rule(grad_out) returns one gradient array (or None) per input.
    """

    __slots__ = ("op", "inputs", "backward_rule")

    def __init__(self, op: str, inputs: Sequence["Tensor"],
                 backward_rule: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_rule = backward_rule


class Tensor:
    """N-d float64 array plus optional gradient buffer and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: OpNode | None = None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        GradTape(self).backward()

    # operator sugar; scalars are promoted
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_rule) -> Tensor:
    # graph records are only kept where a gradient can flow
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, node=OpNode(op, inputs, backward_rule))
    return Tensor(data)


class GradTape:
    """Topologically ordered trace of the operations reachable from a root.

    Replaying the tape in reverse applies the chain rule to the recorded
    forward; each node is visited exactly once. Leaf tensors (no node) with
    requires_grad accumulate into .grad across backward calls.
    """

    def __init__(self, root: Tensor):
        if root.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {root.data.shape}")
        self.root = root
        self._order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self._order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))

    @property
    def ops(self) -> list[OpNode]:
        return [t.node for t in self._order if t.node is not None]

    def backward(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        for t in reversed(self._order):
            g = grads.get(id(t))
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
                continue
            input_grads = t.node.backward_rule(g)
            for parent, pg in zip(t.node.inputs, input_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    # own the buffer: rules may hand back views of g
                    grads[id(parent)] = np.array(pg)
                else:
                    acc += pg


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss."""
    GradTape(loss).backward()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting over leading/size-1 axes only)

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result("add", data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result("sub", data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result("mul", data, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul expects [m,k] x [k,n], got {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.data.shape}")
    data = np.ascontiguousarray(a.data.T)

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _result("transpose", data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = np.ascontiguousarray(a.data.reshape(shape))
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _result("reshape", data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(parts)))

    return _result("concat", data, parts, bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-d tensor, got {a.data.shape}")
    data = np.ascontiguousarray(a.data[:, start:stop])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result("slice_cols", data, (a,), bwd)


def gather_rows(a: Tensor, idx: Sequence[int]) -> Tensor:
    index = np.asarray(idx, dtype=np.int64)
    if index.ndim != 1 or (a.data.shape[0] and
                           (index.min(initial=0) < 0 or
                            index.max(initial=-1) >= a.data.shape[0])):
        raise ShapeError(
            f"gather_rows index out of range for {a.data.shape[0]} rows: {idx}")
    data = np.ascontiguousarray(a.data[index])

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result("gather_rows", data, (a,), bwd)


def scatter_rows(src: Tensor, idx: Sequence[int], n_rows: int) -> Tensor:
    """Rows of src placed at idx in a fresh [n_rows, d] tensor; other rows zero.

    Indices must be unique and in range, so scatter is invertible by gather.
    """
    index = np.asarray(idx, dtype=np.int64)
    if index.shape[0] != src.data.shape[0]:
        raise ShapeError(
            f"scatter_rows got {index.shape[0]} indices for {src.data.shape[0]} rows")
    if len(np.unique(index)) != index.shape[0]:
        raise ShapeError("scatter_rows indices must be unique")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(
            f"scatter_rows index out of range for {n_rows} rows: {idx}")
    data = np.zeros((n_rows,) + src.data.shape[1:], dtype=np.float64)
    data[index] = src.data

    def bwd(g):
        return (np.ascontiguousarray(g[index]),)

    return _result("scatter_rows", data, (src,), bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _result("sum", data, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean())

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _result("mean", data, (a,), bwd)


# ---------------------------------------------------------------------------
# neural-net primitives

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        # J = diag(s) - s s^T applied row-wise
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _result("softmax", data, (x,), bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layernorm affine params must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        ggam = g * gamma.data
        dx = inv * (ggam
                    - ggam.mean(axis=-1, keepdims=True)
                    - xhat * (ggam * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _result("layernorm", data, (x, gamma, beta), bwd)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    data = x.data * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _result("gelu", data, (x,), bwd)


# ---------------------------------------------------------------------------
# binary serialization: magic "IMTN", u32 version, u32 rank, u64 dims, f64 payload

TENSOR_MAGIC = b"IMTN"
TENSOR_VERSION = 1


def dump_tensor(t: Tensor, f) -> None:
    if hasattr(f, "write"):
        _write_tensor(t, f)
    else:
        with open(f, "wb") as fh:
            _write_tensor(t, fh)


def _write_tensor(t: Tensor, fh) -> None:
    dims = t.data.shape
    fh.write(struct.pack("<4sII", TENSOR_MAGIC, TENSOR_VERSION, len(dims)))
    fh.write(struct.pack(f"<{len(dims)}Q", *dims))
    fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def tensor_byte_size(shape: tuple[int, ...]) -> int:
    return 12 + 8 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))


def load_tensor(f) -> Tensor:
    if hasattr(f, "read"):
        return _read_tensor(f)
    with open(f, "rb") as fh:
        return _read_tensor(fh)


def _read_tensor(fh) -> Tensor:
    magic, version, rank = struct.unpack("<4sII", fh.read(12))
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
    return Tensor(data.copy())
