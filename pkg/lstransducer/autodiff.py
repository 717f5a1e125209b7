#!/usr/bin/env python3
"""
Reverse-mode differentiation over dense float64 matrices.

Every tensor is a 2-D `Value`. Primitives build new Values whose `parents`
and `backward` record how to push an upstream gradient back to their inputs.
`backward(loss)` sweeps the graph once in reverse topological order and adds
(never assigns) into each reachable node's `grad`.

Broadcasting is limited to row vectors (1, n), column vectors (n, 1) and
scalars (1, 1), which is all the network blocks need.

Example:
    >>> W = Value(np.ones((2, 2)))
    >>> backward(sum_all(W))
    >>> W.grad
    array([[1., 1.],
           [1., 1.]])
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    GRAD_CLIP,
    LAYER_NORM_EPS,
)
from .errors import ContractError, DataError, DimensionError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Value:
    """A float64 matrix plus the provenance needed for the reverse sweep."""

    __slots__ = ("data", "grad", "op", "parents", "_backward")

    def __init__(
        self,
        data,
        op: str = "leaf",
        parents: Tuple["Value", ...] = (),
        backward: Optional[BackwardFn] = None,
    ):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ContractError(f"Value must be at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 Value, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError("accumulate", self.data.shape, g.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Value(op={self.op}, shape={self.data.shape})"

    def __add__(self, other: "Value") -> "Value":
        return add(self, other)

    def __sub__(self, other: "Value") -> "Value":
        return sub(self, other)

    def __mul__(self, other: "Value") -> "Value":
        return mul(self, other)

    def __matmul__(self, other: "Value") -> "Value":
        return matmul(self, other)

    def __neg__(self) -> "Value":
        return scale(self, -1.0)


def make_node(data: np.ndarray, parents: Sequence[Value], backward: BackwardFn, op: str) -> Value:
    """
    Create a differentiable node.

    Args:
        data: Forward value
        parents: Input Values, in the order `backward` returns their gradients
        backward: Maps the upstream gradient to one gradient (or None) per parent
        op: Operation tag used in error messages and reprs

    Returns:
        The new Value
    """
    return Value(data, op=op, parents=tuple(parents), backward=backward)


def constant(data) -> Value:
    """A Value that is an input, not a parameter."""
    return Value(data, op="const")


def topological_order(root: Value) -> List[Value]:
    """Nodes reachable from root, parents before children, each exactly once."""
    order: List[Value] = []
    seen = set()
    stack: List[Tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Value) -> None:
    """
    Accumulate d(loss)/d(node) into `grad` of every node reachable from loss.

    Repeated calls without zeroing add up: calling twice on sum(W) leaves
    all-twos in W.grad.

    Raises:
        ContractError: If loss is not 1x1
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    order = topological_order(loss)
    # Gradients flowing in during this sweep only; node.grad keeps the running total.
    upstream: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


# ==============================================================================
# BROADCASTING HELPERS
# ==============================================================================

def _broadcast_shape(name: str, a: Value, b: Value) -> Tuple[int, int]:
    out = []
    for da, db in zip(a.shape, b.shape):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(name, a.shape, b.shape)
    return out[0], out[1]


def _unbroadcast(g: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    axes = tuple(i for i, (s, o) in enumerate(zip(shape, g.shape)) if s == 1 and o != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ==============================================================================
# PRIMITIVES
# ==============================================================================

def matmul(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def _back(g):
        return g @ B.T, A.T @ g

    return make_node(A @ B, (a, b), _back, "matmul")


def _ordered_product(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = np.zeros((A.shape[0], B.shape[1]))
    for k in range(A.shape[1]):
        out = out + A[:, k:k + 1] * B[k:k + 1, :]
    return out


def ordered_matmul(a: Value, b: Value) -> Value:
    """
    Matrix product whose inner sums run strictly left to right.

    Each output entry is accumulated in index order, so the result does not
    depend on the operand shapes the way a BLAS kernel's blocking does.
    Appending exact zeros to the inner dimension leaves every entry unchanged.
    """
    if a.shape[1] != b.shape[0]:
        raise DimensionError("ordered_matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def _back(g):
        return g @ B.T, A.T @ g

    return make_node(_ordered_product(A, B), (a, b), _back, "ordered_matmul")


def transpose(a: Value) -> Value:
    return make_node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Value, b: Value) -> Value:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Value, b: Value) -> Value:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Value, b: Value) -> Value:
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data

    def _back(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return make_node(A * B, (a, b), _back, "mul")


def div(a: Value, b: Value) -> Value:
    _broadcast_shape("div", a, b)
    A, B = a.data, b.data

    def _back(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * A / (B * B), B.shape)

    return make_node(A / B, (a, b), _back, "div")


def scale(a: Value, s: float) -> Value:
    s = float(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Value, s: float) -> Value:
    s = float(s)
    return make_node(a.data + s, (a,), lambda g: (g,), "add_scalar")


def sigmoid(a: Value) -> Value:
    y = expit(a.data)
    return make_node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Value) -> Value:
    y = np.tanh(a.data)
    return make_node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Value) -> Value:
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def absolute(a: Value) -> Value:
    """|a| with subgradient 0 at exactly 0."""
    sign = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def embedding(table: Value, ids) -> Value:
    """Rows of `table` selected by `ids` (also used as a row gather)."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError("embedding", table.shape, (idx.size, 1), "index out of range")
    rows = table.shape

    def _back(g):
        out = np.zeros(rows)
        np.add.at(out, idx, g)
        return (out,)

    return make_node(table.data[idx], (table,), _back, "embedding")


def concat(values: Sequence[Value], axis: int = 1) -> Value:
    if not values:
        raise ContractError("concat needs at least one Value")
    other = 1 - axis
    for v in values[1:]:
        if v.shape[other] != values[0].shape[other]:
            raise DimensionError("concat", values[0].shape, v.shape)
    sizes = [v.shape[axis] for v in values]
    cuts = np.cumsum(sizes)[:-1]

    def _back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(np.concatenate([v.data for v in values], axis=axis), values, _back, "concat")


def slice_cols(a: Value, start: int, stop: int) -> Value:
    if not (0 <= start <= stop <= a.shape[1]):
        raise DimensionError("slice_cols", a.shape, (start, stop))
    shape = a.shape

    def _back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return make_node(a.data[:, start:stop].copy(), (a,), _back, "slice_cols")


def slice_rows(a: Value, start: int, stop: int) -> Value:
    if not (0 <= start <= stop <= a.shape[0]):
        raise DimensionError("slice_rows", a.shape, (start, stop))
    shape = a.shape

    def _back(g):
        out = np.zeros(shape)
        out[start:stop, :] = g
        return (out,)

    return make_node(a.data[start:stop, :].copy(), (a,), _back, "slice_rows")


def layer_norm(x: Value, gain: Value, bias: Value, eps: float = LAYER_NORM_EPS) -> Value:
    """Normalise each row to zero mean and unit variance, then apply gain and bias rows."""
    n = x.shape[1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError("layer_norm", x.shape, gain.shape)
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    var = ((X - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    G = gain.data

    def _back(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return make_node(xhat * G + bias.data, (x, gain, bias), _back, "layer_norm")


def _softmax_rows(X: np.ndarray, ordered: bool) -> np.ndarray:
    e = np.exp(X - X.max(axis=1, keepdims=True))
    if ordered:
        denom = np.add.accumulate(e, axis=1)[:, -1:]
    else:
        denom = e.sum(axis=1, keepdims=True)
    return e / denom


def row_softmax(a: Value, ordered: bool = False) -> Value:
    """
    Softmax over each row, computed with the row maximum subtracted.

    With `ordered=True` the normaliser is a strict left-to-right running sum,
    so trailing entries that are exactly zero after exponentiation (masked
    positions) leave the other entries bit-identical.
    """
    s = _softmax_rows(a.data, ordered)

    def _back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (a,), _back, "row_softmax")


def _log_softmax_rows(X: np.ndarray) -> np.ndarray:
    shifted = X - X.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(a: Value) -> Value:
    y = _log_softmax_rows(a.data)
    s = np.exp(y)

    def _back(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return make_node(y, (a,), _back, "log_softmax")


def cross_entropy(logits: Value, targets) -> Value:
    """
    Sum over rows of -log softmax(logits[r])[targets[r]].

    The gradient with respect to each row is softmax(row) - onehot(target).
    """
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    if idx.size != logits.shape[0]:
        raise DimensionError("cross_entropy", logits.shape, (idx.size,), "one target per row")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy", logits.shape, (idx.size,), "target id out of range")
    logp = _log_softmax_rows(logits.data)
    rows = np.arange(idx.size)
    loss = -logp[rows, idx].sum()

    def _back(g):
        d = np.exp(logp)
        d[rows, idx] -= 1.0
        return (d * g[0, 0],)

    return make_node(np.array([[loss]]), (logits,), _back, "cross_entropy")


def sum_all(a: Value) -> Value:
    shape = a.shape
    return make_node(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean_all(a: Value) -> Value:
    shape = a.shape
    n = a.data.size
    return make_node(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def sum_axis(a: Value, axis: int) -> Value:
    """Sum over one axis, keeping a 2-D shape."""
    shape = a.shape
    return make_node(a.data.sum(axis=axis, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_axis")


def masked_fill(a: Value, mask: np.ndarray, value: float) -> Value:
    """Entries where `mask` is True become exactly `value` and receive no gradient."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise DimensionError("masked_fill", a.shape, m.shape)
    keep = ~m
    return make_node(np.where(m, value, a.data), (a,), lambda g: (g * keep,), "masked_fill")


PRIMITIVES = (
    "matmul", "ordered_matmul", "transpose", "add", "sub", "mul", "div", "scale", "add_scalar",
    "sigmoid", "tanh", "relu", "absolute", "embedding", "concat", "slice_cols", "slice_rows",
    "layer_norm", "row_softmax", "log_softmax", "cross_entropy", "sum_all", "mean_all",
    "sum_axis", "masked_fill",
)


def op_set() -> Dict[str, Callable[..., Value]]:
    """Catalogue of differentiable primitives by name."""
    module = globals()
    return {name: module[name] for name in PRIMITIVES}


# ==============================================================================
# PARAMETERS, OPTIMISER AND CHECKPOINTS
# ==============================================================================

class ParamStore:
    """
    Named parameters plus the adaptive-moment optimiser state.

    Paths are dot-separated (`pred.layer0.attn.wq`) and kept in insertion
    order, which is also the order they are written to a checkpoint.
    """

    def __init__(self):
        self._params: Dict[str, Value] = {}
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, path: str, array: np.ndarray) -> Value:
        if path in self._params:
            raise ContractError(f"duplicate parameter path: {path}")
        value = Value(array, op="param")
        self._params[path] = value
        return value

    def __getitem__(self, path: str) -> Value:
        try:
            return self._params[path]
        except KeyError:
            raise ContractError(f"unknown parameter path: {path}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterable[Tuple[str, Value]]:
        return self._params.items()

    def paths(self, prefix: str = "") -> List[str]:
        return [p for p in self._params if p.startswith(prefix)]

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {p: v.data.copy() for p, v in self._params.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for p, arr in snapshot.items():
            self.assign(p, arr)

    def assign(self, path: str, array: np.ndarray) -> None:
        target = self[path]
        arr = np.asarray(array, dtype=np.float64)
        if arr.shape != target.shape:
            raise DimensionError("assign", target.shape, arr.shape, path)
        target.data = arr.copy()

    def copy(self) -> "ParamStore":
        """Independent copy of the weights with fresh optimiser state."""
        other = ParamStore()
        for p, v in self._params.items():
            other.add(p, v.data.copy())
        return other

    def grad_norm(self, trainable: Optional[Callable[[str], bool]] = None) -> float:
        total = 0.0
        for p, v in self._params.items():
            if v.grad is None or (trainable is not None and not trainable(p)):
                continue
            total += float((v.grad * v.grad).sum())
        return float(np.sqrt(total))

    def step(
        self,
        lr: float,
        trainable: Optional[Callable[[str], bool]] = None,
        clip: float = GRAD_CLIP,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ) -> float:
        """
        Apply one adaptive-moment update to every trainable parameter.

        Args:
            lr: Learning rate for this step (0 leaves the weights unchanged)
            trainable: Predicate on the path; parameters it rejects are not touched
            clip: Global gradient-norm clip over the trainable set (0 disables)

        Returns:
            The gradient norm before clipping
        """
        norm = self.grad_norm(trainable)
        factor = 1.0
        if clip > 0 and norm > clip:
            factor = clip / norm
        self.step_count += 1
        t = self.step_count
        for p, v in self._params.items():
            if trainable is not None and not trainable(p):
                continue
            g = np.zeros_like(v.data) if v.grad is None else v.grad * factor
            m = self._m.get(p)
            if m is None:
                m = np.zeros_like(v.data)
                self._v[p] = np.zeros_like(v.data)
            m = beta1 * m + (1.0 - beta1) * g
            s = beta2 * self._v[p] + (1.0 - beta2) * g * g
            self._m[p], self._v[p] = m, s
            m_hat = m / (1.0 - beta1 ** t)
            s_hat = s / (1.0 - beta2 ** t)
            v.data = v.data - lr * m_hat / (np.sqrt(s_hat) + eps)
        return norm

    def save(self, path: str) -> None:
        """Write the LSTK checkpoint: header, then (path, rows, cols, f64 payload) per entry."""
        chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(self._params))]
        for name, v in self._params.items():
            raw = name.encode("utf-8")
            rows, cols = v.shape
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<II", rows, cols))
            chunks.append(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))
        logger.debug("Wrote %d parameters to %s", len(self._params), path)

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        p = Path(path)
        if not p.exists():
            raise DataError(f"checkpoint not found: {path}")
        blob = p.read_bytes()
        store = cls()
        try:
            magic, version, count = struct.unpack_from("<4sII", blob, 0)
            if magic != CHECKPOINT_MAGIC:
                raise DataError(f"{path}: not an LSTK checkpoint")
            if version != CHECKPOINT_VERSION:
                raise DataError(f"{path}: unsupported checkpoint version {version}")
            offset = 12
            for _ in range(count):
                (n,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                name = blob[offset:offset + n].decode("utf-8")
                offset += n
                rows, cols = struct.unpack_from("<II", blob, offset)
                offset += 8
                size = rows * cols * 8
                if offset + size > len(blob):
                    raise DataError(f"{path}: truncated payload for {name}")
                data = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset)
                offset += size
                store.add(name, data.reshape(rows, cols).astype(np.float64))
        except struct.error as e:
            raise DataError(f"{path}: truncated checkpoint ({e})") from e
        except UnicodeDecodeError as e:
            raise DataError(f"{path}: bad parameter name ({e})") from e
        if offset != len(blob):
            raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
        return store
