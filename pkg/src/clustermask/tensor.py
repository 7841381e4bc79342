"""Dense arrays with reverse-mode automatic differentiation.

Only the primitives the decoder, losses and stem actually need are provided.
Broadcasting is limited to array-vs-scalar; every other shape relation must
be made explicit by the caller (``affine`` covers the row-bias case).

Every primitive application that involves an input with ``requires_grad``
is recorded as a node carrying a monotonically increasing id. ``Tape.trace``
recovers the recording order of everything an output depends on, and the
backward pass walks it in exact reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DenseArray",
    "Tape",
    "ShapeError",
    "DomainError",
    "ContractError",
    "no_grad",
    "checked",
    "corrupt_gradient",
    "matmul",
    "transpose",
    "reshape",
    "softmax_axis",
    "log_softmax_axis",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sigmoid",
    "gelu",
    "log",
    "exp",
    "absolute",
    "reduce",
    "concat",
    "split",
    "take",
    "affine",
    "normalize_rows",
    "layer_norm",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DomainError(ValueError):
    """Input outside the domain of an operation (checked mode) or empty reduction."""


class ContractError(ValueError):
    """A caller-side precondition was violated."""


_ids = itertools.count()
_grad_enabled = True
_checked = os.environ.get("CLUSTERMASK_CHECKED", "0") not in ("0", "", "false", "no")
_corrupted: set[str] = set()


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Reject non-finite values at op boundaries and log of non-positive input."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


@contextlib.contextmanager
def corrupt_gradient(*op_names: str):
    """Test hook: scale the backward of the named primitives by 1.5."""
    _corrupted.update(op_names)
    try:
        yield
    finally:
        _corrupted.difference_update(op_names)


class DenseArray:
    """N-dimensional real array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(extent == 0 for extent in arr.shape):
            raise ShapeError(f"zero extent in shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = None
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DenseArray":
        out = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = None
        out._id = next(_ids)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "DenseArray":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "DenseArray":
        return DenseArray._wrap(self.data)

    def backward(self, seed=None) -> "Tape":
        tape = Tape.trace(self)
        tape.backward(self, seed)
        return tape

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DenseArray(shape={self.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, DenseArray):
            raise ContractError("division by an array is not a primitive")
        return scale(self, 1.0 / float(other))


def _as_array(x, like: DenseArray | None = None) -> DenseArray:
    if isinstance(x, DenseArray):
        return x
    dtype = like.dtype if like is not None else None
    return DenseArray._wrap(np.array(x, dtype=dtype))


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite values in output")


def _make(name: str, arr: np.ndarray, parents: Sequence[DenseArray], backward) -> DenseArray:
    if _checked:
        _check_finite(name, arr)
    out = DenseArray._wrap(arr)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        if name in _corrupted:
            inner = backward

            def backward(g, _inner=inner):
                return [None if gi is None else 1.5 * gi for gi in _inner(g)]

        out._backward = backward
        out._op = name
    return out


class Tape:
    """Recorded primitive applications an output depends on, in recording order."""

    def __init__(self, nodes: list[DenseArray]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: DenseArray) -> "Tape":
        seen: dict[int, DenseArray] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node._id in seen or node._backward is None:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda n: n._id))

    @property
    def ops(self) -> list[str]:
        return [n._op for n in self.nodes]

    def backward(self, output: DenseArray, seed=None) -> None:
        if seed is None:
            if output.size != 1:
                raise ContractError(f"backward from non-scalar output of shape {output.shape}")
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {output._id: np.asarray(seed, dtype=output.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        # whatever remains belongs to leaves
        leaves = {}
        for node in self.nodes:
            for parent in node._parents:
                if parent._backward is None and parent.requires_grad:
                    leaves[parent._id] = parent
        if output._backward is None and output.requires_grad:
            leaves[output._id] = output
        for pid, leaf in leaves.items():
            g = grads.get(pid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g


# --------------------------------------------------------------------------
# Linear algebra and shape plumbing
# --------------------------------------------------------------------------


def matmul(a: DenseArray, b: DenseArray) -> DenseArray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return [g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None]

    return _make("matmul", A @ B, (a, b), backward)


def transpose(a: DenseArray) -> DenseArray:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {a.shape}")
    return _make("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: [g.T])


def reshape(a: DenseArray, shape: Sequence[int]) -> DenseArray:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} has {a.size} elements, {shape} needs {int(np.prod(shape))}")
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: [g.reshape(src)])


def _axis(x: DenseArray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax_axis(x: DenseArray, axis: int) -> DenseArray:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

    return _make("softmax", y, (x,), backward)


def log_softmax_axis(x: DenseArray, axis: int, where: np.ndarray | None = None) -> DenseArray:
    """Log of softmax along ``axis``; entries with ``where == False`` are excluded.

    Excluded entries contribute nothing to the normalizer, read back as 0 and
    receive no gradient.
    """
    axis = _axis(x, axis)
    data = x.data
    if where is not None:
        where = np.asarray(where, dtype=bool)
        if where.shape != x.shape:
            raise ShapeError(f"log_softmax mask {where.shape} vs input {x.shape}")
        if not where.any(axis=axis).all():
            raise DomainError("log_softmax: a slice has no included entries")
        data = np.where(where, data, -np.inf)
    m = data.max(axis=axis, keepdims=True)
    e = np.exp(data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = data - m - np.log(s)
    p = e / s
    if where is not None:
        y = np.where(where, y, 0.0)

    def backward(g):
        if where is not None:
            g = np.where(where, g, 0.0)
        return [g - p * g.sum(axis=axis, keepdims=True)]

    return _make("log_softmax", y, (x,), backward)


def concat(arrays: Sequence[DenseArray], axis: int = 0) -> DenseArray:
    arrays = list(arrays)
    if not arrays:
        raise ShapeError("concat of nothing")
    axis = _axis(arrays[0], axis)
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(a.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: {ref} vs {a.shape}")
    sizes = [a.shape[axis] for a in arrays]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return list(np.split(g, bounds, axis=axis))

    return _make("concat", np.concatenate([a.data for a in arrays], axis=axis), arrays, backward)


def take(x: DenseArray, indices, axis: int = 0) -> DenseArray:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    axis = _axis(x, axis)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for extent {n}")
    if idx.ndim != 1 and axis != 0:
        raise ShapeError("multi-dimensional indices only supported on axis 0")
    src_shape = x.shape

    def backward(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return [gx]

    return _make("take", np.take(x.data, idx, axis=axis), (x,), backward)


def split(x: DenseArray, sizes: Sequence[int], axis: int = 0) -> list[DenseArray]:
    axis = _axis(x, axis)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(take(x, np.arange(start, start + s), axis=axis))
        start += s
    return out


def affine(x: DenseArray, w: DenseArray, b: DenseArray) -> DenseArray:
    """Row-wise affine map ``x @ w + b`` (b has shape (n_out,)); a 1x1 convolution."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} vs weight {w.shape}")
    X, W = x.data, w.data

    def backward(g):
        return [
            g @ W.T if x.requires_grad else None,
            X.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        ]

    return _make("affine", X @ W + b.data, (x, w, b), backward)


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------


def _binary_operands(a, b):
    like = a if isinstance(a, DenseArray) else b
    a, b = _as_array(a, like), _as_array(b, like)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> DenseArray:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])


def sub(a, b) -> DenseArray:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: [_unbroadcast(g, sa), _unbroadcast(-g, sb)])


def mul(a, b) -> DenseArray:
    a, b = _binary_operands(a, b)
    A, B = a.data, b.data

    def backward(g):
        return [_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)]

    return _make("mul", A * B, (a, b), backward)


def scale(x: DenseArray, c: float) -> DenseArray:
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: [g * c])


def neg(x: DenseArray) -> DenseArray:
    return _make("neg", -x.data, (x,), lambda g: [-g])


def sigmoid(x: DenseArray) -> DenseArray:
    X = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(X.dtype)
    return _make("sigmoid", y, (x,), lambda g: [g * y * (1.0 - y)])


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: DenseArray) -> DenseArray:
    """Exact GeLU, x * Phi(x) with Phi the standard normal CDF."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))
    y = (X * cdf).astype(X.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * X * X)
        return [g * (cdf + X * pdf)]

    return _make("gelu", y, (x,), backward)


def log(x: DenseArray) -> DenseArray:
    X = x.data
    if _checked and np.any(X <= 0):
        raise DomainError("log of non-positive input")
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(X)
    return _make("log", y, (x,), lambda g: [g / X])


def exp(x: DenseArray) -> DenseArray:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: [g * y])


def absolute(x: DenseArray) -> DenseArray:
    X = x.data
    return _make("abs", np.abs(X), (x,), lambda g: [g * np.sign(X)])


_ELEMENTWISE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "log": log,
    "exp": exp,
    "abs": absolute,
    "scale": scale,
}


def elementwise(op_kind: str, *args) -> DenseArray:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# --------------------------------------------------------------------------
# Reductions and normalizations
# --------------------------------------------------------------------------


def reduce(x: DenseArray, kind: str, axis: int | None = None) -> DenseArray:
    """sum / mean / min / max along ``axis`` (all elements when None).

    min and max send their gradient to the first attaining index.
    """
    X = x.data if axis is not None else x.data.reshape(-1)
    ax = 0 if axis is None else _axis(x, axis)
    if X.shape[ax] == 0:
        raise DomainError("reduction over an empty axis")
    src_shape = x.shape
    n = X.shape[ax]
    if kind == "sum":
        y = X.sum(axis=ax)

        def backward(g):
            return [np.broadcast_to(np.expand_dims(g, ax), X.shape).reshape(src_shape).copy()]

    elif kind == "mean":
        y = X.mean(axis=ax)

        def backward(g):
            return [(np.broadcast_to(np.expand_dims(g, ax), X.shape) / n).reshape(src_shape)]

    elif kind in ("min", "max"):
        pick = np.argmin(X, axis=ax) if kind == "min" else np.argmax(X, axis=ax)
        y = np.take_along_axis(X, np.expand_dims(pick, ax), axis=ax).squeeze(ax)

        def backward(g):
            gx = np.zeros(X.shape, dtype=g.dtype)
            np.put_along_axis(gx, np.expand_dims(pick, ax), np.expand_dims(g, ax), axis=ax)
            return [gx.reshape(src_shape)]

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return _make(kind, np.asarray(y, dtype=X.dtype), (x,), backward)


def normalize_rows(x: DenseArray, eps: float = 1e-12) -> DenseArray:
    """Scale each row of a matrix to unit L2 norm."""
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows expects rank 2, got {x.shape}")
    X = x.data
    norm = np.maximum(np.sqrt((X * X).sum(axis=1, keepdims=True)), eps)
    y = X / norm

    def backward(g):
        return [(g - y * (g * y).sum(axis=1, keepdims=True)) / norm]

    return _make("normalize_rows", y, (x,), backward)


def layer_norm(x: DenseArray, eps: float = 1e-5) -> DenseArray:
    """Per-row standardization (no learned gain/bias)."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects rank 2, got {x.shape}")
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        d = X.shape[1]
        return [inv / d * (d * g - g.sum(axis=1, keepdims=True) - y * (g * y).sum(axis=1, keepdims=True))]

    return _make("layer_norm", y, (x,), backward)


# --------------------------------------------------------------------------
# Gradient oracle
# --------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[..., DenseArray],
    inputs: DenseArray | Iterable[DenseArray],
    eps: float = 1e-6,
) -> float:
    """Max relative error between recorded gradients and central differences.

    ``f`` is called with fresh arrays (one per input) and must return a
    single-element array. The relative error of each element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if isinstance(inputs, DenseArray):
        inputs = [inputs]
    base = [np.array(x.data, dtype=np.float64) for x in inputs]
    leaves = [DenseArray(b, requires_grad=True) for b in base]
    out = f(*leaves)
    if not isinstance(out, DenseArray) or out.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    out.backward()
    worst = 0.0
    for k, b in enumerate(base):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(b)
        analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
        flat = b.reshape(-1)
        for i in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = flat.copy()
                pert[i] += sign * eps
                args = [DenseArray._wrap(pert.reshape(b.shape)) if j == k else DenseArray._wrap(base[j]) for j in range(len(base))]
                with no_grad():
                    vals.append(f(*args).item())
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
