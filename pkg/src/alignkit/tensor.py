"""Dense tensors with reverse-mode autodiff, seeded RNG streams, and a
finite-difference gradient checker.

Tensors wrap a NumPy array (float64 by default, float32 optional) and record
the operations applied to them.  Calling :meth:`Tensor.backward` on a scalar
walks the recorded graph in reverse topological order and accumulates
gradients into every tensor with ``requires_grad=True``.  Operations never
mutate their inputs' data.
"""
from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class DegenerateRowError(ValueError):
    """A row is numerically zero where a nonzero row is required."""


class ContractError(ValueError):
    """A caller-facing contract was violated (wrong arity, bad row sums, ...)."""


class ParameterError(ValueError):
    """A numeric parameter is outside its legal range."""


DEFAULT_DTYPE = np.float64
_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing NumPy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense real array participating in gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every contributing tensor."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise arithmetic -------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward)


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients to both operands."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    x = _coerce(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {x.shape}")
    data = x.data.T.copy()

    def backward(g):
        x._accumulate(g.T)

    return _result(data, (x,), backward)


# -- nonlinearities ----------------------------------------------------


def exp(x) -> Tensor:
    x = _coerce(x)
    data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return _result(data, (x,), backward)


def log(x) -> Tensor:
    x = _coerce(x)
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _result(data, (x,), backward)


def sqrt(x) -> Tensor:
    x = _coerce(x)
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / data)

    return _result(data, (x,), backward)


def tanh(x) -> Tensor:
    x = _coerce(x)
    data = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - data * data))

    return _result(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    # Split by sign to avoid overflow in exp.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _result(out, (x,), backward)


# -- row-wise operations ----------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax via max subtraction; rows sum to 1."""
    x = _coerce(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows: input contains non-finite entries")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate((g - dot) * data)

    return _result(data, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _coerce(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax_rows: input contains non-finite entries")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        x._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return _result(data, (x,), backward)


def l2_normalize_rows(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm; degenerate rows are an error."""
    x = _coerce(x)
    arr = x.data if x.ndim == 2 else x.data.reshape(1, -1)
    norms = np.sqrt((arr * arr).sum(axis=-1, keepdims=True))
    bad = np.nonzero(norms.reshape(-1) < min_norm)[0]
    if bad.size:
        raise DegenerateRowError(f"l2_normalize_rows: row {int(bad[0])} has norm below {min_norm}")
    y = arr / norms
    data = y if x.ndim == 2 else y.reshape(x.shape)

    def backward(g):
        g2 = g.reshape(arr.shape)
        dot = (g2 * y).sum(axis=-1, keepdims=True)
        x._accumulate(((g2 - y * dot) / norms).reshape(x.shape))

    return _result(data, (x,), backward)


# -- reductions --------------------------------------------------------


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge, x.shape).copy())

    return _result(data, (x,), backward)


def tmean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- structural ops ----------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                part._accumulate(g[tuple(idx)])

    return _result(data, tuple(parts), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (gradient scatters back)."""
    x = _coerce(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    data = x.data[tuple(idx)].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[tuple(idx)] = g
        x._accumulate(full)

    return _result(data, (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return narrow(x, 0, start, stop - start)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    return narrow(x, 1, start, stop - start)


def dropout(x: Tensor, rate: float, rng: "RngStream") -> Tensor:
    """Inverted dropout with a mask drawn from `rng` at call time."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    x = _coerce(x)
    if rate == 0.0:
        return x
    keep = (rng.uniform(size=x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    data = x.data * keep * scale

    def backward(g):
        x._accumulate(g * keep * scale)

    return _result(data, (x,), backward)


# -- RNG streams -------------------------------------------------------


def _mix64(a: int, b: int) -> int:
    """SplitMix64 finalizer over a combination of two 64-bit ints."""
    z = (a + 0x9E3779B97F4A7C15 * (b + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class RngStream:
    """Deterministic, independently seeded random substream.

    The same ``(master_seed, stream_id)`` pair always reproduces the same
    draw sequence; distinct stream ids give statistically independent
    streams.  Use :meth:`substream` to derive children deterministically.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        seq = np.random.SeedSequence((self.master_seed, self.stream_id))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def substream(self, child_id: int) -> "RngStream":
        return RngStream(self.master_seed, _mix64(self.stream_id, child_id))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_p(self, probs: np.ndarray) -> int:
        """Sample an index according to the (unnormalized) weight vector."""
        cum = np.cumsum(probs)
        if cum[-1] <= 0:
            raise ContractError("choice_p: weights must have positive total mass")
        r = self._gen.random() * cum[-1]
        return int(np.searchsorted(cum, r, side="right").clip(0, len(probs) - 1))


# -- gradient checking -------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at each coordinate is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|); the maximum over coordinates is returned.
    """
    base = np.asarray(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar Tensor")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        f_plus = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - eps
        f_minus = f(Tensor(bumped.reshape(base.shape))).item()
        nflat[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# -- serialization -----------------------------------------------------

_HEADER = struct.Struct("<Q")


def write_tensor(fh, arr: np.ndarray) -> None:
    """Write one array: rank, axis lengths, element width (u64 LE each), then
    little-endian IEEE-754 payload."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    fh.write(_HEADER.pack(arr.ndim))
    for dim in arr.shape:
        fh.write(_HEADER.pack(dim))
    fh.write(_HEADER.pack(arr.dtype.itemsize))
    fh.write(arr.astype(f"<f{arr.dtype.itemsize}", copy=False).tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    rank = _HEADER.unpack(fh.read(8))[0]
    shape = tuple(_HEADER.unpack(fh.read(8))[0] for _ in range(rank))
    width = _HEADER.unpack(fh.read(8))[0]
    if width not in (4, 8):
        raise ContractError(f"read_tensor: unsupported element width {width}")
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * width)
    arr = np.frombuffer(raw, dtype=f"<f{width}", count=count)
    return arr.reshape(shape).astype(np.float64 if width == 8 else np.float32)
