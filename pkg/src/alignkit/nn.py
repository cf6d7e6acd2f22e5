"""Parameter containers, basic layers, and the AdamW optimizer.

Everything here is plain composition over :mod:`alignkit.tensor`; modules
track their parameters by attribute name so checkpoints can address them as
dotted paths.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import RngStream, Tensor


class Module:
    """Base class tracking parameters and submodules by attribute name."""

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, param in self.__dict__.get("_params", {}).items():
            yield prefix + name, param
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise T.ContractError(f"state dict mismatch: missing={missing} extra={extra}")
        for name, param in own.items():
            arr = np.asarray(state[name], dtype=param.dtype)
            if arr.shape != param.shape:
                raise T.ShapeError(f"parameter {name}: shape {arr.shape} != {param.shape}")
            param.data = arr.copy()


class ModuleList(Module):
    def __init__(self, modules):
        self.items = list(modules)
        for i, m in enumerate(self.items):
            setattr(self, f"item{i}", m)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __len__(self):
        return len(self.items)


class Linear(Module):
    """Affine map over row vectors: y = x W + b.

    `zero_init=True` makes the layer the zero map (used for residual output
    projections that must be exact identities at initialization).
    """

    def __init__(self, in_dim: int, out_dim: int, rng: RngStream | None = None,
                 bias: bool = True, zero_init: bool = False, scale: float | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            if rng is None:
                raise T.ContractError("Linear: rng required unless zero_init")
            w = rng.normal(size=(in_dim, out_dim),
                           scale=scale if scale is not None else 1.0 / np.sqrt(in_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_dim)), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise T.ShapeError(f"Linear: input width {x.shape[-1]} != {self.in_dim}")
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones((1, dim)), requires_grad=True)
        self.shift = Tensor(np.zeros((1, dim)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.tmean(x, axis=1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.tmean(T.mul(centered, centered), axis=1, keepdims=True)
        normed = T.div(centered, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(normed, self.gain), self.shift)


class FeedForward(Module):
    """Pre-norm residual MLP block: x + W2 tanh(W1 LN(x)).

    The output projection is zero-initialized so the block is the identity
    at construction.
    """

    def __init__(self, dim: int, hidden: int, rng: RngStream):
        self.norm = LayerNorm(dim)
        self.up = Linear(dim, hidden, rng.substream(1))
        self.down = Linear(hidden, dim, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.down(T.tanh(self.up(self.norm(x)))))


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"cross_entropy: {labels.shape} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise T.ContractError(f"cross_entropy: label outside [0, {k})")
    onehot = np.eye(k)[labels]
    picked = T.tsum(T.mul(T.log_softmax_rows(logits), Tensor(onehot)))
    return T.mul(picked, -1.0 / n)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
