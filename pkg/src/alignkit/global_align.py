"""Stage-1 global alignment: projected-CLS similarities, temperature softmax,
teacher soft labels, and the KL distillation losses.

Five aligned directions are supervised: image-to-text and its transpose,
view1-to-view2 and its transpose, and text-to-text.  Student probabilities
come from learned projection heads (one per stream pair); soft labels come
from frozen teacher embeddings pushed through the same temperature softmax,
with a flexibility bump on the diagonal followed by row renormalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import ContractError, ParameterError, RngStream, Tensor


def _matrix(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class SimilarityBlock:
    """Cosine similarity matrices for one batch plus their temperatures."""

    S_i2t: Tensor
    S_i1i2: Tensor
    S_t2t: Tensor
    tau1: float
    tau2: float
    tau3: float

    def validate(self) -> None:
        for name in ("tau1", "tau2", "tau3"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("S_i2t", "S_i1i2", "S_t2t"):
            s = _matrix(getattr(self, name))
            if np.max(np.abs(s)) > 1.0 + 1e-9:
                raise ContractError(f"{name} has entries outside [-1, 1]")


@dataclass
class SoftLabelBlock:
    """Row-stochastic soft-label matrices for the five aligned directions."""

    H_i2t: np.ndarray
    H_t2i: np.ndarray
    H_i1i2: np.ndarray
    H_i2i1: np.ndarray
    H_t2t: np.ndarray
    lambda_: float

    def matrices(self) -> dict[str, np.ndarray]:
        return {"i2t": self.H_i2t, "t2i": self.H_t2i, "i1i2": self.H_i1i2,
                "i2i1": self.H_i2i1, "t2t": self.H_t2t}

    def validate(self) -> None:
        if self.lambda_ < 0:
            raise ParameterError("lambda must be nonnegative")
        for name, h in self.matrices().items():
            if np.any(h < 0):
                raise ContractError(f"H_{name} has negative entries")
            if np.max(np.abs(h.sum(axis=1) - 1.0)) > 1e-9:
                raise ContractError(f"H_{name} rows do not sum to 1")


def alignment_probs(S, tau: float) -> Tensor:
    """Row-softmax matching probabilities at temperature `tau` (transpose the
    similarity matrix first for the reverse direction)."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    S = S if isinstance(S, Tensor) else Tensor(S)
    return T.softmax_rows(T.mul(S, 1.0 / tau))


def soft_labels(Q, lambda_: float) -> np.ndarray:
    """Bump the diagonal of a teacher probability matrix by `lambda_` and
    renormalize rows to sum to 1."""
    if lambda_ < 0:
        raise ParameterError(f"lambda must be nonnegative, got {lambda_}")
    q = _matrix(Q)
    h = q + lambda_ * np.eye(q.shape[0])
    return h / h.sum(axis=1, keepdims=True)


def kl_row_loss(H, P: Tensor) -> Tensor:
    """Mean over rows of KL(H_row || P_row); H is detached supervision.

    0 * ln(0 / x) is treated as 0.  Gradients flow through P only.
    """
    h = _matrix(H)
    p = P if isinstance(P, Tensor) else Tensor(P)
    if h.shape != p.shape:
        raise T.ShapeError(f"kl_row_loss: H shape {h.shape} != P shape {p.shape}")
    for name, m in (("H", h), ("P", p.data)):
        if np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-6:
            raise ContractError(f"kl_row_loss: {name} rows must sum to 1")
    n = h.shape[0]
    entropy = float(np.sum(np.where(h > 0, h * np.log(np.where(h > 0, h, 1.0)), 0.0)))
    cross = T.tsum(T.mul(Tensor(h), T.log(p)))
    return T.add(T.mul(cross, -1.0 / n), entropy / n)


class GlobalAligner(Module):
    """Projection heads plus the composed global-alignment loss.

    One linear-then-normalize head per stream pair: `i2t` serves both
    image-to-text directions, `i1i2` both view orders, `t2t` itself.
    """

    HEAD_IDS = ("i2t", "i1i2", "t2t")

    def __init__(self, dim: int, proj_dim: int, rng: RngStream,
                 tau1: float = 0.07, tau2: float = 0.07, tau3: float = 0.07):
        if min(tau1, tau2, tau3) <= 0:
            raise ParameterError("temperatures must be positive")
        self.tau1, self.tau2, self.tau3 = tau1, tau2, tau3
        self.head_i2t = Linear(dim, proj_dim, rng.substream(0), bias=False)
        self.head_i1i2 = Linear(dim, proj_dim, rng.substream(1), bias=False)
        self.head_t2t = Linear(dim, proj_dim, rng.substream(2), bias=False)

    def _head(self, head_id: str) -> Linear:
        if head_id not in self.HEAD_IDS:
            raise ParameterError(f"unknown head id {head_id!r}")
        return getattr(self, f"head_{head_id}")

    def project(self, X: Tensor, head_id: str) -> Tensor:
        return T.l2_normalize_rows(self._head(head_id)(X))

    def similarity_matrix(self, A: Tensor, B: Tensor, head_id: str) -> Tensor:
        """Pairwise cosine similarities between projected rows of A and B."""
        if A.shape[0] == 0 or B.shape[0] == 0:
            raise ContractError("similarity_matrix: empty batch")
        return T.matmul(self.project(A, head_id), T.transpose(self.project(B, head_id)))

    def similarity_block(self, v_sel: Tensor, v1: Tensor, v2: Tensor, r: Tensor) -> SimilarityBlock:
        return SimilarityBlock(
            S_i2t=self.similarity_matrix(v_sel, r, "i2t"),
            S_i1i2=self.similarity_matrix(v1, v2, "i1i2"),
            S_t2t=self.similarity_matrix(r, r, "t2t"),
            tau1=self.tau1, tau2=self.tau2, tau3=self.tau3)

    def alignment_prob_matrices(self, block: SimilarityBlock) -> dict[str, Tensor]:
        """The five directional matching-probability matrices."""
        return {
            "i2t": alignment_probs(block.S_i2t, block.tau1),
            "t2i": alignment_probs(T.transpose(block.S_i2t), block.tau1),
            "i1i2": alignment_probs(block.S_i1i2, block.tau2),
            "i2i1": alignment_probs(T.transpose(block.S_i1i2), block.tau2),
            "t2t": alignment_probs(block.S_t2t, block.tau3),
        }

    def global_loss(self, v_sel: Tensor, v1: Tensor, v2: Tensor, r: Tensor,
                    soft: SoftLabelBlock, use_intra_views: bool = True,
                    use_intra_text: bool = True) -> Tensor:
        """Inter loss (both image-text directions, halved) plus intra loss
        (both view orders halved, text-text at full weight)."""
        probs = self.alignment_prob_matrices(self.similarity_block(v_sel, v1, v2, r))
        labels = soft.matrices()
        inter = T.mul(T.add(kl_row_loss(labels["i2t"], probs["i2t"]),
                            kl_row_loss(labels["t2i"], probs["t2i"])), 0.5)
        total = inter
        if use_intra_views:
            views = T.mul(T.add(kl_row_loss(labels["i1i2"], probs["i1i2"]),
                                kl_row_loss(labels["i2i1"], probs["i2i1"])), 0.5)
            total = T.add(total, views)
        if use_intra_text:
            total = T.add(total, kl_row_loss(labels["t2t"], probs["t2t"]))
        return total


def build_soft_labels(v1_T: np.ndarray, v2_T: np.ndarray, r_T: np.ndarray,
                      view_sel: np.ndarray, tau1: float, tau2: float, tau3: float,
                      lambda_: float, one_hot: bool = False) -> SoftLabelBlock:
    """Soft labels from unit-norm teacher embeddings.

    `view_sel` picks the per-sample image view feeding the image-text
    direction (matching the student's selection).  `one_hot=True` replaces
    every matrix with the identity-row distribution (baseline mode).
    """
    n = v1_T.shape[0]
    if one_hot:
        eye = np.eye(n)
        return SoftLabelBlock(eye, eye.copy(), eye.copy(), eye.copy(), eye.copy(), lambda_)
    v_sel = np.where(view_sel[:, None] == 0, v1_T, v2_T)
    s_i2t = v_sel @ r_T.T
    s_i1i2 = v1_T @ v2_T.T
    s_t2t = r_T @ r_T.T

    def q(s, tau):
        return alignment_probs(Tensor(s), tau).data

    return SoftLabelBlock(
        H_i2t=soft_labels(q(s_i2t, tau1), lambda_),
        H_t2i=soft_labels(q(s_i2t.T, tau1), lambda_),
        H_i1i2=soft_labels(q(s_i1i2, tau2), lambda_),
        H_i2i1=soft_labels(q(s_i1i2.T, tau2), lambda_),
        H_t2t=soft_labels(q(s_t2t, tau3), lambda_),
        lambda_=lambda_)
