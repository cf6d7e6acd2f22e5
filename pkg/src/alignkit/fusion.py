"""Co-attention over the two token streams, gated knowledge fusion, and the
answer decoder with candidate-ranking inference.

All attention blocks are pre-layer-norm residual blocks whose output
projections start at zero, so every block is an exact identity map at
initialization.  The gated fusion mixes the knowledge-fused representation
with the original one through a learned sigmoid gate, guaranteeing an
elementwise convex combination.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module, ModuleList, cross_entropy_logits
from .tensor import ContractError, ParameterError, RngStream, Tensor


class VocabError(ValueError):
    """A token or answer id falls outside the configured vocabulary."""


_MASK_VALUE = -1e9  # additive mask; large negative keeps softmax finite


@dataclass
class CoAttentionConfig:
    layers: int = 2
    heads: int = 4
    d: int = 32
    ffn_width: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 1:
            raise ParameterError("co-attention needs at least one layer")
        if self.d % self.heads != 0:
            raise ParameterError(f"width {self.d} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")


class MultiHeadAttention(Module):
    """Pre-norm multi-head scaled-dot-product attention block.

    Returns the block output (not residual-added); the output projection is
    zero-initialized so the block is the zero map at construction.  The
    attention weights of the last forward pass are kept on `last_weights`
    as a (heads, m, n) array.
    """

    def __init__(self, dim: int, heads: int, rng: RngStream):
        if dim % heads != 0:
            raise ParameterError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.proj_q = Linear(dim, dim, rng.substream(0))
        self.proj_k = Linear(dim, dim, rng.substream(1))
        self.proj_v = Linear(dim, dim, rng.substream(2))
        self.proj_out = Linear(dim, dim, zero_init=True)
        self.last_weights: np.ndarray | None = None

    def __call__(self, query_tokens: Tensor, kv_tokens: Tensor,
                 causal: bool = False) -> Tensor:
        if query_tokens.shape[1] != self.dim or kv_tokens.shape[1] != self.dim:
            raise T.ShapeError(
                f"attention width mismatch: {query_tokens.shape} / {kv_tokens.shape} vs d={self.dim}")
        m, n = query_tokens.shape[0], kv_tokens.shape[0]
        q = self.proj_q(self.norm_q(query_tokens))
        normed_kv = self.norm_kv(kv_tokens)
        k = self.proj_k(normed_kv)
        v = self.proj_v(normed_kv)
        mask = None
        if causal:
            mask = np.triu(np.full((m, n), _MASK_VALUE), k=1)
        outs = []
        weights = []
        scale = 1.0 / np.sqrt(self.head_dim)
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
            if mask is not None:
                scores = T.add(scores, Tensor(mask))
            attn = T.softmax_rows(scores)
            weights.append(attn.data)
            outs.append(T.matmul(attn, vh))
        self.last_weights = np.stack(weights)
        return self.proj_out(T.concat(outs, axis=1))


class CoAttentionLayer(Module):
    """One co-attention layer: per stream, self-attention, cross-attention to
    the other stream, then a feed-forward block, all residual."""

    def __init__(self, cfg: CoAttentionConfig, rng: RngStream):
        self.self_a = MultiHeadAttention(cfg.d, cfg.heads, rng.substream(0))
        self.self_b = MultiHeadAttention(cfg.d, cfg.heads, rng.substream(1))
        self.cross_a = MultiHeadAttention(cfg.d, cfg.heads, rng.substream(2))
        self.cross_b = MultiHeadAttention(cfg.d, cfg.heads, rng.substream(3))
        self.ffn_a = FeedForward(cfg.d, cfg.ffn_width, rng.substream(4))
        self.ffn_b = FeedForward(cfg.d, cfg.ffn_width, rng.substream(5))

    def __call__(self, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        a1 = T.add(a, self.self_a(a, a))
        b1 = T.add(b, self.self_b(b, b))
        # Cross inputs are the post-self tokens of the *other* stream, taken
        # symmetrically so neither stream sees the other's cross output.
        a2 = T.add(a1, self.cross_a(a1, b1))
        b2 = T.add(b1, self.cross_b(b1, a1))
        return self.ffn_a(a2), self.ffn_b(b2)


class CoAttention(Module):
    """Stacked co-attention producing mutually-aware token matrices."""

    def __init__(self, cfg: CoAttentionConfig, rng: RngStream):
        self.cfg = cfg
        self.layers = ModuleList(
            CoAttentionLayer(cfg, rng.substream(100 + i)) for i in range(cfg.layers))

    def __call__(self, V: Tensor, R: Tensor) -> tuple[Tensor, Tensor]:
        a, b = V, R
        for layer in self.layers:
            a, b = layer(a, b)
        return a, b


class KnowledgeEncoder(Module):
    """Self-attention plus feed-forward over the prior-knowledge embeddings."""

    def __init__(self, dim: int, heads: int, ffn_width: int, rng: RngStream):
        self.attn = MultiHeadAttention(dim, heads, rng.substream(0))
        self.ffn = FeedForward(dim, ffn_width, rng.substream(1))

    def __call__(self, vocab_embeddings: Tensor) -> Tensor:
        if vocab_embeddings.shape[0] == 0:
            raise ContractError("knowledge_encode: empty knowledge matrix")
        x = T.add(vocab_embeddings, self.attn(vocab_embeddings, vocab_embeddings))
        return self.ffn(x)


@dataclass
class GatedFusionState:
    """Intermediate and final products of one gated-fusion pass."""

    F_i: Tensor      # joint image-question tokens
    F_p: Tensor      # encoded prior knowledge
    F_pi: Tensor     # knowledge-fused tokens (cross-attention + residual)
    G: Tensor        # sigmoid gate, entries strictly in (0, 1)
    F_out: Tensor    # gated convex mix of F_pi and F_i
    F_prime: Tensor  # final tokens after the feed-forward sub-module


class GatedFusion(Module):
    """Fuse encoded knowledge into the joint representation and gate it.

    The gate output mixes the knowledge-fused tokens with the originals
    elementwise: out = G * F_pi + (1 - G) * F_i.  With `ablate_gate=True`
    the mix is skipped and the knowledge-fused tokens pass straight through
    (ablation arm).
    """

    def __init__(self, dim: int, heads: int, ffn_width: int, rng: RngStream):
        self.cross = MultiHeadAttention(dim, heads, rng.substream(0))
        self.gate_proj = Linear(dim, dim, rng.substream(1), scale=0.1)
        self.ffn = FeedForward(dim, ffn_width, rng.substream(2))

    def __call__(self, F_i: Tensor, F_p: Tensor, ablate_gate: bool = False) -> GatedFusionState:
        F_pi = T.add(self.cross(F_i, F_p), F_i)
        G = T.sigmoid(self.gate_proj(F_pi))
        if ablate_gate:
            F_out = F_pi
        else:
            F_out = T.add(T.mul(G, F_pi), T.mul(T.sub(1.0, G), F_i))
        return GatedFusionState(F_i=F_i, F_p=F_p, F_pi=F_pi, G=G,
                                F_out=F_out, F_prime=self.ffn(F_out))


class AnswerDecoder(Module):
    """Single-layer causal decoder cross-attending to the fused tokens.

    The output head starts at zero, so an untrained decoder scores every
    token uniformly.  Token id 0 is reserved for the begin-of-sequence
    marker.
    """

    BOS = 0

    def __init__(self, vocab_size: int, dim: int, heads: int, ffn_width: int,
                 max_len: int, rng: RngStream):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embed = Tensor(rng.substream(0).normal(size=(vocab_size, dim), scale=0.5),
                            requires_grad=True)
        self.pos = Tensor(rng.substream(1).normal(size=(max_len, dim), scale=0.1),
                          requires_grad=True)
        self.self_attn = MultiHeadAttention(dim, heads, rng.substream(2))
        self.cross_attn = MultiHeadAttention(dim, heads, rng.substream(3))
        self.ffn = FeedForward(dim, ffn_width, rng.substream(4))
        self.norm_out = LayerNorm(dim)
        self.head = Linear(dim, vocab_size, zero_init=True)

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError("decoder: token sequence must be 1-D and nonempty")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise VocabError(f"token id outside vocabulary of size {self.vocab_size}")
        if ids.size > self.max_len:
            raise ContractError(f"sequence length {ids.size} exceeds max_len {self.max_len}")
        return ids

    def logits(self, F_prime: Tensor, input_ids: np.ndarray) -> Tensor:
        ids = self._check_ids(input_ids)
        onehot = np.eye(self.vocab_size)[ids]
        x = T.add(T.matmul(Tensor(onehot), self.embed), T.slice_rows(self.pos, 0, ids.size))
        x = T.add(x, self.self_attn(x, x, causal=True))
        x = T.add(x, self.cross_attn(x, F_prime))
        x = self.ffn(x)
        return self.head(self.norm_out(x))

    def loss(self, F_prime: Tensor, answer_ids: Sequence[int]) -> Tensor:
        """Teacher-forced next-token cross-entropy, averaged over positions."""
        targets = self._check_ids(np.asarray(answer_ids))
        inputs = np.concatenate([[self.BOS], targets[:-1]])
        return cross_entropy_logits(self.logits(F_prime, inputs), targets)


def decoder_loss(decoder: AnswerDecoder, F_prime: Tensor, answer_ids) -> Tensor:
    return decoder.loss(F_prime, answer_ids)


def rank_answers(decoder: AnswerDecoder, F_prime: Tensor,
                 candidates: Sequence[Sequence[int]]) -> int:
    """Index of the candidate with the lowest language-modeling loss; ties
    break toward the lowest index."""
    if len(candidates) == 0:
        raise ContractError("rank_answers: empty candidate list")
    best_idx = 0
    best_loss = float("inf")
    for idx, cand in enumerate(candidates):
        loss = decoder.loss(F_prime, cand).item()
        if loss < best_loss:
            best_idx, best_loss = idx, loss
    return best_idx
