"""Toy visual/textual token encoders and the frozen teacher oracle.

Both student encoders are token-wise two-layer MLPs; the encoded sequence
gets a leading CLS row computed as a learned embedding plus the mean of the
token rows, so the summary tracks content while staying permutation
invariant over tokens.  The teacher is a fixed linear map of each sample's
generative latent and never receives gradients.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ConfigError
from .nn import Linear, Module
from .tensor import RngStream, Tensor


@dataclass
class EncodedSample:
    """Per-sample token matrices with leading CLS rows plus generator metadata.

    `latent` and `cluster_id` describe how the sample was generated; they
    feed the teacher oracle only and never carry gradients.
    """

    V1: Tensor  # (p+1) x d, row 0 = CLS
    V2: Tensor  # (p+1) x d
    R: Tensor   # (t+1) x d
    latent: np.ndarray = field(repr=False)
    cluster_id: int = 0


class TokenEncoder(Module):
    """Token-wise 2-layer MLP with a learned CLS summary row."""

    def __init__(self, feature_width: int, dim: int, hidden: int,
                 rng: RngStream, dropout_rate: float = 0.0):
        self.feature_width = feature_width
        self.dim = dim
        self.dropout_rate = dropout_rate
        self.fc1 = Linear(feature_width, hidden, rng.substream(0))
        self.fc2 = Linear(hidden, dim, rng.substream(1))
        self.cls = Tensor(rng.substream(2).normal(size=(1, dim), scale=0.1),
                          requires_grad=True)

    def __call__(self, raw: Tensor, dropout_rng: RngStream | None = None) -> Tensor:
        """Encode a tokens-by-features matrix into (tokens+1) x dim with CLS row 0.

        Dropout is active only when `dropout_rng` is supplied and the
        configured rate is positive; two dropout-active passes over the same
        input then differ.
        """
        raw = raw if isinstance(raw, Tensor) else Tensor(raw)
        if raw.ndim != 2 or raw.shape[1] != self.feature_width:
            raise ConfigError(
                f"encoder expects feature width {self.feature_width}, got shape {raw.shape}")
        hidden = T.tanh(self.fc1(raw))
        if dropout_rng is not None and self.dropout_rate > 0.0:
            hidden = T.dropout(hidden, self.dropout_rate, dropout_rng)
        tokens = self.fc2(hidden)
        cls_row = T.add(self.cls, T.tmean(tokens, axis=0, keepdims=True))
        return T.concat([cls_row, tokens], axis=0)


class TeacherOracle:
    """Frozen linear teacher emitting unit-norm global embeddings.

    Plays the role of a pre-trained scorer: embeddings are a fixed map of
    the true generative latent, so cluster-mates score high.  Per-view
    offsets keep the two image streams from being identical so both
    view-order alignment directions are informative.
    """

    def __init__(self, latent_dim: int, teacher_dim: int, seed: int = 0,
                 view_offset_scale: float = 0.15):
        rng = RngStream(seed, 901)
        self.latent_dim = latent_dim
        self.teacher_dim = teacher_dim
        self.W_img = rng.substream(0).normal(size=(latent_dim, teacher_dim))
        self.W_txt = rng.substream(1).normal(size=(latent_dim, teacher_dim))
        self.view_offsets = (
            rng.substream(2).normal(size=teacher_dim, scale=view_offset_scale),
            rng.substream(3).normal(size=teacher_dim, scale=view_offset_scale),
        )
        for arr in (self.W_img, self.W_txt, *self.view_offsets):
            arr.setflags(write=False)

    @staticmethod
    def _unit_rows(x: np.ndarray) -> np.ndarray:
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def embed_latents(self, latents: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map an (N, k) latent block to three unit-row (N, d_T) embeddings."""
        latents = np.atleast_2d(latents)
        img = latents @ self.W_img
        v1 = self._unit_rows(img + self.view_offsets[0])
        v2 = self._unit_rows(img + self.view_offsets[1])
        r = self._unit_rows(latents @ self.W_txt)
        return v1, v2, r

    def embed(self, sample: EncodedSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v1, v2, r = self.embed_latents(sample.latent.reshape(1, -1))
        return v1[0], v2[0], r[0]

    def checksum(self) -> str:
        """Digest of all parameters; constant across training (freeze contract)."""
        h = hashlib.sha256()
        for arr in (self.W_img, self.W_txt, *self.view_offsets):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()
