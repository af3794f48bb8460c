"""Transformer-decoder attractors, speaker counting and FiLM conditioning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import FeedForward, LayerNorm, Linear, MultiHeadAttention, causal_mask
from .frontend import ChunkTensor
from .numerics import Module, Parameter, Tensor, bce_with_logits
from .numerics.tensor import _sigmoid


@dataclass
class AttractorSet:
    attractors: Tensor        # (C+1, D); row C estimates non-existence
    existence_logits: Tensor  # (C+1,)

    @property
    def existence_probs(self) -> np.ndarray:
        return _sigmoid(np.asarray(self.existence_logits.data, dtype=np.float64))

    @property
    def n_speakers(self) -> int:
        return self.attractors.shape[0] - 1


class TdaDecoderLayer(Module):
    """Masked self-attention (absent in the first layer), cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, expansion: int, rng: np.random.Generator,
                 self_attention: bool = True):
        self.self_attn = MultiHeadAttention(dim, heads, rng) if self_attention else None
        self.norm_self = LayerNorm(dim) if self_attention else None
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_cross = LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion, rng)
        self.norm_ffn = LayerNorm(dim)

    def __call__(self, q: Tensor, context: Tensor) -> Tensor:
        if self.self_attn is not None:
            q = self.norm_self(q + self.self_attn(q, mask=causal_mask(q.shape[0])))
        q = self.norm_cross(q + self.cross_attn(q, context=context))
        return self.norm_ffn(q + self.ffn(q))


class TDA(Module):
    """Turns learned speaker queries into attractors by attending over the mixture context."""

    def __init__(self, dim: int, heads: int, expansion: int, layers: int, max_speakers: int,
                 rng: np.random.Generator):
        if layers < 1:
            raise ValueError("TDA needs at least one decoder layer")
        self.max_speakers = max_speakers
        self.queries = Parameter(rng.normal(0.0, 0.02, (max_speakers + 1, dim)))
        self.layers = [TdaDecoderLayer(dim, heads, expansion, rng, self_attention=i > 0)
                       for i in range(layers)]
        self.existence = Linear(dim, 1, rng)

    def __call__(self, context: Tensor, n_speakers: int) -> AttractorSet:
        """``context`` is (T', D); uses the first ``n_speakers + 1`` query rows."""
        if not 1 <= n_speakers <= self.max_speakers:
            raise ValueError(f"speaker count {n_speakers} outside [1, {self.max_speakers}]")
        a = self.queries[:n_speakers + 1]
        for layer in self.layers:
            a = layer(a, context)
        logits = self.existence(a).reshape(n_speakers + 1)
        return AttractorSet(a, logits)


def tda_forward(context: Tensor, tda: TDA, n_speakers: int) -> AttractorSet:
    return tda(context, n_speakers)


def count_speakers(probs, max_speakers: int | None = None) -> int:
    """Length of the leading run of probabilities above 0.5, capped at ``max_speakers``."""
    probs = np.asarray(probs)
    cap = len(probs) - 1 if max_speakers is None else max_speakers
    n = 0
    for p in probs:
        if p <= 0.5 or n >= cap:
            break
        n += 1
    return n


def attractor_existence_loss(logits: Tensor) -> Tensor:
    """Mean BCE against the target [1, ..., 1, 0]."""
    target = np.ones(logits.shape[0])
    target[-1] = 0.0
    return bce_with_logits(logits, target)


class FiLM(Module):
    """Per-speaker feature-wise scale and shift, both projected from the attractor."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.scale = Linear(dim, dim, rng)
        self.shift = Linear(dim, dim, rng)
        self.scale.bias.data[:] = 1.0

    def __call__(self, u: ChunkTensor | Tensor, attractors: Tensor) -> Tensor:
        """(K, S, D) features and (C, D) attractors -> (C, K, S, D)."""
        feats = u.chunks if isinstance(u, ChunkTensor) else u
        C, D = attractors.shape
        gamma = self.scale(attractors).reshape(C, 1, 1, D)
        beta = self.shift(attractors).reshape(C, 1, 1, D)
        return gamma * feats.reshape(1, *feats.shape) + beta


def film_condition(u, attractors: Tensor, film: FiLM) -> Tensor:
    return film(u, attractors)
