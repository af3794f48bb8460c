"""LSTM-attention blocks and their dual-path / triple-path compositions."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .frontend import ChunkTensor
from .numerics import Module, Parameter, Tensor, bilstm, gelu, layer_norm, softmax


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    """D -> e*D -> GELU -> D."""

    def __init__(self, dim: int, expansion: int, rng: np.random.Generator):
        self.up = Linear(dim, expansion * dim, rng)
        self.down = Linear(expansion * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


def relative_position_bucket(rel, num_buckets: int = 32, max_distance: int = 128):
    """Bidirectional T5 bucketing of ``rel = key_pos - query_pos``.

    Half the buckets serve positive offsets.  Within each half, offsets below
    a quarter of ``num_buckets`` get their own bucket and larger ones share
    logarithmically wider buckets, saturating at ``max_distance``.
    """
    rel = np.asarray(rel, dtype=np.int64)
    half = num_buckets // 2
    bucket = np.where(rel > 0, half, 0)
    dist = np.abs(rel)
    max_exact = half // 2
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(dist, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, half - 1)
    bucket = bucket + np.where(dist < max_exact, dist, large)
    return bucket if bucket.ndim else int(bucket)


@lru_cache(maxsize=64)
def _bucket_grid(seq_len: int, num_buckets: int, max_distance: int) -> np.ndarray:
    pos = np.arange(seq_len)
    return relative_position_bucket(pos[None, :] - pos[:, None], num_buckets, max_distance)


class RelativePositionBias(Module):
    """Learned per-head scalar bias indexed by T5 relative-position bucket."""

    def __init__(self, heads: int, num_buckets: int = 32, max_distance: int = 128):
        if num_buckets < 3:
            raise ValueError("need at least 3 buckets")
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.table = Parameter(np.zeros((num_buckets, heads)))

    def __call__(self, seq_len: int) -> Tensor:
        """Bias of shape (heads, seq_len, seq_len)."""
        grid = _bucket_grid(seq_len, self.num_buckets, self.max_distance)
        return self.table[grid].transpose(2, 0, 1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over axis -2 with optional additive bias/mask."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).swapaxes(-2, -3)

    def weights(self, x: Tensor, context: Tensor | None = None, bias: Tensor | None = None,
                mask: np.ndarray | None = None) -> Tensor:
        context = x if context is None else context
        q, k = self._split(self.q(x)), self._split(self.k(context))
        logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != logits.shape[-2:]:
                raise ValueError(f"mask shape {mask.shape} != attention shape {logits.shape[-2:]}")
            logits = logits + mask.astype(logits.dtype)
        return softmax(logits, axis=-1)

    def __call__(self, x: Tensor, context: Tensor | None = None, bias: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        attn = self.weights(x, ctx, bias, mask)
        out = attn @ self._split(self.v(ctx))
        *lead, h, n, dh = out.shape
        return self.o(out.swapaxes(-2, -3).reshape(*lead, n, h * dh))


def causal_mask(n: int) -> np.ndarray:
    """Additive mask blocking attention from position i to any j > i."""
    return np.triu(np.full((n, n), -np.inf), k=1)


class LstmModule(Module):
    """LayerNorm -> BLSTM (H per direction) -> Linear 2H -> D."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.w_ih = Parameter(_uniform(rng, hidden, (2, 4 * hidden, dim)))
        self.w_hh = Parameter(_uniform(rng, hidden, (2, 4 * hidden, hidden)))
        b = np.zeros((2, 4 * hidden))
        b[:, hidden:2 * hidden] = 1.0                     # forget gate
        self.b = Parameter(b)
        self.proj = Linear(2 * hidden, dim, rng)

    def recurrent(self, x: Tensor) -> Tensor:
        """Normalized input through the BLSTM, before projection: (B, T, 2H)."""
        return bilstm(self.norm(x), self.w_ih, self.w_hh, self.b)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(self.recurrent(x))


class LstmAttentionBlock(Module):
    """LSTM, self-attention and feed-forward modules, each followed by residual + LN.

    Operates on (B, seq, D) batches of independent sequences.
    """

    def __init__(self, dim: int, hidden: int, heads: int, expansion: int, rng: np.random.Generator,
                 num_buckets: int = 32, max_distance: int = 128,
                 use_lstm: bool = True, use_attention: bool = True):
        self.lstm = LstmModule(dim, hidden, rng) if use_lstm else None
        self.norm_lstm = LayerNorm(dim) if use_lstm else None
        self.attn = MultiHeadAttention(dim, heads, rng) if use_attention else None
        self.rel_bias = RelativePositionBias(heads, num_buckets, max_distance) if use_attention else None
        self.norm_attn = LayerNorm(dim) if use_attention else None
        self.ffn = FeedForward(dim, expansion, rng)
        self.norm_ffn = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        if self.lstm is not None:
            x = self.norm_lstm(x + self.lstm(x))
        if self.attn is not None:
            x = self.norm_attn(x + self.attn(x, bias=self.rel_bias(x.shape[-2])))
        return self.norm_ffn(x + self.ffn(x))


def _along_first(block, x: Tensor) -> Tensor:
    """Apply ``block`` to sequences along axis -3 of (..., A, B, D), batched over the rest."""
    *lead, a, b, d = x.shape
    y = x.swapaxes(-2, -3).reshape(-1, a, d)
    return block(y).reshape(*lead, b, a, d).swapaxes(-2, -3)


def _along_second(block, x: Tensor) -> Tensor:
    """Apply ``block`` to sequences along axis -2 of (..., A, B, D), batched over the rest."""
    *lead, a, b, d = x.shape
    return block(x.reshape(-1, b, d)).reshape(*lead, a, b, d)


class DualPathBlock(Module):
    """Intra-chunk along K, inter-chunk along S, outer residual + LN."""

    def __init__(self, dim: int, hidden: int, heads: int, expansion: int, rng: np.random.Generator,
                 num_buckets: int = 32, max_distance: int = 128,
                 use_lstm: bool = True, use_attention: bool = True):
        kw = dict(num_buckets=num_buckets, max_distance=max_distance,
                  use_lstm=use_lstm, use_attention=use_attention)
        self.intra = LstmAttentionBlock(dim, hidden, heads, expansion, rng, **kw)
        self.inter = LstmAttentionBlock(dim, hidden, heads, expansion, rng, **kw)
        self.norm = LayerNorm(dim)

    def intra_pass(self, u: Tensor) -> Tensor:
        return _along_first(self.intra, u)

    def __call__(self, u: ChunkTensor | Tensor):
        chunks = u.chunks if isinstance(u, ChunkTensor) else u
        u1 = self.intra_pass(chunks)
        u2 = self.norm(_along_second(self.inter, u1) + chunks)
        return ChunkTensor(u2, u.original_length) if isinstance(u, ChunkTensor) else u2


class InterSpeakerLayer(Module):
    """Transformer layer across speakers; carries no positional information."""

    def __init__(self, dim: int, heads: int, expansion: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm_attn = LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion, rng)
        self.norm_ffn = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm_attn(x + self.attn(x))
        return self.norm_ffn(x + self.ffn(x))


class TriplePathBlock(Module):
    """Dual-path processing per speaker plus an inter-speaker layer; input (C, K, S, D)."""

    def __init__(self, dim: int, hidden: int, heads: int, expansion: int, rng: np.random.Generator,
                 num_buckets: int = 32, max_distance: int = 128,
                 use_lstm: bool = True, use_attention: bool = True):
        kw = dict(num_buckets=num_buckets, max_distance=max_distance,
                  use_lstm=use_lstm, use_attention=use_attention)
        self.intra = LstmAttentionBlock(dim, hidden, heads, expansion, rng, **kw)
        self.inter = LstmAttentionBlock(dim, hidden, heads, expansion, rng, **kw)
        self.speaker = InterSpeakerLayer(dim, heads, expansion, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, v: Tensor) -> Tensor:
        C, K, S, D = v.shape
        v1 = _along_first(self.intra, v)
        v2 = _along_second(self.inter, v1)
        per_pos = v2.transpose(1, 2, 0, 3).reshape(K * S, C, D)
        v3 = self.speaker(per_pos).reshape(K, S, C, D).transpose(2, 0, 1, 3)
        return self.norm(v3 + v)
