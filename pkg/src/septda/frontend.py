"""Waveform I/O, convolutional encoder/decoder, chunking and overlap-add."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Module, Parameter, Tensor, as_tensor, fold, gelu, pad_tail, unfold

DEFAULT_SAMPLE_RATE = 8000


class WavFormatError(ValueError):
    pass


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if len(self.samples) < 1:
            raise ValueError("audio signal is empty")
        if self.sample_rate <= 0:
            raise ValueError(f"invalid sample rate {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)


def read_wav(path) -> AudioSignal:
    """Read a 16-bit PCM mono WAV file into samples in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            if f.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV ({f.getcompname()}) is not supported")
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a readable RIFF/WAVE PCM file ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    if n == 0:
        raise WavFormatError(f"{path}: data chunk is empty")
    if len(raw) != n * 2:
        raise WavFormatError(f"{path}: truncated data chunk ({len(raw)} of {n * 2} bytes)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.round(np.clip(signal.samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(signal.sample_rate))
        f.writeframes(pcm.tobytes())


def num_frames(n_samples: int, kernel: int) -> int:
    return math.ceil(2 * n_samples / kernel)


class Encoder(Module):
    """Strided 1-D convolution (kernel L, stride L/2) followed by GELU."""

    def __init__(self, kernel: int, channels: int, rng: np.random.Generator):
        if kernel % 2:
            raise ValueError(f"kernel size must be even, got {kernel}")
        self.kernel = kernel
        bound = 1.0 / math.sqrt(kernel)
        self.weight = Parameter(rng.uniform(-bound, bound, (kernel, channels)))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x, self.weight.dtype)
        if x.ndim != 1 or x.shape[0] == 0:
            raise ValueError(f"encoder expects a non-empty 1-D signal, got shape {x.shape}")
        T, L = x.shape[0], self.kernel
        hop = L // 2
        n = num_frames(T, L)
        padded = pad_tail(x, hop * (n - 1) + L - T).reshape(-1, 1)
        frames = unfold(padded, L, hop, n).reshape(L, n).transpose()   # (T', L)
        return gelu(frames @ self.weight + self.bias)


class Decoder(Module):
    """Transposed counterpart of ``Encoder``: one output channel, trimmed to T samples."""

    def __init__(self, kernel: int, channels: int, rng: np.random.Generator):
        self.kernel = kernel
        self.channels = channels
        bound = 1.0 / math.sqrt(channels)
        self.weight = Parameter(rng.uniform(-bound, bound, (channels, kernel)))
        self.bias = Parameter(np.zeros(1))

    def __call__(self, z: Tensor, length: int) -> Tensor:
        """Map (..., T', D_e) latents to (..., length) waveforms."""
        if z.shape[-1] != self.channels:
            raise ValueError(f"decoder expects {self.channels} channels, got {z.shape[-1]}")
        L = self.kernel
        hop = L // 2
        n = z.shape[-2]
        lead = z.shape[:-2]
        frames = (z @ self.weight).swapaxes(-1, -2).reshape(*lead, L, n, 1)
        total = hop * (n - 1) + L
        wave_ = fold(frames, hop, total).reshape(*lead, total)
        if total >= length:
            wave_ = wave_[..., :length]
        else:
            wave_ = pad_tail(wave_, length - total, axis=-1)
        return wave_ + self.bias


@dataclass
class ChunkTensor:
    """Chunks of shape (..., K, S, D) plus the frame count they came from."""

    chunks: Tensor
    original_length: int

    @property
    def chunk_size(self) -> int:
        return self.chunks.shape[-3]

    @property
    def num_chunks(self) -> int:
        return self.chunks.shape[-2]

    @property
    def hop(self) -> int:
        return chunk_hop(self.chunk_size)


def chunk_hop(chunk_size: int) -> int:
    return math.ceil(chunk_size / 2)


def num_chunks(n_frames: int, chunk_size: int) -> int:
    """Smallest S with hop*(S-1) + K >= T'."""
    hop = chunk_hop(chunk_size)
    return max(1, math.ceil((n_frames - chunk_size) / hop) + 1)


def segment(frames: Tensor, chunk_size: int) -> ChunkTensor:
    """Split (..., T', D) frames into 50%-overlapping chunks (..., K, S, D)."""
    if chunk_size < 2:
        raise ValueError(f"chunk size must be >= 2, got {chunk_size}")
    n = frames.shape[-2]
    if n == 0:
        raise ValueError("cannot segment zero frames")
    hop = chunk_hop(chunk_size)
    s = num_chunks(n, chunk_size)
    padded = pad_tail(frames, hop * (s - 1) + chunk_size - n, axis=-2)
    return ChunkTensor(unfold(padded, chunk_size, hop, s), n)


def overlap_add(chunks: ChunkTensor) -> Tensor:
    """Inverse of ``segment``: sum chunks in place and divide by the overlap count."""
    K, S, n = chunks.chunk_size, chunks.num_chunks, chunks.original_length
    hop = chunk_hop(K)
    if n < 1 or S != num_chunks(n, K):
        raise ValueError(f"chunk geometry K={K}, S={S} does not match {n} frames")
    total = hop * (S - 1) + K
    summed = fold(chunks.chunks, hop, total)[..., :n, :]
    return summed * (1.0 / overlap_counts(n, K)).astype(summed.dtype)[:, None]


def overlap_counts(n_frames: int, chunk_size: int) -> np.ndarray:
    hop = chunk_hop(chunk_size)
    s = num_chunks(n_frames, chunk_size)
    counts = np.zeros(hop * (s - 1) + chunk_size)
    for i in range(s):
        counts[i * hop:i * hop + chunk_size] += 1
    return counts[:n_frames]
