"""End-to-end SepTDA network, configuration and checkpoint files."""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import DualPathBlock, LayerNorm, Linear, TriplePathBlock
from .frontend import AudioSignal, ChunkTensor, Decoder, Encoder, overlap_add, segment
from .numerics import Module, OptimizerState, Tensor, as_tensor
from .tda import TDA, FiLM, count_speakers


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kernel: int = 16            # L; stride is L/2
    enc_dim: int = 256          # D_e
    dim: int = 128              # D
    chunk_size: int = 96        # K; hop ceil(K/2)
    tda_layers: int = 2         # M
    triple_blocks: int = 8      # N
    lstm_hidden: int = 256      # H per direction
    heads: int = 4
    ffn_expansion: int = 4
    max_speakers: int = 5
    sample_rate: int = 8000
    t5_buckets: int = 32
    t5_max_distance: int = 128
    # ablation switches; "dualpath" drops TDA and triple-path processing
    architecture: str = "septda"
    dual_blocks: int = 1
    use_lstm: bool = True
    use_attention: bool = True

    def __post_init__(self):
        problems = []
        if self.kernel < 2 or self.kernel % 2:
            problems.append(f"kernel must be even and >= 2 (got {self.kernel})")
        if self.dim % self.heads:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.chunk_size < 2:
            problems.append("chunk_size must be >= 2")
        for name in ("enc_dim", "dim", "tda_layers", "triple_blocks", "lstm_hidden", "heads",
                     "ffn_expansion", "max_speakers", "sample_rate", "dual_blocks"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.t5_buckets < 3:
            problems.append("t5_buckets must be >= 3")
        if self.architecture not in ("septda", "dualpath"):
            problems.append(f"unknown architecture {self.architecture!r}")
        if not (self.use_lstm or self.use_attention):
            problems.append("at least one of use_lstm/use_attention must be set")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def stride(self) -> int:
        return self.kernel // 2

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, strict: bool = True) -> "ModelConfig":
        return cls(**parse_key_values(text, cls, strict=strict))

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(), strict=False)

    def diff(self, other: "ModelConfig") -> list[str]:
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name) != getattr(other, f.name)]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_key_values(text: str, cls, strict: bool = True) -> dict:
    """Parse ``key=value`` lines into constructor kwargs for dataclass ``cls``.

    Unknown keys raise when ``strict``; otherwise they are ignored, so one file
    can carry both model and training settings.
    """
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            if strict:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            continue
        out[key] = _coerce(value, types[key], key)
    return out


def _coerce(value: str, type_name, key: str):
    t = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", str(type_name))
    try:
        if t == "bool":
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        if t.startswith("int | None"):
            return None if value.lower() == "none" else int(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {t}") from None
    return value


class NoSpeakersDetected(RuntimeError):
    def __init__(self, probs: np.ndarray):
        self.probs = np.asarray(probs)
        super().__init__("no speakers detected (existence probabilities: "
                         + ", ".join(f"{p:.4f}" for p in self.probs) + ")")


@dataclass
class SeparationResult:
    estimates: np.ndarray                 # (C_hat, T) final-scale waveforms
    probs: np.ndarray                     # existence probabilities
    n_speakers: int
    outputs: list[Tensor] = field(default_factory=list)   # per-scale (C, T) graph outputs
    existence_logits: Tensor | None = None

    @property
    def per_scale_estimates(self) -> list[np.ndarray]:
        return [o.data for o in self.outputs]


class OutputHead(Module):
    """Overlap-add -> LN -> Linear D -> n_out*D_e -> transposed-conv decoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, n_out: int = 1):
        self.n_out = n_out
        self.norm = LayerNorm(cfg.dim)
        self.proj = Linear(cfg.dim, n_out * cfg.enc_dim, rng)
        self.decoder = Decoder(cfg.kernel, cfg.enc_dim, rng)

    def __call__(self, chunks: Tensor, n_frames: int, length: int) -> Tensor:
        frames = overlap_add(ChunkTensor(chunks, n_frames))        # (C, T', D) or (T', D)
        z = self.proj(self.norm(frames))
        if self.n_out > 1:
            z = z.reshape(n_frames, self.n_out, -1).swapaxes(0, 1)
        return self.decoder(z, length)


class SepTDA(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.architecture != "septda":
            raise ConfigError("SepTDA requires architecture=septda")
        rng = np.random.default_rng(seed)
        self.config = cfg
        blk = dict(num_buckets=cfg.t5_buckets, max_distance=cfg.t5_max_distance,
                   use_lstm=cfg.use_lstm, use_attention=cfg.use_attention)
        self.encoder = Encoder(cfg.kernel, cfg.enc_dim, rng)
        self.bottleneck = Linear(cfg.enc_dim, cfg.dim, rng)
        self.dual = [DualPathBlock(cfg.dim, cfg.lstm_hidden, cfg.heads, cfg.ffn_expansion, rng, **blk)
                     for _ in range(cfg.dual_blocks)]
        self.tda = TDA(cfg.dim, cfg.heads, cfg.ffn_expansion, cfg.tda_layers, cfg.max_speakers, rng)
        self.film = FiLM(cfg.dim, rng)
        self.triple = [TriplePathBlock(cfg.dim, cfg.lstm_hidden, cfg.heads, cfg.ffn_expansion, rng, **blk)
                       for _ in range(cfg.triple_blocks)]
        self.head = OutputHead(cfg, rng)

    def mixture_embedding(self, samples) -> ChunkTensor:
        """Encoder, bottleneck, segmentation and dual-path processing (U'')."""
        feats = self.bottleneck(self.encoder(samples))
        u = segment(feats, self.config.chunk_size)
        for block in self.dual:
            u = block(u)
        return u

    def separate_from(self, u: ChunkTensor, attractors: Tensor, length: int,
                      all_scales: bool = False) -> list[Tensor]:
        """FiLM + triple-path stack + shared head; one (C, T) tensor per emitted scale."""
        v = self.film(u, attractors)
        outs = []
        for n, block in enumerate(self.triple):
            v = block(v)
            if all_scales or n == len(self.triple) - 1:
                outs.append(self.head(v, u.original_length, length))
        return outs

    def __call__(self, x, n_speakers="auto", training: bool = False) -> SeparationResult:
        samples = self._samples(x)
        u = self.mixture_embedding(samples)
        context = overlap_add(u)
        if n_speakers == "auto":
            probe = self.tda(context, self.config.max_speakers)
            probs = probe.existence_probs
            n_speakers = count_speakers(probs, self.config.max_speakers)
            if n_speakers == 0:
                raise NoSpeakersDetected(probs)
            # recompute on the prefix so auto and teacher-forced paths are identical
            att = self.tda(context, n_speakers)
        else:
            n_speakers = int(n_speakers)
            att = self.tda(context, n_speakers)
            probs = att.existence_probs
        outs = self.separate_from(u, att.attractors[:n_speakers], samples.shape[0], all_scales=training)
        return SeparationResult(outs[-1].data, probs, n_speakers, outs, att.existence_logits)

    forward = __call__

    def _samples(self, x) -> Tensor:
        if isinstance(x, AudioSignal):
            if x.sample_rate != self.config.sample_rate:
                raise ValueError(f"sample rate {x.sample_rate} != configured {self.config.sample_rate}")
            x = x.samples
        return as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x), self.dtype)


class DualPathSeparator(Module):
    """Ablation network: stacked dual-path blocks mapping straight to a fixed number of outputs."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        blk = dict(num_buckets=cfg.t5_buckets, max_distance=cfg.t5_max_distance,
                   use_lstm=cfg.use_lstm, use_attention=cfg.use_attention)
        self.encoder = Encoder(cfg.kernel, cfg.enc_dim, rng)
        self.bottleneck = Linear(cfg.enc_dim, cfg.dim, rng)
        self.dual = [DualPathBlock(cfg.dim, cfg.lstm_hidden, cfg.heads, cfg.ffn_expansion, rng, **blk)
                     for _ in range(cfg.dual_blocks)]
        self.head = OutputHead(cfg, rng, n_out=cfg.max_speakers)

    def __call__(self, x, n_speakers="auto", training: bool = False) -> SeparationResult:
        c = self.config.max_speakers
        if n_speakers not in ("auto", c):
            raise ValueError(f"this model always emits {c} sources")
        samples = as_tensor(np.asarray(x.samples if isinstance(x, AudioSignal) else x), self.dtype)
        u = segment(self.bottleneck(self.encoder(samples)), self.config.chunk_size)
        for block in self.dual:
            u = block(u)
        out = self.head(u.chunks, u.original_length, samples.shape[0])
        return SeparationResult(out.data, np.ones(c), c, [out])


def build_model(cfg: ModelConfig, seed: int = 0) -> Module:
    return SepTDA(cfg, seed) if cfg.architecture == "septda" else DualPathSeparator(cfg, seed)


def count_parameters(model_or_config) -> int:
    if isinstance(model_or_config, ModelConfig):
        model_or_config = build_model(model_or_config)
    return model_or_config.num_parameters()


# -- checkpoints --------------------------------------------------------------

MAGIC = b"SEPTDA\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None


def _write_records(buf: io.BytesIO, records: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint file is truncated")
    return data


def _unpack(buf: io.BytesIO, fmt: str):
    return struct.unpack(fmt, _read_exact(buf, struct.calcsize(fmt)))


def _read_records(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = _unpack(buf, "<I")
    records = {}
    for _ in range(count):
        (n,) = _unpack(buf, "<H")
        name = _read_exact(buf, n).decode("utf-8")
        (ndim,) = _unpack(buf, "<B")
        shape = _unpack(buf, f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_read_exact(buf, 4 * size), dtype="<f4").reshape(shape)
        if name in records:
            raise CheckpointError(f"duplicate parameter record {name!r}")
        records[name] = arr.astype(np.float32)
    return records


def _optimizer_text(state: OptimizerState) -> str:
    return (f"step={state.step}\nlr={state.lr!r}\nbeta1={state.betas[0]!r}\nbeta2={state.betas[1]!r}\n"
            f"eps={state.eps!r}\nweight_decay={state.weight_decay!r}\n")


def checkpoint_bytes(model: Module, config: ModelConfig, optimizer: OptimizerState | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    text = config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    params = dict(model.named_parameters()) if isinstance(model, Module) else model
    _write_records(buf, {k: getattr(v, "data", v) for k, v in params.items()})
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        opt = _optimizer_text(optimizer).encode("utf-8")
        buf.write(struct.pack("<I", len(opt)))
        buf.write(opt)
        moments = {f"m:{k}": v for k, v in optimizer.first_moment.items()}
        moments.update({f"v:{k}": v for k, v in optimizer.second_moment.items()})
        _write_records(buf, moments)
    return buf.getvalue()


def save_checkpoint(path, model: Module, config: ModelConfig, optimizer: OptimizerState | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, config, optimizer))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a SepTDA checkpoint (bad magic)")
    (version,) = _unpack(buf, "<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = _unpack(buf, "<I")
    try:
        config = ModelConfig.from_text(_read_exact(buf, n).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid config header ({exc})") from exc
    if expected is not None and config != expected:
        fields = ", ".join(expected.diff(config))
        raise CheckpointError(f"{path}: config mismatch in field(s): {fields}")
    params = _read_records(buf)
    (has_opt,) = _unpack(buf, "<B")
    optimizer = None
    if has_opt:
        (n,) = _unpack(buf, "<I")
        kv = dict(line.split("=", 1) for line in _read_exact(buf, n).decode("utf-8").splitlines())
        optimizer = OptimizerState(lr=float(kv["lr"]), betas=(float(kv["beta1"]), float(kv["beta2"])),
                                   eps=float(kv["eps"]), weight_decay=float(kv["weight_decay"]),
                                   step=int(kv["step"]))
        for name, arr in _read_records(buf).items():
            kind, pname = name.split(":", 1)
            target = optimizer.first_moment if kind == "m" else optimizer.second_moment
            target[pname] = arr.copy()
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(config, params, optimizer)


def load_model(path, expected: ModelConfig | None = None) -> tuple[Module, Checkpoint]:
    ckpt = load_checkpoint(path, expected)
    model = build_model(ckpt.config)
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, ckpt
