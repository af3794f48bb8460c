"""Synthetic sources, mixture simulation and manifest files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import AudioSignal, read_wav, write_wav

PEAK = 0.9


@dataclass
class MixtureItem:
    mixture: np.ndarray          # (T,)
    references: np.ndarray       # (C, T), sums to mixture
    item_id: str = ""
    levels_db: list[float] = field(default_factory=list)

    @property
    def n_speakers(self) -> int:
        return self.references.shape[0]


@dataclass
class MixtureSpec:
    sources: list
    seed: int = 0
    levels_db: list[float] | None = None    # drawn from U[0, 5] dB when None
    sample_rate: int | None = None


def synthetic_source(n_samples: int, rng: np.random.Generator, sample_rate: int = 8000) -> np.ndarray:
    """Voiced-speech stand-in: a gliding harmonic tone gated by a syllable-rate envelope."""
    t = np.arange(n_samples) / sample_rate
    f0 = rng.uniform(90.0, 260.0)
    glide = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * glide) / sample_rate
    n_harm = int(min(12, (sample_rate / 2) // (f0 * 1.1)))
    tilt = rng.uniform(0.6, 0.9)
    sig = sum(tilt**k * np.sin((k + 1) * phase + rng.uniform(0, 2 * np.pi)) for k in range(n_harm))
    rate = rng.uniform(3.0, 6.0)
    env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0.0, None) ** 0.5
    sig = sig * (0.2 + 0.8 * env)
    return sig / np.max(np.abs(sig)) * PEAK


def simulate_mixture(spec: MixtureSpec) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Level-scaled sum of peak-normalized sources.

    Returns (mixture, references, levels_db); references are stored after
    scaling so they sum to the mixture exactly.
    """
    if not spec.sources:
        raise ValueError("need at least one source")
    arrays, rates = [], set()
    for src in spec.sources:
        if isinstance(src, AudioSignal):
            rates.add(src.sample_rate)
            src = src.samples
        src = np.asarray(src, dtype=np.float64)
        if src.size == 0:
            raise ValueError("empty source signal")
        arrays.append(src)
    if spec.sample_rate is not None:
        rates.add(spec.sample_rate)
    if len(rates) > 1:
        raise ValueError(f"sources have mismatched sample rates: {sorted(rates)}")

    n = min(len(a) for a in arrays)
    rng = np.random.default_rng(spec.seed)
    if spec.levels_db is None:
        levels = [0.0] + [float(x) for x in rng.uniform(0.0, 5.0, len(arrays) - 1)]
    else:
        levels = [float(x) for x in spec.levels_db]
        if len(levels) != len(arrays):
            raise ValueError("one level per source required")
    refs = []
    for src, level in zip(arrays, levels):
        src = src[:n]
        peak = np.max(np.abs(src))
        if peak > 0:
            src = src * (PEAK / peak)
        refs.append(src * 10.0 ** (level / 20.0))
    refs = np.stack(refs)
    mixture = refs.sum(axis=0)
    peak = np.max(np.abs(mixture))
    if peak > PEAK:
        refs = refs * (PEAK / peak)
        mixture = refs.sum(axis=0)
    return mixture, refs, levels


def synthetic_dataset(n_items: int, n_speakers: int, seconds: float, seed: int,
                      sample_rate: int = 8000) -> list[MixtureItem]:
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    items = []
    for i in range(n_items):
        sources = [synthetic_source(n, rng, sample_rate) for _ in range(n_speakers)]
        mix, refs, levels = simulate_mixture(MixtureSpec(sources, seed=int(rng.integers(2**31))))
        items.append(MixtureItem(mix, refs, f"{i:04d}", levels))
    return items


# -- manifests ----------------------------------------------------------------

def write_manifest(path, rows: list[tuple[str, list[str], list[float]]]) -> None:
    """One tab-separated line per item: mixture path then reference paths.

    Each item line is preceded by a comment carrying its relative levels.
    """
    lines = ["# mixture\treferences... (paths relative to this file)"]
    for mix, refs, levels in rows:
        lines.append("# levels_db=" + ",".join(f"{x:.6f}" for x in levels))
        lines.append("\t".join([mix, *refs]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[Path, list[Path]]]:
    path = Path(path)
    base = path.parent
    items = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise ValueError(f"{path}:{lineno}: expected a mixture and at least one reference")
        items.append((base / cols[0], [base / c for c in cols[1:]]))
    return items


def load_manifest_items(path, sample_rate: int | None = None) -> list[MixtureItem]:
    items = []
    for mix_path, ref_paths in read_manifest(path):
        mix = read_wav(mix_path)
        refs = [read_wav(p) for p in ref_paths]
        for sig in [mix, *refs]:
            if sample_rate is not None and sig.sample_rate != sample_rate:
                raise ValueError(f"sample rate {sig.sample_rate} != configured {sample_rate}")
        n = len(mix)
        if any(len(r) != n for r in refs):
            raise ValueError(f"{mix_path}: references differ in length from the mixture")
        items.append(MixtureItem(mix.samples, np.stack([r.samples for r in refs]), mix_path.stem))
    return items


def simulate_to_dir(source_dir, n_speakers: int, n_items: int, seed: int, out_dir,
                    seconds: float | None = None) -> Path:
    """Draw ``n_items`` mixtures of ``n_speakers`` WAV sources and write them with a manifest."""
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    paths = sorted(source_dir.glob("*.wav"))
    if len(paths) < n_speakers:
        raise ValueError(f"{source_dir}: need at least {n_speakers} source WAVs, found {len(paths)}")
    sources = [read_wav(p) for p in paths]
    rates = {s.sample_rate for s in sources}
    if len(rates) > 1:
        raise ValueError(f"{source_dir}: mixed sample rates {sorted(rates)}")
    rate = rates.pop()
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_items):
        pick = rng.choice(len(sources), size=n_speakers, replace=False)
        chosen = [sources[j].samples for j in pick]
        if seconds is not None:
            chosen = [s[:int(round(seconds * rate))] for s in chosen]
        mix, refs, levels = simulate_mixture(MixtureSpec(chosen, seed=int(rng.integers(2**31))))
        name = f"mix_{i:04d}"
        (out_dir / name).mkdir(exist_ok=True)
        write_wav(out_dir / f"{name}.wav", AudioSignal(mix, rate))
        ref_names = []
        for c, ref in enumerate(refs, 1):
            rel = f"{name}/ref_{c}.wav"
            write_wav(out_dir / rel, AudioSignal(ref, rate))
            ref_names.append(rel)
        rows.append((f"{name}.wav", ref_names, levels))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest
