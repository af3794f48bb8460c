"""SI-SDR, permutation-invariant assignment and the training losses."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import Tensor
from .tda import attractor_existence_loss

EPS = 1e-8
SI_SDR_CLAMP = 80.0
_DB = 10.0 / math.log(10.0)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, clamped to [-80, 80].

    Both signals are mean-subtracted.  The energy ratio is floored at 1e-8
    before the log, so a silent reference or a silent estimate scores -80 dB.
    """
    y = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if y.shape != e.shape:
        raise ValueError(f"length mismatch: reference {y.shape} vs estimate {e.shape}")
    target_energy, noise_energy = _energies(y - y.mean(), e - e.mean())
    return _ratio_db(target_energy, noise_energy)


def _energies(y: np.ndarray, e: np.ndarray) -> tuple[float, float]:
    yy = float(np.dot(y, y))
    if yy == 0.0:
        return 0.0, float(np.dot(e, e))
    s = (float(np.dot(e, y)) / yy) * y
    n = e - s
    return float(np.dot(s, s)), float(np.dot(n, n))


def _ratio_db(target_energy: float, noise_energy: float) -> float:
    if noise_energy == 0.0:
        return SI_SDR_CLAMP if target_energy > 0.0 else -SI_SDR_CLAMP
    ratio = max(target_energy / noise_energy, EPS)
    return float(np.clip(_DB * math.log(ratio), -SI_SDR_CLAMP, SI_SDR_CLAMP))


def si_sdr_matrix(references: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """M[i, j] = si_sdr(references[i], estimates[j])."""
    refs, ests = np.asarray(references), np.asarray(estimates)
    if refs.shape != ests.shape:
        raise ValueError(f"count/length mismatch: {refs.shape} vs {ests.shape}")
    c = refs.shape[0]
    return np.array([[si_sdr(refs[i], ests[j]) for j in range(c)] for i in range(c)])


@dataclass
class PitAssignment:
    permutation: np.ndarray   # permutation[i] = estimate index assigned to reference i
    score: float              # mean SI-SDR under the permutation, dB


def _score(matrix: np.ndarray, perm) -> float:
    return float(np.mean(matrix[np.arange(len(perm)), np.asarray(perm)]))


def pit_brute_force(matrix: np.ndarray) -> PitAssignment:
    c = matrix.shape[0]
    # seed with the identity so NaN scores still yield a valid assignment
    best_perm = tuple(range(c))
    best = _score(matrix, best_perm)
    for perm in itertools.permutations(range(c)):
        s = _score(matrix, perm)
        if s > best:
            best, best_perm = s, perm
    return PitAssignment(np.array(best_perm), best)


def pit_hungarian(matrix: np.ndarray) -> PitAssignment:
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    perm = cols[np.argsort(rows)]
    return PitAssignment(perm, _score(matrix, perm))


def pit_from_matrix(matrix: np.ndarray, method: str = "auto") -> PitAssignment:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square score matrix, got {matrix.shape}")
    if method == "brute" or (method == "auto" and matrix.shape[0] <= 5):
        return pit_brute_force(matrix)
    return pit_hungarian(matrix)


def pit_assign(references, estimates, method: str = "auto") -> PitAssignment:
    refs, ests = np.asarray(references), np.asarray(estimates)
    if refs.shape[0] != ests.shape[0]:
        raise ValueError(f"{refs.shape[0]} references but {ests.shape[0]} estimates")
    return pit_from_matrix(si_sdr_matrix(refs, ests), method)


def _si_sdr_db(target: Tensor, noise: Tensor) -> Tensor:
    """Clamped dB of per-pair energy ratios; zero gradient where floor or clamp is active."""
    t = target.data.astype(np.float64)
    n = noise.data.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(n > 0, t / np.where(n > 0, n, 1.0), np.where(t > 0, np.inf, 0.0))
        raw = _DB * np.log(np.maximum(ratio, EPS))
    value = np.clip(raw, -SI_SDR_CLAMP, SI_SDR_CLAMP)
    live = (ratio > EPS) & (raw > -SI_SDR_CLAMP) & (raw < SI_SDR_CLAMP)

    def backward(g):
        gt = np.where(live, g * _DB / np.where(live, t, 1.0), 0.0)
        gn = np.where(live, -g * _DB / np.where(live, n, 1.0), 0.0)
        return gt, gn

    return Tensor._make(value.astype(target.dtype), (target, noise), backward)


def si_sdr_tensor(references: np.ndarray, estimates: Tensor) -> Tensor:
    """Differentiable SI-SDR for aligned rows of (C, T) estimates; returns (C,) dB."""
    refs = np.asarray(references, dtype=estimates.dtype)
    if refs.shape != estimates.shape:
        raise ValueError(f"shape mismatch: {refs.shape} vs {estimates.shape}")
    y = refs - refs.mean(axis=-1, keepdims=True)
    e = estimates - estimates.mean(axis=-1, keepdims=True)
    yy = np.sum(y * y, axis=-1, keepdims=True)
    safe = np.where(yy > 0, yy, 1.0)
    alpha = (e * y).sum(axis=-1, keepdims=True) * (1.0 / safe)
    s = alpha * y
    noise = e - s
    return _si_sdr_db((s * s).sum(axis=-1), (noise * noise).sum(axis=-1))


def recon_loss(per_scale_estimates: list[Tensor], references: np.ndarray) -> Tensor:
    """Negative PIT SI-SDR averaged over scales; the permutation is solved per scale."""
    if not per_scale_estimates:
        raise ValueError("need at least one scale")
    refs = np.asarray(references)
    total = None
    for est in per_scale_estimates:
        perm = pit_assign(refs, est.data).permutation
        score = si_sdr_tensor(refs, est[perm]).mean()
        total = score if total is None else total + score
    return total * (-1.0 / len(per_scale_estimates))


def total_loss(recon, attractor):
    return recon + attractor


def separation_loss(result, references: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """(total, recon, attractor) terms for a training-mode ``SeparationResult``."""
    recon = recon_loss(result.outputs, references)
    attractor = attractor_existence_loss(result.existence_logits)
    return total_loss(recon, attractor), recon, attractor
