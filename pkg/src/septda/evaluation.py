"""Separation metrics and the unknown-speaker-count evaluation protocol."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import MixtureItem
from .model import NoSpeakersDetected
from .numerics import no_grad
from .objectives import pit_assign, si_sdr


def delta_si_sdr(mixture, reference, estimate) -> float:
    return si_sdr(reference, estimate) - si_sdr(reference, mixture)


@dataclass
class ItemScore:
    item_id: str
    n_speakers: int
    estimated: int | None          # None when the count was given
    delta_si_sdr: float            # mean over references, dB
    per_speaker: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    items: list[ItemScore]
    counted: bool

    def mean_delta_by_count(self) -> dict[int, float]:
        groups = defaultdict(list)
        for s in self.items:
            groups[s.n_speakers].append(s.delta_si_sdr)
        return {c: float(np.mean(v)) for c, v in sorted(groups.items())}

    def counting_accuracy(self) -> dict[int, float]:
        if not self.counted:
            return {}
        groups = defaultdict(list)
        for s in self.items:
            groups[s.n_speakers].append(s.estimated == s.n_speakers)
        return {c: float(np.mean(v)) for c, v in sorted(groups.items())}

    def confusion(self) -> Counter:
        """Counts of (true C, estimated C) pairs."""
        return Counter((s.n_speakers, s.estimated) for s in self.items if self.counted)

    def table(self) -> str:
        means = self.mean_delta_by_count()
        acc = self.counting_accuracy()
        header = "C\titems\tmean_dSI-SDR_dB" + ("\tcount_acc_%" if self.counted else "")
        lines = [header]
        for c, m in means.items():
            n = sum(1 for s in self.items if s.n_speakers == c)
            row = f"{c}\t{n}\t{m:.4f}"
            if self.counted:
                row += f"\t{100.0 * acc[c]:.2f}"
            lines.append(row)
        if self.counted:
            lines.append("confusion (C -> C_hat): " + ", ".join(
                f"{c}->{e}:{n}" for (c, e), n in sorted(self.confusion().items())))
        return "\n".join(lines)


def align_estimates(estimates: np.ndarray, n_true: int, length: int) -> np.ndarray:
    """Keep the first ``n_true`` estimates, or pad with silent ones when too few."""
    estimates = np.asarray(estimates).reshape(-1, length)
    if estimates.shape[0] >= n_true:
        return estimates[:n_true]
    pad = np.zeros((n_true - estimates.shape[0], length), dtype=estimates.dtype)
    return np.concatenate([estimates, pad])


def score_item(item: MixtureItem, estimates: np.ndarray, estimated: int | None) -> ItemScore:
    refs = item.references
    est = align_estimates(estimates, refs.shape[0], refs.shape[1])
    perm = pit_assign(refs, est).permutation
    per = [delta_si_sdr(item.mixture, refs[c], est[perm[c]]) for c in range(refs.shape[0])]
    return ItemScore(item.item_id, refs.shape[0], estimated, float(np.mean(per)), per)


def evaluate(model, items: list[MixtureItem], known_count: bool = False) -> EvalReport:
    """Score every item; with ``known_count`` the true C is given to the model."""
    scores = []
    with no_grad():
        for item in items:
            c = item.n_speakers
            if known_count:
                result = model(item.mixture, c)
                scores.append(score_item(item, result.estimates, None))
                continue
            try:
                result = model(item.mixture, "auto")
                est, c_hat = result.estimates, result.n_speakers
            except NoSpeakersDetected:
                est, c_hat = np.zeros((0, len(item.mixture))), 0
            scores.append(score_item(item, est, c_hat))
    scores.sort(key=lambda s: s.item_id)
    return EvalReport(scores, counted=not known_count)


def evaluate_unknown_count(model, items: list[MixtureItem]) -> EvalReport:
    return evaluate(model, items, known_count=False)
