"""Training loop: fixed-length crops, PIT + attractor loss, clipped AdamW, plateau halving."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import MixtureItem
from .model import ModelConfig, save_checkpoint
from .numerics import Module, OptimizerState, PlateauScheduler, adamw_step, clip_grad_norm_, no_grad
from .objectives import separation_loss, si_sdr


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 4e-4
    grad_clip: float = 5.0
    batch_size: int = 2
    segment_seconds: float = 4.0
    patience: int = 5
    lr_factor: float = 0.5
    max_epochs: int = 100
    seed: int = 0
    weight_decay: float = 1e-2
    max_steps: int | None = None

    def __post_init__(self):
        for name in ("lr", "grad_clip", "batch_size", "segment_seconds", "patience", "lr_factor", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def segment_samples(self, sample_rate: int) -> int:
        n = self.segment_seconds * sample_rate
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"segment_seconds * sample_rate = {n} is not an integer")
        return int(round(n))


@dataclass
class HistoryRow:
    epoch: int
    step: int
    train_loss: float
    val_loss: float
    lr: float

    def csv(self) -> str:
        val = "" if math.isnan(self.val_loss) else f"{self.val_loss:.6f}"
        return f"{self.epoch},{self.step},{self.train_loss:.6f},{val},{self.lr:.6g}"


HISTORY_HEADER = "epoch,step,train_loss,val_loss,lr"


@dataclass
class TrainResult:
    history: list[HistoryRow] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    scheduler: PlateauScheduler | None = None
    steps: int = 0


def crop(item: MixtureItem, length: int, rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Random crop (or deterministic head crop when ``rng`` is None), zero-padding short items."""
    n = len(item.mixture)
    if n >= length:
        start = 0 if rng is None else int(rng.integers(0, n - length + 1))
        return item.mixture[start:start + length], item.references[:, start:start + length]
    pad = length - n
    return np.pad(item.mixture, (0, pad)), np.pad(item.references, ((0, 0), (0, pad)))


def make_batches(items: list[MixtureItem], batch_size: int, rng: np.random.Generator) -> list[list[MixtureItem]]:
    """Shuffled batches, each drawn from a single speaker count."""
    by_count: dict[int, list[MixtureItem]] = {}
    for item in items:
        by_count.setdefault(item.n_speakers, []).append(item)
    batches = []
    for count in sorted(by_count):
        group = by_count[count]
        order = rng.permutation(len(group))
        batches += [[group[j] for j in order[i:i + batch_size]] for i in range(0, len(group), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def item_loss(model: Module, mixture: np.ndarray, references: np.ndarray):
    result = model(mixture, references.shape[0], training=True)
    total, _, _ = separation_loss(result, references)
    return total


def validation_loss(model: Module, items: list[MixtureItem], length: int) -> float:
    losses = []
    with no_grad():
        for item in items:
            mix, refs = crop(item, length, None)
            losses.append(item_loss(model, mix, refs).item())
    return float(np.mean(losses))


def delta_si_sdr_on(model: Module, items: list[MixtureItem], length: int | None = None) -> float:
    """Mean PIT-aligned SI-SDR improvement with the speaker count given."""
    from .objectives import pit_assign
    scores = []
    with no_grad():
        for item in items:
            mix, refs = (item.mixture, item.references) if length is None else crop(item, length, None)
            est = model(mix, refs.shape[0]).estimates
            perm = pit_assign(refs, est).permutation
            scores += [si_sdr(refs[c], est[perm[c]]) - si_sdr(refs[c], mix) for c in range(len(refs))]
    return float(np.mean(scores))


def train(model: Module, dataset: list[MixtureItem], cfg: TrainingConfig,
          val_dataset: list[MixtureItem] | None = None,
          log_path=None, echo: bool = True,
          callback: Callable[[int, Module], bool] | None = None,
          checkpoint_path=None) -> TrainResult:
    """Run training; ``callback(step, model)`` may return True to stop early."""
    if not dataset:
        raise ValueError("empty training set")
    model_cfg: ModelConfig = model.config
    length = cfg.segment_samples(model_cfg.sample_rate)
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(current_lr=cfg.lr, patience=cfg.patience, factor=cfg.lr_factor)
    result = TrainResult(optimizer=opt, scheduler=sched)

    log_file = open(log_path, "w") if log_path is not None else None

    def emit(line: str) -> None:
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
        if echo:
            print(line, file=sys.stdout, flush=True)

    emit(HISTORY_HEADER)
    step = 0
    stop = False
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            epoch_losses = []
            batches = make_batches(dataset, cfg.batch_size, rng)
            for b, batch in enumerate(batches):
                model.zero_grad()
                batch_loss = 0.0
                for item in batch:
                    mix, refs = crop(item, length, rng)
                    loss = item_loss(model, mix, refs)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NonFiniteLossError(step + 1, value)
                    (loss * (1.0 / len(batch))).backward()
                    batch_loss += value / len(batch)
                clip_grad_norm_(params.values(), cfg.grad_clip)
                adamw_step(params, opt)
                step += 1
                epoch_losses.append(batch_loss)
                last = b == len(batches) - 1
                stop = (cfg.max_steps is not None and step >= cfg.max_steps) or (
                    callback is not None and bool(callback(step, model)))
                val = math.nan
                if last:
                    val = (validation_loss(model, val_dataset, length) if val_dataset
                           else float(np.mean(epoch_losses)))
                row = HistoryRow(epoch, step, batch_loss, val, opt.lr)
                result.history.append(row)
                emit(row.csv())
                if last:
                    opt.lr = sched.step(val)
                if stop:
                    break
            if stop:
                break
    finally:
        if log_file is not None:
            log_file.close()
    model.zero_grad()
    result.steps = step
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, model_cfg, opt)
    return result
