"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .data import load_manifest_items, simulate_to_dir
from .evaluation import evaluate
from .frontend import AudioSignal, WavFormatError, read_wav, write_wav
from .model import (CheckpointError, ConfigError, ModelConfig, NoSpeakersDetected, build_model,
                    count_parameters, load_model, parse_key_values)
from .numerics import no_grad
from .training import NonFiniteLossError, TrainingConfig, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def read_config(path) -> tuple[ModelConfig, TrainingConfig]:
    """Model and training settings from one key=value file."""
    text = Path(path).read_text()
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainingConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line and "=" in line:
            key = line.split("=", 1)[0].strip()
            if key not in model_keys | train_keys:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    model_cfg = ModelConfig(**parse_key_values(text, ModelConfig, strict=False))
    try:
        train_cfg = TrainingConfig(**parse_key_values(text, TrainingConfig, strict=False))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return model_cfg, train_cfg


def _format_probs(probs) -> str:
    return " ".join(f"{p:.6f}" for p in probs)


def cmd_params(args) -> int:
    cfg, _ = read_config(args.config)
    print(count_parameters(cfg))
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = read_config(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    data = Path(args.data)
    manifest = data / "manifest.tsv" if data.is_dir() else data
    items = load_manifest_items(manifest, model_cfg.sample_rate)
    val_items = None
    if args.val:
        val = Path(args.val)
        val_items = load_manifest_items(val / "manifest.tsv" if val.is_dir() else val, model_cfg.sample_rate)
    model = build_model(model_cfg, seed=train_cfg.seed)
    train(model, items, train_cfg, val_dataset=val_items, log_path=args.log, checkpoint_path=args.out)
    return 0


def _load(args):
    model, _ = load_model(args.ckpt)
    return model


def _read_input(path, model) -> AudioSignal:
    sig = read_wav(path)
    if sig.sample_rate != model.config.sample_rate:
        raise WavFormatError(f"{path}: sample rate {sig.sample_rate} Hz does not match "
                             f"the model's {model.config.sample_rate} Hz")
    return sig


def cmd_separate(args) -> int:
    model = _load(args)
    sig = _read_input(args.input, model)
    speakers = "auto" if args.speakers == "auto" else int(args.speakers)
    with no_grad():
        result = model(sig, speakers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c, est in enumerate(result.estimates, 1):
        write_wav(out / f"est_{c}.wav", AudioSignal(np.asarray(est, dtype=np.float64), sig.sample_rate))
    print(f"speakers={result.n_speakers} probs={_format_probs(result.probs)}")
    return 0


def cmd_count(args) -> int:
    model = _load(args)
    sig = _read_input(args.input, model)
    with no_grad():
        try:
            result = model(sig, "auto")
            n, probs = result.n_speakers, result.probs
        except NoSpeakersDetected as exc:
            n, probs = 0, exc.probs
    print(n)
    print(_format_probs(probs))
    return 0


def cmd_eval(args) -> int:
    model = _load(args)
    items = load_manifest_items(args.manifest, model.config.sample_rate)
    report = evaluate(model, items, known_count=args.known_count)
    print(report.table())
    return 0


def cmd_simulate(args) -> int:
    manifest = simulate_to_dir(args.sources, args.count, args.n, args.seed, args.out, args.seconds)
    print(manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="septda", description="SepTDA speech separation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train on a simulated manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="directory with manifest.tsv, or a manifest")
    s.add_argument("--out", required=True, help="checkpoint to write")
    s.add_argument("--val", help="validation directory or manifest")
    s.add_argument("--log", help="CSV loss history file")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate one WAV file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--speakers", default="auto")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("count", help="estimate the number of speakers")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("eval", help="evaluate on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--known-count", dest="known_count", action="store_true")
    mode.add_argument("--auto-count", dest="known_count", action="store_false")
    s.set_defaults(func=cmd_eval, known_count=False)

    s = sub.add_parser("simulate", help="write synthetic mixtures from clean WAV sources")
    s.add_argument("--sources", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--seconds", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("params", help="print the exact parameter count")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "speakers", "auto") != "auto":
            try:
                if int(args.speakers) < 1:
                    raise ValueError
            except ValueError:
                raise UsageError(f"--speakers must be a positive integer or 'auto', got {args.speakers!r}")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoSpeakersDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WavFormatError, CheckpointError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
