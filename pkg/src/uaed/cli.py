"""Command-line entry point: simulate, train, infer, score, derive.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure. Every artifact carries the resolved config hash, and all
randomized subcommands are deterministic given (config, seed) regardless of
worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import (
    CONFIG_ENV_VAR,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
)
from .errors import ConfigError, DataError, NumericError, UaedError
from .metrics import MatchParams, ScoreAccumulator
from .model import load_checkpoint
from .simulate import render_utterance, synthesize_sources, read_wav, write_wav
from .timeline import (
    Timeline,
    derive_sd,
    derive_sed,
    read_label_file,
    write_label_file,
)
from .train import (
    DiskSource,
    OnlineSimulator,
    TRAIN_SEED_OFFSET,
    VAL_SEED_OFFSET,
    train as run_training,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _split_seed_base(seed: int, split: str) -> int:
    """Disjoint deterministic seed ranges per split: 'train' shares the
    online trainer's epoch-0 range, 'val' the held-out range, and any other
    split name gets its own salted block above the validation range."""
    if split == "train":
        return seed + TRAIN_SEED_OFFSET
    if split == "val":
        return seed + VAL_SEED_OFFSET
    return seed + VAL_SEED_OFFSET + (zlib.crc32(split.encode()) % 1000 + 1) * 10_000_000


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_POOL_CACHE: dict[str, object] = {}


def _cached_pool(cfg_json: str):
    if cfg_json not in _POOL_CACHE:
        cfg = config_from_dict(json.loads(cfg_json))
        _POOL_CACHE[cfg_json] = synthesize_sources(
            cfg.vocab.to_vocabulary(),
            rng=np.random.default_rng(cfg.train.seed),
            sample_rate=cfg.simulation.sample_rate,
        )
    return _POOL_CACHE[cfg_json]


def _simulate_worker(payload: tuple[str, str, str, int]) -> dict:
    cfg_json, split_dir, utt_id, seed = payload
    cfg = config_from_dict(json.loads(cfg_json))
    pool = _cached_pool(cfg_json)
    mixture = render_utterance(
        pool,
        cfg.simulation.stats(),
        speakers=tuple(cfg.vocab.speakers),
        sound_classes=tuple(cfg.vocab.sound_classes),
        background_classes=tuple(cfg.vocab.background_classes),
        duration=cfg.simulation.duration,
        rng=np.random.default_rng(seed),
        enroll_duration=cfg.simulation.enroll_duration,
    )
    out = Path(split_dir)
    write_wav(out / f"{utt_id}.wav", mixture.waveform, mixture.sample_rate)
    write_label_file(mixture.ground_truth, out / f"{utt_id}.tsv")
    for spk, wave in mixture.enrollments.items():
        write_wav(out / "enroll" / f"{utt_id}.{spk}.wav", wave, mixture.sample_rate)
    return {
        "utt_id": utt_id,
        "duration": cfg.simulation.duration,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "plan": {
            "background": [e.to_dict() for e in mixture.events if e.role == "background"],
            "foreground": [e.to_dict() for e in mixture.events if e.role == "foreground"],
        },
    }


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args, {"train.seed": args.seed})
    split_dir = Path(args.out) / args.split
    (split_dir / "enroll").mkdir(parents=True, exist_ok=True)
    cfg_json = json.dumps(config_to_dict(cfg), sort_keys=True)
    base = _split_seed_base(cfg.train.seed, args.split)
    payloads = [
        (cfg_json, str(split_dir), f"utt{i:05d}", base + i) for i in range(args.n)
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as executor:
            entries = list(executor.map(_simulate_worker, payloads))
    else:
        entries = [_simulate_worker(p) for p in payloads]
    # The manifest is written last: its presence marks a complete dataset.
    manifest = split_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(
        json.dumps(
            {
                "dataset": str(split_dir),
                "n_utterances": len(entries),
                "config_hash": config_hash(cfg),
            }
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.initial_lr": args.lr,
        "train.train_utterances": args.train_utterances,
        "train.val_utterances": args.val_utterances,
    }
    cfg = _resolve_config(args, overrides)
    if args.data is None and not args.online:
        raise ConfigError("pass --data DATASET_DIR or --online for simulated batches")
    if args.data is not None:
        root = Path(args.data)
        data = DiskSource(root / "train", root / "val", cfg)
    else:
        data = OnlineSimulator(cfg)
    run_training(
        cfg,
        data=data,
        out_dir=args.out,
        resume=args.resume,
        val_per_epoch=args.val_per_epoch,
        stop_after=args.stop_after,
        quiet=False,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _gather_enrollments(args, vocab) -> dict[str, np.ndarray]:
    enrollments: dict[str, np.ndarray] = {}
    if args.enroll_dir is not None:
        for spk in vocab.speaker_ids:
            path = Path(args.enroll_dir) / f"{spk}.wav"
            if path.exists():
                enrollments[spk], _ = read_wav(path)
    for item in args.enroll or []:
        spk, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--enroll expects SPEAKER=WAV_PATH, got {item!r}")
        enrollments[spk], _ = read_wav(path)
    return enrollments


def cmd_infer(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    wave, rate = read_wav(args.wav)
    if rate != cfg.simulation.sample_rate:
        raise DataError(
            f"{args.wav} is sampled at {rate} Hz; checkpoint expects "
            f"{cfg.simulation.sample_rate} Hz"
        )
    threshold = args.threshold if args.threshold is not None else cfg.train.threshold
    median = args.median_window if args.median_window is not None else cfg.train.median_window
    embeddings = None
    if model.vocab.speaker_ids:
        if cfg.model.speaker_embedding == "oracle":
            pool = synthesize_sources(
                model.vocab,
                rng=np.random.default_rng(cfg.train.seed),
                sample_rate=cfg.simulation.sample_rate,
            )
            embeddings = model.speaker_embeddings("oracle", pool=pool)
        else:
            enrollments = _gather_enrollments(args, model.vocab)
            embeddings = model.speaker_embeddings("learned", enrollments=enrollments)
    timeline, _ = model.detect(wave, embeddings, threshold, median)
    write_label_file(timeline, args.out)
    print(json.dumps({"out": str(args.out), "n_events": len(timeline.entries)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def _check_labels(timeline: Timeline, vocab, source: str) -> None:
    unknown = sorted(set(timeline.labels()) - set(vocab.labels))
    if unknown:
        raise DataError(f"{source} contains labels outside the vocabulary: {unknown}")


def cmd_score(args) -> int:
    cfg = _resolve_config(args, {})
    params = MatchParams(
        rho_dtc=args.rho_dtc if args.rho_dtc is not None else cfg.metrics.rho_dtc,
        rho_gtc=args.rho_gtc if args.rho_gtc is not None else cfg.metrics.rho_gtc,
        segment_length=(
            args.segment_length if args.segment_length is not None else cfg.metrics.segment_length
        ),
        collar=args.collar if args.collar is not None else cfg.metrics.collar,
    )
    vocab = cfg.vocab.to_vocabulary()
    ref_path, hyp_path = Path(args.ref), Path(args.hyp)
    skipped: list[str] = []
    acc = ScoreAccumulator(vocab, params)
    if ref_path.is_dir() != hyp_path.is_dir():
        raise ConfigError("ref and hyp must both be files or both be directories")
    if ref_path.is_dir():
        ref_files = {p.stem: p for p in sorted(ref_path.glob("*.tsv"))}
        hyp_files = {p.stem: p for p in sorted(hyp_path.glob("*.tsv"))}
        if not ref_files:
            raise DataError(f"no .tsv label files under {ref_path}")
        skipped = sorted(set(ref_files) ^ set(hyp_files))
        for stem in sorted(set(ref_files) & set(hyp_files)):
            ref = read_label_file(ref_files[stem])
            hyp = read_label_file(hyp_files[stem])
            total = max(ref.total_duration, hyp.total_duration)
            ref.total_duration = hyp.total_duration = total
            _check_labels(ref, vocab, str(ref_files[stem]))
            _check_labels(hyp, vocab, str(hyp_files[stem]))
            acc.add(ref, hyp)
    else:
        ref = read_label_file(ref_path)
        hyp = read_label_file(hyp_path)
        total = max(ref.total_duration, hyp.total_duration)
        ref.total_duration = hyp.total_duration = total
        _check_labels(ref, vocab, str(ref_path))
        _check_labels(hyp, vocab, str(hyp_path))
        acc.add(ref, hyp)
    report = acc.report().to_dict()
    report["skipped"] = skipped
    report["config_hash"] = config_hash(cfg)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# derive
# ---------------------------------------------------------------------------

def cmd_derive(args) -> int:
    cfg = _resolve_config(args, {})
    vocab = cfg.vocab.to_vocabulary()
    timeline = read_label_file(args.input)
    _check_labels(timeline, vocab, str(args.input))
    derived = derive_sed(timeline, vocab) if args.mode == "sed" else derive_sd(timeline, vocab)
    if args.out:
        write_label_file(derived, args.out)
    else:
        from .timeline import format_label_file

        sys.stdout.write(format_label_file(derived))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _resolve_config(args, overrides: dict) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(cfg, {k: v for k, v in overrides.items() if v is not None})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="uaed",
        description=(
            "Unified audio event detection: simulate labelled scenes, train the "
            "query-based detector, run inference, and score results."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument(
            "--config",
            default=None,
            help=f"YAML run config (default: ${CONFIG_ENV_VAR} if set, else built-in defaults)",
        )

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser(
        "simulate",
        help="render a labelled dataset split",
        formatter_class=fmt,
        description=(
            "Render n utterances into OUT/SPLIT/ as WAV + TSV labels + per-speaker "
            "enrollments, with a JSONL manifest written last as the completeness marker. "
            "Each split draws from its own disjoint seed range."
        ),
    )
    add_config(p)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--n", type=int, default=10, help="number of utterances")
    p.add_argument("--split", default="train", help="split name (train/val/...)")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--workers", type=int, default=1, help="parallel workers (seed-partitioned)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "train",
        help="train the detector",
        formatter_class=fmt,
        description=(
            "Adam with learning rate initial_lr * (1 - decay)^epoch "
            "(defaults 1e-4 and 5% decay per epoch). Logs line-delimited JSON."
        ),
    )
    add_config(p)
    p.add_argument("--out", required=True, help="run directory for checkpoint and log")
    p.add_argument("--data", default=None, help="dataset root with train/ and val/ splits")
    p.add_argument("--online", action="store_true", help="simulate fresh batches every epoch")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--batch-size", type=int, default=None, help="override train.batch_size")
    p.add_argument("--lr", type=float, default=None, help="override train.initial_lr")
    p.add_argument("--train-utterances", type=int, default=None)
    p.add_argument("--val-utterances", type=int, default=None)
    p.add_argument("--val-per-epoch", type=int, default=None,
                   help="cap validation utterances per epoch (default: all)")
    p.add_argument("--stop-after", type=int, default=None,
                   help="run at most this many epochs in this invocation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "infer",
        help="run detection on a WAV file",
        formatter_class=fmt,
        description=(
            "Features -> detector -> threshold (strict >, default 0.5) -> odd median "
            "filter (default 1 = off) -> TSV events."
        ),
    )
    p.add_argument("checkpoint", help="trained checkpoint")
    p.add_argument("wav", help="input waveform")
    p.add_argument("--out", required=True, help="output TSV label file")
    p.add_argument("--enroll", action="append", default=None, metavar="SPK=WAV",
                   help="enrollment audio for one speaker (repeatable)")
    p.add_argument("--enroll-dir", default=None, help="directory of {speaker}.wav enrollments")
    p.add_argument("--threshold", type=float, default=None,
                   help="decision threshold (default: config, 0.5)")
    p.add_argument("--median-window", type=int, default=None,
                   help="odd median filter length in frames (default: config, 1)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser(
        "score",
        help="score hypothesis labels against a reference",
        formatter_class=fmt,
        description=(
            "Reads TSV label files (or directories paired by stem; unpaired stems are "
            "reported as skipped) and emits a JSON report with unified, sound-event-"
            "derived, and diarization-derived scores. Intersection ratios default to "
            "0.5/0.5, segments to 1.0 s, collar to 0."
        ),
    )
    add_config(p)
    p.add_argument("ref", help="reference TSV file or directory")
    p.add_argument("hyp", help="hypothesis TSV file or directory")
    p.add_argument("--out", default=None, help="write the JSON report here instead of stdout")
    p.add_argument("--rho-dtc", type=float, default=None, help="hypothesis intersection ratio")
    p.add_argument("--rho-gtc", type=float, default=None, help="reference intersection ratio")
    p.add_argument("--segment-length", type=float, default=None, help="segment length (s)")
    p.add_argument("--collar", type=float, default=None, help="DER no-score collar (s)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser(
        "derive",
        help="project unified labels to SED or SD views",
        formatter_class=fmt,
        description=(
            "sed: speaker events collapse into merged 'speech' intervals; "
            "sd: keep only speaker events (normalized)."
        ),
    )
    add_config(p)
    p.add_argument("input", help="unified TSV label file")
    p.add_argument("--mode", required=True, choices=("sed", "sd"))
    p.add_argument("--out", default=None, help="output TSV (default: stdout)")
    p.set_defaults(func=cmd_derive)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"uaed: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"uaed: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, UaedError) as exc:
        print(f"uaed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
