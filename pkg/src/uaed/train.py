"""Training loop and evaluation.

Data comes either from the online simulator (fresh seeds every epoch, the
default) or from a dataset directory written by ``uaed simulate``. Seeds are
partitioned so validation utterances can never collide with training ones,
and all state needed to resume bit-identically (optimizer moments, RNG
state, epoch/step counters) rides along in the checkpoint.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .config import RunConfig, config_hash
from .errors import AlignmentError, ConfigError, DataError, NumericError
from .metrics import ScoreAccumulator, ScoreReport
from .model import Detector, bce_loss, build_detector, load_checkpoint, save_checkpoint
from .simulate import Mixture, SourcePool, read_wav, render_utterance, synthesize_sources
from .timeline import binarize, matrix_to_timeline, read_label_file, timeline_to_matrix

logger = logging.getLogger(__name__)

# Seed-space layout: train seeds live in [TRAIN_SEED_OFFSET, VAL_SEED_OFFSET),
# validation seeds at VAL_SEED_OFFSET and above.
TRAIN_SEED_OFFSET = 1_000_003
VAL_SEED_OFFSET = 2**31


def lr_at_epoch(initial_lr: float, decay_per_epoch: float, epoch: int) -> float:
    """Closed-form schedule: initial * (1 - decay)^epoch."""
    return initial_lr * (1.0 - decay_per_epoch) ** epoch


class OnlineSimulator:
    """Deterministic utterance source backed by the scene simulator.

    Training seeds advance every epoch when ``cfg.train.online`` is set
    (fresh data each epoch); otherwise the epoch-0 seeds are reused.
    """

    def __init__(self, cfg: RunConfig, pool: SourcePool | None = None) -> None:
        self.cfg = cfg
        vocab = cfg.vocab.to_vocabulary()
        self.pool = pool or synthesize_sources(
            vocab,
            rng=np.random.default_rng(cfg.train.seed),
            sample_rate=cfg.simulation.sample_rate,
        )
        span = cfg.train.epochs * max(cfg.train.train_utterances, 1)
        if TRAIN_SEED_OFFSET + span >= VAL_SEED_OFFSET:
            raise ConfigError(
                f"train seed range (epochs x utterances = {span}) would overlap "
                f"the validation seed range"
            )

    @property
    def n_train(self) -> int:
        return self.cfg.train.train_utterances

    @property
    def n_val(self) -> int:
        return self.cfg.train.val_utterances

    def train_seed(self, epoch: int, index: int) -> int:
        base = self.cfg.train.seed + TRAIN_SEED_OFFSET
        if self.cfg.train.online:
            return base + epoch * self.n_train + index
        return base + index

    def val_seed(self, index: int) -> int:
        return self.cfg.train.seed + VAL_SEED_OFFSET + index

    def _render(self, seed: int) -> Mixture:
        cfg = self.cfg
        return render_utterance(
            self.pool,
            cfg.simulation.stats(),
            speakers=tuple(cfg.vocab.speakers),
            sound_classes=tuple(cfg.vocab.sound_classes),
            background_classes=tuple(cfg.vocab.background_classes),
            duration=cfg.simulation.duration,
            rng=np.random.default_rng(seed),
            enroll_duration=cfg.simulation.enroll_duration,
        )

    def train_utterance(self, epoch: int, index: int) -> Mixture:
        return self._render(self.train_seed(epoch, index))

    def val_utterance(self, index: int) -> Mixture:
        return self._render(self.val_seed(index))

    def val_utterances(self, limit: int | None = None) -> Iterable[Mixture]:
        n = self.n_val if limit is None else min(limit, self.n_val)
        for i in range(n):
            yield self.val_utterance(i)


class DiskSource:
    """Utterance source reading datasets written by ``uaed simulate``."""

    def __init__(self, train_dir: str | Path, val_dir: str | Path, cfg: RunConfig) -> None:
        self.cfg = cfg
        self.train_items = self._read_manifest(Path(train_dir))
        self.val_items = self._read_manifest(Path(val_dir))
        vocab = cfg.vocab.to_vocabulary()
        self.pool = synthesize_sources(
            vocab,
            rng=np.random.default_rng(cfg.train.seed),
            sample_rate=cfg.simulation.sample_rate,
        )

    @staticmethod
    def _read_manifest(split_dir: Path) -> list[dict]:
        manifest = split_dir / "manifest.jsonl"
        if not manifest.exists():
            raise DataError(
                f"{split_dir} has no manifest.jsonl (incomplete or missing dataset)"
            )
        items = []
        for line in manifest.read_text().splitlines():
            if line.strip():
                entry = json.loads(line)
                entry["_dir"] = split_dir
                items.append(entry)
        if not items:
            raise DataError(f"manifest in {split_dir} is empty")
        return items

    @property
    def n_train(self) -> int:
        return len(self.train_items)

    @property
    def n_val(self) -> int:
        return len(self.val_items)

    def _load(self, entry: dict) -> Mixture:
        split_dir: Path = entry["_dir"]
        utt = entry["utt_id"]
        wave, rate = read_wav(split_dir / f"{utt}.wav")
        timeline = read_label_file(split_dir / f"{utt}.tsv", total_duration=entry["duration"])
        enrollments = {}
        for spk in self.cfg.vocab.speakers:
            enroll_path = split_dir / "enroll" / f"{utt}.{spk}.wav"
            if enroll_path.exists():
                enrollments[spk], _ = read_wav(enroll_path)
        return Mixture(wave, timeline, enrollments, rate)

    def train_utterance(self, epoch: int, index: int) -> Mixture:
        order = np.random.default_rng(self.cfg.train.seed + 7919 * epoch).permutation(
            len(self.train_items)
        )
        return self._load(self.train_items[int(order[index])])

    def val_utterance(self, index: int) -> Mixture:
        return self._load(self.val_items[index])

    def val_utterances(self, limit: int | None = None) -> Iterable[Mixture]:
        n = self.n_val if limit is None else min(limit, self.n_val)
        for i in range(n):
            yield self.val_utterance(i)


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def make_targets(model: Detector, mixtures: list[Mixture]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack waveforms and frame targets; activity matrices are built at the
    model's exact output frame duration."""
    lengths = {len(m.waveform) for m in mixtures}
    if len(lengths) != 1:
        raise AlignmentError(f"utterances in a batch must share a length, got {sorted(lengths)}")
    n_samples = lengths.pop()
    t_model = model.frontend.output_frames(n_samples)
    frame_duration = model.frontend.frame_duration
    waves, targets = [], []
    for mix in mixtures:
        matrix = timeline_to_matrix(mix.ground_truth, model.vocab, frame_duration)
        t_label = matrix.n_frames
        if abs(t_label - t_model) > 1:
            raise AlignmentError(
                f"label frames {t_label} vs model frames {t_model}; "
                f"check duration/frame-rate configuration"
            )
        values = matrix.values[:, :t_model]
        if values.shape[1] < t_model:
            values = np.pad(values, ((0, 0), (0, t_model - values.shape[1])))
        waves.append(torch.from_numpy(np.asarray(mix.waveform, dtype=np.float32)))
        targets.append(torch.from_numpy(values.astype(np.float32)))
    return torch.stack(waves), torch.stack(targets)


def batch_speaker_embeddings(
    model: Detector, cfg: RunConfig, mixtures: list[Mixture], pool: SourcePool | None
) -> torch.Tensor | None:
    if not model.vocab.speaker_ids:
        return None
    mode = cfg.model.speaker_embedding
    if mode == "oracle":
        return model.speaker_embeddings("oracle", pool=pool)
    rows = [model.speaker_embeddings("learned", enrollments=m.enrollments) for m in mixtures]
    return torch.stack(rows)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(
    model: Detector,
    cfg: RunConfig,
    utterances: Iterable[Mixture],
    pool: SourcePool | None = None,
    probs_fn: Callable[[Mixture], object] | None = None,
) -> ScoreReport:
    """Inference -> binarize -> timeline -> unified scores over utterances.

    ``probs_fn`` substitutes the model's probability output (used to sanity
    check the scoring path with oracle predictions).
    """
    acc = ScoreAccumulator(model.vocab, cfg.metrics.params())
    shared_emb = None
    if probs_fn is None and model.vocab.speaker_ids and cfg.model.speaker_embedding == "oracle":
        shared_emb = model.speaker_embeddings("oracle", pool=pool)
    for mix in utterances:
        if probs_fn is not None:
            probs = probs_fn(mix)
        else:
            emb = (
                shared_emb
                if shared_emb is not None
                else model.speaker_embeddings("learned", enrollments=mix.enrollments)
                if model.vocab.speaker_ids
                else None
            )
            probs = model.probabilities(mix.waveform, emb)
        activity = binarize(probs, cfg.train.threshold, cfg.train.median_window)
        acc.add(mix.ground_truth, matrix_to_timeline(activity))
    return acc.report()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Detector
    history: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    log_path: Path | None = None
    final_report: ScoreReport | None = None


def _log_line(log_path: Path | None, record: dict, quiet: bool) -> None:
    line = json.dumps(record, sort_keys=True)
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(line + "\n")
    if not quiet:
        print(line, flush=True)


def train(
    cfg: RunConfig,
    data: OnlineSimulator | DiskSource | None = None,
    out_dir: str | Path | None = None,
    model: Detector | None = None,
    resume: str | Path | None = None,
    val_per_epoch: int | None = None,
    stop_after: int | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Adam training with the multiplicative LR schedule, per-epoch
    validation, JSONL logging, and resumable checkpoints.

    ``stop_after`` bounds the number of epochs run in this invocation while
    the config keeps the full budget, so an interrupted run can be resumed
    bit-identically under the same config hash.
    """
    tcfg = cfg.train
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.pt"
        log_path = out_dir / "train_log.jsonl"

    data = data or OnlineSimulator(cfg)
    start_epoch = 0
    step = 0
    best_val = -math.inf
    history: list[dict] = []
    optimizer_state = None

    if resume is not None:
        model, loaded_cfg, extra = load_checkpoint(
            resume, expected_config_hash=config_hash(cfg)
        )
        start_epoch = extra["epoch"] + 1
        step = extra["step"]
        best_val = extra.get("best_val_sb_f1", -math.inf)
        optimizer_state = extra["optimizer_state"]
        torch.set_rng_state(torch.tensor(extra["torch_rng_state"], dtype=torch.uint8))
    else:
        torch.manual_seed(tcfg.seed)
        if model is None:
            model = build_detector(cfg)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=tcfg.initial_lr, betas=(0.9, 0.999), eps=1e-8
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    pool = getattr(data, "pool", None)
    clip_gradients = False
    n_batches = math.ceil(data.n_train / tcfg.batch_size)
    _log_line(
        log_path,
        {
            "event": "start",
            "config_hash": config_hash(cfg),
            "epoch": start_epoch,
            "resumed": resume is not None,
            "n_train": data.n_train,
            "n_val": data.n_val,
        },
        quiet,
    )

    end_epoch = tcfg.epochs if stop_after is None else min(tcfg.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        lr = lr_at_epoch(tcfg.initial_lr, tcfg.lr_decay_per_epoch, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        epoch_losses = []
        tic = time.time()
        for b in range(n_batches):
            indices = range(b * tcfg.batch_size, min((b + 1) * tcfg.batch_size, data.n_train))
            mixtures = [data.train_utterance(epoch, i) for i in indices]
            waves, targets = make_targets(model, mixtures)
            emb = batch_speaker_embeddings(model, cfg, mixtures, pool)
            # Logit-space BCE: same value as the probability-space loss but
            # saturated cells keep a useful gradient.
            logits, _ = model.forward_logits(waves, emb)
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets)
            if not torch.isfinite(loss):
                seeds = [getattr(data, "train_seed", lambda e, i: i)(epoch, i) for i in indices]
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(lr {lr:.3e}, batch seeds {seeds})"
                )
            optimizer.zero_grad()
            loss.backward()
            grads_finite = all(
                p.grad is None or torch.isfinite(p.grad).all() for p in model.parameters()
            )
            if not grads_finite and not clip_gradients:
                clip_gradients = True
                logger.warning(
                    "non-finite gradients at epoch %d step %d; enabling clipping at 5.0",
                    epoch, step,
                )
            if clip_gradients:
                torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            step += 1

        record = {
            "event": "epoch",
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(epoch_losses)),
            "step": step,
            "seconds": round(time.time() - tic, 3),
        }
        if data.n_val > 0:
            report = evaluate(model, cfg, data.val_utterances(val_per_epoch), pool=pool)
            record["val_uaed_sb_f1"] = report.uaed_sb_macro
            record["val_der"] = None if report.sd_der.undefined else report.sd_der.der
            best_val = max(best_val, report.uaed_sb_macro)
            record["best_val_uaed_sb_f1"] = best_val
        history.append(record)
        _log_line(log_path, record, quiet)

        if ckpt_path is not None:
            save_checkpoint(
                ckpt_path,
                model,
                cfg,
                extra={
                    "epoch": epoch,
                    "step": step,
                    "best_val_sb_f1": best_val,
                    "optimizer_state": optimizer.state_dict(),
                    "torch_rng_state": torch.get_rng_state().tolist(),
                    "history_tail": history[-1],
                },
            )

    return TrainResult(model, history, ckpt_path, log_path)
