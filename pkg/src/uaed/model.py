"""Query-based detector: one query per detectable event, a transformer
encoder-decoder over fused features, and a dot-product/sigmoid head giving
per-event frame activity probabilities.

Sound-event queries are learnable embeddings; speaker queries are injected
speaker embeddings (oracle signatures from the simulator, or embeddings
pooled from enrollment audio), so the query matrix row order always matches
the vocabulary order. Queries carry no positional encoding: event identity
comes from query content alone, which makes decoding permutation
equivariant in the query axis.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RunConfig, config_from_dict, config_hash, config_to_dict
from .errors import AlignmentError, ConfigError, DataError
from .features import FeatureFrontEnd, FusedFeatures
from .timeline import (
    ActivityMatrix,
    ProbabilityMatrix,
    Timeline,
    Vocabulary,
    binarize,
    matrix_to_timeline,
)

PROB_EPS = 1e-7
CHECKPOINT_FORMAT_VERSION = 1

MIN_ENROLLMENT_EMBED_SECONDS = 1.0


def sinusoidal_position_encoding(
    n_frames: int, d_model: int, dtype: torch.dtype = torch.float32, device=None
) -> torch.Tensor:
    position = torch.arange(n_frames, dtype=dtype, device=device).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, d_model, 2, dtype=dtype, device=device)
        * (-math.log(10000.0) / d_model)
    )
    pe = torch.zeros(n_frames, d_model, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return pe


def bce_loss(y_hat, y) -> torch.Tensor:
    """Mean binary cross entropy over all (event, frame) cells.

    Probabilities are clamped into [1e-7, 1 - 1e-7] before the logs.
    """
    y_hat = torch.as_tensor(y_hat)
    y = torch.as_tensor(y)
    if y_hat.shape != y.shape:
        raise AlignmentError(
            f"prediction shape {tuple(y_hat.shape)} does not match "
            f"target shape {tuple(y.shape)}"
        )
    y = y.to(y_hat.dtype)
    y_hat = torch.clamp(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * torch.log(y_hat) + (1.0 - y) * torch.log1p(-y_hat)).mean()


class UAEDQueries(nn.Module):
    """Query matrix in vocabulary order: learnable rows for sound events
    followed by injected speaker-embedding rows."""

    def __init__(self, n_sound_events: int, d_model: int) -> None:
        super().__init__()
        self.sound_queries = nn.Parameter(torch.empty(n_sound_events, d_model))
        nn.init.normal_(self.sound_queries, std=0.02)

    def forward(self, speaker_embeddings: torch.Tensor | None = None) -> torch.Tensor:
        """speaker_embeddings: (K, D), (B, K, D), or None -> (B?, N, D)."""
        q = self.sound_queries
        if speaker_embeddings is None:
            return q
        spk = speaker_embeddings.to(q.dtype)
        if spk.dim() == 2:
            return torch.cat([q, spk], dim=0)
        return torch.cat([q.unsqueeze(0).expand(spk.shape[0], -1, -1), spk], dim=1)


class Detector(nn.Module):
    """Encoder-decoder activity detector.

    May be built with or without the feature front end; without one it
    operates on precomputed fused features (used by the unit-level
    gradient checks).
    """

    def __init__(
        self,
        vocab: Vocabulary,
        *,
        d_model: int = 192,
        encoder_layers: int = 6,
        decoder_layers: int = 6,
        heads: int = 8,
        dropout: float = 0.1,
        frontend: FeatureFrontEnd | None = None,
    ) -> None:
        super().__init__()
        self.vocab = vocab
        self.d_model = d_model
        self.frontend = frontend
        self.queries = UAEDQueries(len(vocab.sound_classes), d_model)
        enc_layer = nn.TransformerEncoderLayer(
            d_model, heads, 4 * d_model, dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            enc_layer, encoder_layers, norm=nn.LayerNorm(d_model),
            enable_nested_tensor=False,
        )
        dec_layer = nn.TransformerDecoderLayer(
            d_model, heads, 4 * d_model, dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(
            dec_layer, decoder_layers, norm=nn.LayerNorm(d_model)
        )
        # Projection for learned enrollment embeddings; only meaningful when
        # the front end (whose speaker branch feeds it) is attached.
        self.speaker_proj = (
            nn.Linear(frontend.speaker_adapter.head.proj.out_features, d_model)
            if frontend is not None
            else None
        )

    # -- core ops ----------------------------------------------------------

    def encode(self, f_u: torch.Tensor) -> torch.Tensor:
        """(B, T, D) fused features -> (B, T, D) frame representation."""
        if f_u.shape[-1] != self.d_model:
            raise AlignmentError(
                f"features have width {f_u.shape[-1]}, model expects {self.d_model}"
            )
        pe = sinusoidal_position_encoding(
            f_u.shape[-2], self.d_model, dtype=f_u.dtype, device=f_u.device
        )
        return self.encoder(f_u + pe)

    def decode(self, queries: torch.Tensor, f_enc: torch.Tensor) -> torch.Tensor:
        """Self-attention over the N queries plus cross-attention to the
        encoded frames; no positional encoding on the query axis."""
        if queries.dim() == 2:
            queries = queries.unsqueeze(0).expand(f_enc.shape[0], -1, -1)
        return self.decoder(queries, f_enc)

    @staticmethod
    def predict(f_dec: torch.Tensor, f_enc: torch.Tensor) -> torch.Tensor:
        """sigmoid(F_dec . F_enc^T): (B, N, T) probabilities in (0, 1)."""
        logits = torch.matmul(f_dec, f_enc.transpose(-1, -2))
        return torch.clamp(torch.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)

    def head_logits(
        self, f_u: torch.Tensor, speaker_embeddings: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Fused features -> pre-sigmoid activity logits (B, N, T). The
        training loop works in logit space so saturated cells keep their
        gradient; sigmoid(head_logits) == head_probs up to the clamp."""
        f_enc = self.encode(f_u)
        f_dec = self.decode(self.queries(speaker_embeddings), f_enc)
        return torch.matmul(f_dec, f_enc.transpose(-1, -2))

    def head_probs(
        self, f_u: torch.Tensor, speaker_embeddings: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Fused features -> activity probabilities (B, N, T)."""
        return torch.clamp(
            torch.sigmoid(self.head_logits(f_u, speaker_embeddings)),
            PROB_EPS,
            1.0 - PROB_EPS,
        )

    def forward_logits(
        self, wave: torch.Tensor, speaker_embeddings: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, float]:
        """(B, samples) waveform -> ((B, N, T) logits, frame seconds)."""
        if self.frontend is None:
            raise ConfigError("detector was built without a feature front end")
        fused = self.frontend(wave)
        return self.head_logits(fused.values, speaker_embeddings), fused.frame_duration

    def forward(
        self, wave: torch.Tensor, speaker_embeddings: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, float]:
        """(B, samples) waveform -> ((B, N, T) probabilities, frame seconds)."""
        logits, frame_duration = self.forward_logits(wave, speaker_embeddings)
        return torch.clamp(torch.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS), frame_duration

    # -- speaker embeddings --------------------------------------------------

    def oracle_speaker_embeddings(self, pool) -> torch.Tensor:
        """Unit-norm signature vectors from the simulator, one per vocab
        speaker, in vocabulary order."""
        rows = [
            torch.as_tensor(pool.speaker_signature(spk, self.d_model), dtype=torch.float32)
            for spk in self.vocab.speaker_ids
        ]
        stacked = torch.stack(rows)
        return torch.nn.functional.normalize(stacked, dim=-1)

    def learned_speaker_embeddings(self, enrollments: dict[str, np.ndarray]) -> torch.Tensor:
        """Mean-pooled speaker-branch features of each enrollment, projected
        to the model width and unit-normalized."""
        if self.frontend is None:
            raise ConfigError("learned speaker embeddings need the feature front end")
        sr = self.frontend.sample_rate
        rows = []
        for spk in self.vocab.speaker_ids:
            if spk not in enrollments:
                raise DataError(f"missing enrollment audio for speaker {spk!r}")
            wave = np.asarray(enrollments[spk])
            if len(wave) < MIN_ENROLLMENT_EMBED_SECONDS * sr:
                raise DataError(
                    f"enrollment for {spk!r} is {len(wave) / sr:.2f} s; "
                    f"need at least {MIN_ENROLLMENT_EMBED_SECONDS:.0f} s"
                )
            feats = self.frontend.speaker_branch(
                torch.as_tensor(wave, dtype=torch.float32).unsqueeze(0)
            )
            rows.append(self.speaker_proj(feats.mean(dim=1)).squeeze(0))
        return torch.nn.functional.normalize(torch.stack(rows), dim=-1)

    def speaker_embeddings(
        self,
        mode: str,
        pool=None,
        enrollments: dict[str, np.ndarray] | None = None,
    ) -> torch.Tensor | None:
        if not self.vocab.speaker_ids:
            return None
        if mode == "oracle":
            if pool is None:
                raise ConfigError("oracle speaker embeddings need a source pool")
            return self.oracle_speaker_embeddings(pool)
        if mode == "learned":
            return self.learned_speaker_embeddings(enrollments or {})
        raise ConfigError(f"unknown speaker embedding mode {mode!r}")

    # -- inference -----------------------------------------------------------

    def probabilities(
        self, wave: np.ndarray, speaker_embeddings: torch.Tensor | None = None
    ) -> ProbabilityMatrix:
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                x = torch.as_tensor(np.asarray(wave), dtype=torch.float32)
                probs, frame_duration = self.forward(x.unsqueeze(0), speaker_embeddings)
        finally:
            self.train(was_training)
        values = probs.squeeze(0).double().numpy()
        values = np.clip(values, PROB_EPS, 1.0 - PROB_EPS)
        return ProbabilityMatrix(values, frame_duration, self.vocab)

    def detect(
        self,
        wave: np.ndarray,
        speaker_embeddings: torch.Tensor | None = None,
        threshold: float = 0.5,
        median_window: int = 1,
    ) -> tuple[Timeline, ProbabilityMatrix]:
        probs = self.probabilities(wave, speaker_embeddings)
        activity = binarize(probs, threshold, median_window)
        return matrix_to_timeline(activity), probs


def build_detector(cfg: RunConfig, with_frontend: bool = True) -> Detector:
    """Construct the detector (and front end) described by a run config."""
    vocab = cfg.vocab.to_vocabulary()
    frontend = None
    if with_frontend:
        frontend = FeatureFrontEnd(
            sample_rate=cfg.simulation.sample_rate,
            n_mels=cfg.features.n_mels,
            win=cfg.features.window,
            hop=cfg.features.hop,
            encoder_dim=cfg.features.encoder_dim,
            encoder_layers=cfg.features.encoder_layers,
            branch_dim=cfg.features.branch_dim,
            d_model=cfg.model.d_model,
            fusion_stride=cfg.features.fusion_stride,
        )
    return Detector(
        vocab,
        d_model=cfg.model.d_model,
        encoder_layers=cfg.model.encoder_layers,
        decoder_layers=cfg.model.decoder_layers,
        heads=cfg.model.heads,
        dropout=cfg.model.dropout,
        frontend=frontend,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: Detector,
    cfg: RunConfig,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "vocab": {
            "sound_classes": list(model.vocab.sound_classes),
            "speaker_ids": list(model.vocab.speaker_ids),
        },
        "model_state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(
    path: str | Path,
    expected_config_hash: str | None = None,
    force: bool = False,
) -> tuple[Detector, RunConfig, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint format version {version} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = config_from_dict(payload["config"])
    stored_hash = payload.get("config_hash")
    if stored_hash != config_hash(cfg):
        raise DataError(f"checkpoint {path} is corrupt: config hash mismatch")
    if expected_config_hash is not None and expected_config_hash != stored_hash:
        if not force:
            raise ConfigError(
                f"checkpoint config hash {stored_hash} does not match the "
                f"requested config {expected_config_hash}; pass force to override"
            )
    model = build_detector(cfg)
    model.load_state_dict(payload["model_state"])
    return model, cfg, payload.get("extra", {})
