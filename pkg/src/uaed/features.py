"""Feature front end: log-mel + CNN branch, two lightweight trainable wave
encoders with adapters, and channel-wise fusion with rate reduction.

All three branches meet the fusion layer at a common 50 Hz frame rate; the
fusion convolution owns the final rate reduction, so the activity matrices
used for training are built with ``frame_duration = stride / 50``.

The wave encoders are deliberately small stand-ins that expose the same
interface as large pretrained encoders (stacked hidden layers at 50 Hz), so
real weights can be substituted without touching the rest of the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import AlignmentError, ConfigError, DataError

ENCODER_RATE_HZ = 50

_LOG_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# Log-mel spectrogram
# ---------------------------------------------------------------------------

def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(
    sample_rate: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    fmax = fmax if fmax is not None else sample_rate / 2
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(
    sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None
) -> torch.Tensor:
    """Triangular mel filters (peak 1) as an (n_mels, n_fft//2 + 1) matrix."""
    fmax = fmax if fmax is not None else sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (fft_freqs - left) / max(center - left, 1e-9)
        falling = (right - fft_freqs) / max(right - center, 1e-9)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return torch.from_numpy(fb)


@dataclass
class MelSpectrogram:
    """Log-mel energies, shape (..., frames, n_mels)."""

    values: torch.Tensor
    hop: float
    n_mels: int


def melspectrogram(
    wave,
    sample_rate: int = 16000,
    n_mels: int = 64,
    win: float = 0.025,
    hop: float = 0.010,
) -> MelSpectrogram:
    """Magnitude STFT -> mel filterbank -> log with a 1e-10 floor.

    Uses no center padding: frames = floor((samples - win) / hop) + 1.
    """
    win_samples = int(round(win * sample_rate))
    hop_samples = int(round(hop * sample_rate))
    if win_samples < hop_samples:
        raise ConfigError(f"window ({win} s) must be at least the hop ({hop} s)")
    x = torch.as_tensor(np.asarray(wave)) if not torch.is_tensor(wave) else wave
    if not x.dtype.is_floating_point:
        x = x.double()
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-1] < win_samples:
        raise DataError(
            f"waveform of {x.shape[-1]} samples is shorter than one "
            f"{win_samples}-sample analysis window"
        )
    window = torch.hann_window(win_samples, dtype=x.dtype, device=x.device)
    spec = torch.stft(
        x,
        n_fft=win_samples,
        hop_length=hop_samples,
        win_length=win_samples,
        window=window,
        center=False,
        return_complex=True,
    )
    power = spec.abs() ** 2  # (B, F, T)
    fb = mel_filterbank(sample_rate, win_samples, n_mels).to(dtype=x.dtype, device=x.device)
    mel = torch.einsum("bft,mf->btm", power, fb)
    logmel = torch.log(torch.clamp(mel, min=_LOG_FLOOR))
    if squeeze:
        logmel = logmel.squeeze(0)
    return MelSpectrogram(logmel, hop, n_mels)


# ---------------------------------------------------------------------------
# CNN sound branch
# ---------------------------------------------------------------------------

class CnnSoundModule(nn.Module):
    """Small conv stack over (time, mel) pooled to the 50 Hz encoder rate;
    the mel axis collapses into channels.

    Time is pooled in the first block so the deeper (wider) convolutions run
    at the target rate, which matters on CPU.
    """

    def __init__(
        self,
        n_mels: int = 64,
        out_dim: int = 64,
        time_pool: int = 2,
        channels: tuple[int, int, int] = (16, 32, 48),
    ) -> None:
        super().__init__()
        if n_mels % 8 != 0:
            raise ConfigError(f"n_mels must be divisible by 8, got {n_mels}")
        self.time_pool = time_pool
        c1, c2, c3 = channels
        self.blocks = nn.Sequential(
            nn.Conv2d(1, c1, 3, padding=1),
            nn.GroupNorm(4, c1),
            nn.GELU(),
            nn.MaxPool2d((time_pool, 2)),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.GroupNorm(4, c2),
            nn.GELU(),
            nn.MaxPool2d((1, 2)),
            nn.Conv2d(c2, c3, 3, padding=1),
            nn.GroupNorm(4, c3),
            nn.GELU(),
            nn.MaxPool2d((1, 2)),
        )
        self.final_proj = nn.Linear(c3 * (n_mels // 8), out_dim)

    def forward(self, mel_values: torch.Tensor, hop: float) -> torch.Tensor:
        got_rate = 1.0 / hop
        want_rate = ENCODER_RATE_HZ * self.time_pool
        if not math.isclose(got_rate, want_rate, rel_tol=1e-6):
            raise AlignmentError(
                f"mel input rate {got_rate:.3f} Hz cannot reach {ENCODER_RATE_HZ} Hz "
                f"with pooling x{self.time_pool} (expected {want_rate:.3f} Hz input)"
            )
        x = mel_values.unsqueeze(1)  # (B, 1, T, M)
        x = self.blocks(x)  # (B, C, T', M/8)
        x = x.permute(0, 2, 1, 3).flatten(2)  # (B, T', C * M/8)
        return self.final_proj(x)


# ---------------------------------------------------------------------------
# Stub wave encoders
# ---------------------------------------------------------------------------

_STUB_SEEDS = {"sound": 17, "speech": 29}
_STUB_TOTAL_STRIDE = 320  # 16 kHz / 320 = 50 Hz


class StubEncoder(nn.Module):
    """Strided conv front end to 50 Hz plus residual blocks, exposing every
    block output as a hidden layer."""

    def __init__(
        self,
        kind: str,
        d_model: int = 128,
        n_layers: int = 4,
        sample_rate: int = 16000,
        seed: int | None = None,
    ) -> None:
        super().__init__()
        if kind not in _STUB_SEEDS:
            raise ConfigError(f"encoder kind must be 'sound' or 'speech', got {kind!r}")
        if sample_rate != _STUB_TOTAL_STRIDE * ENCODER_RATE_HZ:
            raise ConfigError(
                f"stub encoders assume {_STUB_TOTAL_STRIDE * ENCODER_RATE_HZ} Hz audio, "
                f"got {sample_rate}"
            )
        self.kind = kind
        self.n_layers = n_layers
        c1, c2 = max(16, d_model // 4), max(32, d_model // 2)
        self.frontend = nn.Sequential(
            nn.Conv1d(1, c1, 16, stride=8, padding=4),
            nn.GroupNorm(4, c1),
            nn.GELU(),
            nn.Conv1d(c1, c2, 8, stride=8),
            nn.GroupNorm(4, c2),
            nn.GELU(),
            nn.Conv1d(c2, d_model, 5, stride=5),
            nn.GroupNorm(4, d_model),
            nn.GELU(),
        )
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv1d(d_model, d_model, 3, padding=1),
                nn.GroupNorm(4, d_model),
                nn.GELU(),
            )
            for _ in range(n_layers)
        )
        self._reseed(seed if seed is not None else _STUB_SEEDS[kind])

    def _reseed(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Conv1d, nn.Linear)):
                    fan_in = module.weight.shape[1] * (
                        module.weight.shape[2] if module.weight.dim() > 2 else 1
                    )
                    bound = 1.0 / math.sqrt(fan_in)
                    module.weight.uniform_(-bound, bound, generator=g)
                    if module.bias is not None:
                        module.bias.zero_()

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """(B, samples) or (samples,) -> hidden layers (B, L, T50, d)."""
        x = wave.unsqueeze(0) if wave.dim() == 1 else wave
        if x.shape[-1] < _STUB_TOTAL_STRIDE:
            raise DataError(
                f"waveform of {x.shape[-1]} samples is shorter than one encoder frame"
            )
        h = self.frontend(x.unsqueeze(1))  # (B, d, T50)
        states = []
        for block in self.blocks:
            h = h + block(h)
            states.append(h)
        return torch.stack(states, dim=1).transpose(2, 3)  # (B, L, T, d)


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------

class BottleneckResidual(nn.Module):
    """Down-project, nonlinearity, up-project, residual add."""

    def __init__(self, dim: int, bottleneck_dim: int | None = None) -> None:
        super().__init__()
        bottleneck_dim = bottleneck_dim or max(1, dim // 4)
        self.down = nn.Linear(dim, bottleneck_dim)
        self.up = nn.Linear(bottleneck_dim, dim)
        # Small (not zero) init keeps the residual path near identity while
        # still passing gradient to the down projection from step one.
        nn.init.normal_(self.up.weight, std=0.02)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(torch.nn.functional.gelu(self.down(x)))


class SoundAdapter(nn.Module):
    """Two 1-D convs for temporal downsampling/alignment, a bottleneck
    residual, and a linear projection to the branch width."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int = 64,
        time_stride: int = 2,
        bottleneck_dim: int | None = None,
    ) -> None:
        super().__init__()
        self.time_stride = time_stride
        self.conv1 = nn.Conv1d(in_dim, in_dim, 3, stride=time_stride, padding=1)
        self.conv2 = nn.Conv1d(in_dim, in_dim, 3, stride=1, padding=1)
        self.bottleneck = BottleneckResidual(in_dim, bottleneck_dim)
        self.proj = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, C) -> (B, ceil-ish T/stride, out_dim)."""
        h = x.transpose(1, 2)
        h = self.conv2(torch.nn.functional.gelu(self.conv1(h)))
        h = h.transpose(1, 2)
        return self.proj(self.bottleneck(h))


class SpeakerAdapter(nn.Module):
    """Learnable softmax-weighted sum over encoder layers, then the same
    conv/bottleneck/projection chain as the sound adapter."""

    def __init__(
        self,
        n_layers: int,
        in_dim: int,
        out_dim: int = 64,
        time_stride: int = 2,
        bottleneck_dim: int | None = None,
    ) -> None:
        super().__init__()
        if n_layers < 1:
            raise ConfigError(f"need at least one encoder layer, got {n_layers}")
        self.layer_logits = nn.Parameter(torch.zeros(n_layers))
        self.head = SoundAdapter(in_dim, out_dim, time_stride, bottleneck_dim)

    @property
    def layer_weights(self) -> torch.Tensor:
        return torch.softmax(self.layer_logits, dim=0)

    def forward(self, layers: torch.Tensor) -> torch.Tensor:
        """(B, L, T, C) -> (B, T', out_dim)."""
        if layers.shape[1] != self.layer_logits.shape[0]:
            raise AlignmentError(
                f"got {layers.shape[1]} encoder layers, adapter expects "
                f"{self.layer_logits.shape[0]}"
            )
        weights = self.layer_weights.to(layers.dtype)
        mixed = torch.einsum("l,bltc->btc", weights, layers)
        return self.head(mixed)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

@dataclass
class FusedFeatures:
    """Fused frame features (B, T, D) with their frame duration in seconds."""

    values: torch.Tensor
    frame_duration: float


class FusionLayer(nn.Module):
    """Frame-wise channel concatenation followed by a strided 1-D conv that
    projects to the model width and reduces the frame rate by ``stride``."""

    def __init__(self, in_dims, d_model: int = 192, stride: int = 2) -> None:
        super().__init__()
        if stride < 1:
            raise ConfigError(f"fusion stride must be >= 1, got {stride}")
        self.stride = stride
        # kernel == stride implements exact floor(T / stride) output frames.
        self.conv = nn.Conv1d(sum(in_dims), d_model, kernel_size=max(1, stride), stride=stride)

    def forward(self, *streams: torch.Tensor) -> FusedFeatures:
        lengths = [s.shape[1] for s in streams]
        if max(lengths) - min(lengths) > 1:
            raise AlignmentError(
                f"feature streams misaligned beyond one frame: lengths {lengths}"
            )
        t = min(lengths)
        stacked = torch.cat([s[:, :t] for s in streams], dim=-1)
        fused = self.conv(stacked.transpose(1, 2)).transpose(1, 2)
        return FusedFeatures(fused, self.stride / ENCODER_RATE_HZ)


# ---------------------------------------------------------------------------
# Assembled front end
# ---------------------------------------------------------------------------

def _conv_out(n: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (n + 2 * padding - kernel) // stride + 1


class FeatureFrontEnd(nn.Module):
    """Waveform -> fused features, combining the mel-CNN branch with the two
    adapted wave-encoder branches at 50 Hz."""

    def __init__(
        self,
        sample_rate: int = 16000,
        n_mels: int = 64,
        win: float = 0.025,
        hop: float = 0.010,
        encoder_dim: int = 128,
        encoder_layers: int = 4,
        branch_dim: int = 64,
        d_model: int = 192,
        fusion_stride: int = 2,
    ) -> None:
        super().__init__()
        mel_rate = 1.0 / hop
        time_pool = int(round(mel_rate / ENCODER_RATE_HZ))
        if not math.isclose(mel_rate, time_pool * ENCODER_RATE_HZ, rel_tol=1e-6):
            raise ConfigError(
                f"mel hop {hop} s gives {mel_rate:.3f} Hz, not an integer multiple of "
                f"{ENCODER_RATE_HZ} Hz"
            )
        self.sample_rate = sample_rate
        self.n_mels = n_mels
        self.win = win
        self.hop = hop
        self.fusion_stride = fusion_stride
        self._win_samples = int(round(win * sample_rate))
        self._hop_samples = int(round(hop * sample_rate))
        self.cnn = CnnSoundModule(n_mels, branch_dim, time_pool)
        self.sound_encoder = StubEncoder("sound", encoder_dim, encoder_layers, sample_rate)
        self.speech_encoder = StubEncoder("speech", encoder_dim, encoder_layers, sample_rate)
        # Branches meet the fusion layer at the shared 50 Hz rate; rate
        # reduction happens once, in the fusion conv.
        self.sound_adapter = SoundAdapter(encoder_dim, branch_dim, time_stride=1)
        self.speaker_adapter = SpeakerAdapter(
            encoder_layers, encoder_dim, branch_dim, time_stride=1
        )
        self.fusion = FusionLayer([branch_dim] * 3, d_model, fusion_stride)

    @property
    def frame_duration(self) -> float:
        return self.fusion_stride / ENCODER_RATE_HZ

    def _padded_mel(self, wave: torch.Tensor) -> MelSpectrogram:
        # Pad by win - hop so mel frames = floor(samples / hop), keeping the
        # mel branch aligned with the stride arithmetic of the wave encoders.
        pad = self._win_samples - self._hop_samples
        padded = torch.nn.functional.pad(wave, (pad // 2, pad - pad // 2))
        return melspectrogram(padded, self.sample_rate, self.n_mels, self.win, self.hop)

    def forward(self, wave: torch.Tensor) -> FusedFeatures:
        x = wave.unsqueeze(0) if wave.dim() == 1 else wave
        mel = self._padded_mel(x)
        cnn_f = self.cnn(mel.values, mel.hop)
        sound_f = self.sound_adapter(self.sound_encoder(x)[:, -1])
        speaker_f = self.speaker_adapter(self.speech_encoder(x))
        return self.fusion(cnn_f, sound_f, speaker_f)

    def speaker_branch(self, wave: torch.Tensor) -> torch.Tensor:
        """Adapted speaker-branch features at 50 Hz, used for enrollment
        embeddings."""
        x = wave.unsqueeze(0) if wave.dim() == 1 else wave
        return self.speaker_adapter(self.speech_encoder(x))

    def branch_frames(self, n_samples: int) -> tuple[int, int]:
        """(mel-CNN frames, wave-encoder frames) at 50 Hz for a wave length."""
        cnn_t = (n_samples // self._hop_samples) // self.cnn.time_pool
        t = _conv_out(n_samples, 16, 8, 4)
        t = _conv_out(t, 8, 8)
        t = _conv_out(t, 5, 5)
        return cnn_t, t

    def output_frames(self, n_samples: int) -> int:
        cnn_t, stub_t = self.branch_frames(n_samples)
        return min(cnn_t, stub_t) // self.fusion_stride
