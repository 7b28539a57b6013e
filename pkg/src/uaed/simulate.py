"""Scene simulation: multi-speaker conversations plus sound events at
controlled SNR, with exact ground-truth timelines and per-speaker enrollment
audio.

Sources are either synthetic (harmonic voices, parametric event textures)
or ingested from directories of WAV files. All randomness flows through a
caller-provided :class:`numpy.random.Generator`, so every operation is a
pure function of its inputs and the seed.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import ConfigError, DataError
from .timeline import Interval, Timeline, Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_UTTERANCE_SECONDS = 32.0
MIN_ENROLLMENT_SECONDS = 3.0

# Sampling ranges for event plans (durations in seconds, SNR in dB).
BACKGROUND_DURATION_RANGE = (10.0, 30.0)
BACKGROUND_SNR_RANGE = (10.0, 15.0)
FOREGROUND_DURATION_RANGE = (1.0, 5.0)
FOREGROUND_SNR_RANGE = (0.0, 5.0)


@dataclass(frozen=True)
class ConversationStats:
    """Turn-taking statistics: log-normal turn lengths, exponential gaps,
    and exponential overlaps entered with a fixed probability."""

    turn_mu: float = 0.8        # log-seconds
    turn_sigma: float = 0.6     # log-seconds
    gap_mean: float = 1.0       # seconds
    overlap_prob: float = 0.2
    overlap_mean: float = 0.5   # seconds

    def __post_init__(self) -> None:
        if self.turn_sigma <= 0 or self.gap_mean <= 0 or self.overlap_mean <= 0:
            raise ConfigError("conversation scale parameters must be positive")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ConfigError(f"overlap_prob must be in [0, 1], got {self.overlap_prob}")


@dataclass
class PlannedEvent:
    label: str
    start: float
    duration: float
    snr_db: float
    role: str  # "background" | "foreground"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "start": round(self.start, 6),
            "duration": round(self.duration, 6),
            "snr_db": round(self.snr_db, 6),
            "role": self.role,
        }


@dataclass
class EventPlan:
    background: list[PlannedEvent] = field(default_factory=list)
    foreground: list[PlannedEvent] = field(default_factory=list)

    @property
    def events(self) -> list[PlannedEvent]:
        return self.background + self.foreground

    def to_dict(self) -> dict:
        return {
            "background": [e.to_dict() for e in self.background],
            "foreground": [e.to_dict() for e in self.foreground],
        }


@dataclass
class PlacedEvent:
    """A sound event as actually mixed: final span, gain, and the scaled
    clean component (for SNR verification)."""

    label: str
    start: float
    duration: float
    snr_db: float
    role: str
    gain: float
    start_index: int
    clean: np.ndarray

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "start": round(self.start, 6),
            "duration": round(self.duration, 6),
            "snr_db": round(self.snr_db, 6),
            "role": self.role,
            "gain": round(self.gain, 9),
        }


@dataclass
class Mixture:
    """Rendered scene: waveform, ground truth, enrollments, and the clean
    components the mixture was assembled from."""

    waveform: np.ndarray
    ground_truth: Timeline
    enrollments: dict[str, np.ndarray]
    sample_rate: int
    events: list[PlacedEvent] = field(default_factory=list)
    speech_tracks: dict[str, np.ndarray] = field(default_factory=dict)
    speech_reference: np.ndarray | None = None
    normalization_gain: float = 1.0

    def __post_init__(self) -> None:
        got = len(self.waveform) / self.sample_rate
        if not math.isclose(got, self.ground_truth.total_duration, abs_tol=1.0 / self.sample_rate):
            raise DataError(
                f"waveform spans {got:.6f} s but ground truth says "
                f"{self.ground_truth.total_duration:.6f} s"
            )


# ---------------------------------------------------------------------------
# Synthetic sources
# ---------------------------------------------------------------------------

def _key_rng(seed_key: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng((seed_key + salt) % (2**63))


@dataclass(frozen=True)
class SpeakerVoice:
    """Harmonic voice with a fixed fundamental and formant-like coloring."""

    speaker_id: str
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    seed_key: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def render(self, duration: float, rng: np.random.Generator) -> np.ndarray:
        n = int(round(duration * self.sample_rate))
        if n <= 0:
            raise DataError(f"cannot render {duration} s of speech")
        t = np.arange(n) / self.sample_rate
        vib_phase = rng.uniform(0, 2 * np.pi)
        f0_t = self.f0 * (1.0 + 0.03 * np.sin(2 * np.pi * 5.0 * t + vib_phase))
        phase = 2 * np.pi * np.cumsum(f0_t) / self.sample_rate
        n_harm = max(3, min(int(4000.0 / self.f0), 30))
        wave = np.zeros(n)
        for h in range(1, n_harm + 1):
            freq = h * self.f0
            gain = 0.03
            for fc, bw in zip(self.formants, self.bandwidths):
                gain += np.exp(-0.5 * ((freq - fc) / bw) ** 2)
            gain /= math.sqrt(h)
            wave += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        rate = rng.uniform(2.5, 4.5)
        syllables = 0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        wave *= 0.35 + 0.65 * syllables ** 1.5
        peak = np.abs(wave).max()
        level = rng.uniform(0.55, 0.85)
        return (wave * (level / peak)) if peak > 0 else wave

    def signature(self, dim: int) -> np.ndarray:
        vec = _key_rng(self.seed_key).standard_normal(dim)
        return vec / np.linalg.norm(vec)


@dataclass(frozen=True)
class EventTexture:
    """Parametric non-speech source with a class-specific spectro-temporal
    signature."""

    label: str
    kind: str  # band_noise | tone_complex | am_noise | pulse_train
    center: float
    width: float
    am_rate: float
    seed_key: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def render(self, duration: float, rng: np.random.Generator) -> np.ndarray:
        n = int(round(duration * self.sample_rate))
        if n <= 0:
            raise DataError(f"cannot render {duration} s of event audio")
        t = np.arange(n) / self.sample_rate
        if self.kind == "tone_complex":
            ratios = (1.0, 1.63, 2.41)
            wave = np.zeros(n)
            for k, r in enumerate(ratios):
                freq = self.center * r * rng.uniform(0.995, 1.005)
                wave += np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)) / (k + 1)
            wave *= 0.6 + 0.4 * np.sin(2 * np.pi * self.am_rate * t + rng.uniform(0, 2 * np.pi))
        else:
            wave = self._band_noise(n, rng)
            if self.kind == "am_noise":
                am = 0.5 + 0.5 * np.sin(2 * np.pi * self.am_rate * t + rng.uniform(0, 2 * np.pi))
                wave *= 0.15 + 0.85 * am**2
            elif self.kind == "pulse_train":
                period = 1.0 / self.am_rate
                burst = 0.3 * period
                envelope = np.exp(-((t + rng.uniform(0, period)) % period) / (0.35 * burst))
                envelope[envelope < 0.02] = 0.0
                wave *= 0.05 + envelope
        peak = np.abs(wave).max()
        level = rng.uniform(0.6, 0.9)
        return (wave * (level / peak)) if peak > 0 else wave

    def _band_noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(n)
        nyq = self.sample_rate / 2
        lo = max(40.0, self.center - self.width / 2)
        hi = min(nyq - 100.0, self.center + self.width / 2)
        sos = sps.butter(4, [lo / nyq, hi / nyq], btype="bandpass", output="sos")
        return sps.sosfilt(sos, noise)


class RecordedSource:
    """Audio drawn from real recordings of one speaker or one event class."""

    def __init__(self, name: str, clips: list[np.ndarray], sample_rate: int) -> None:
        if not clips:
            raise DataError(f"no usable audio clips for {name!r}")
        self.name = name
        self.clips = clips
        self.sample_rate = sample_rate

    def render(self, duration: float, rng: np.random.Generator) -> np.ndarray:
        n = int(round(duration * self.sample_rate))
        clip = self.clips[int(rng.integers(len(self.clips)))]
        if len(clip) < n:
            clip = np.tile(clip, math.ceil(n / len(clip)))
        offset = int(rng.integers(0, len(clip) - n + 1)) if len(clip) > n else 0
        return clip[offset: offset + n].astype(np.float64)

    def signature(self, dim: int) -> np.ndarray:
        digest = hashlib.sha256(self.name.encode()).digest()
        vec = np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(dim)
        return vec / np.linalg.norm(vec)


@dataclass
class SourcePool:
    """Speech sources per speaker and event sources per sound class, all
    mono at a common sample rate."""

    sample_rate: int
    speech_sources: dict
    event_sources: dict

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(self.speech_sources)

    @property
    def sound_classes(self) -> tuple[str, ...]:
        return tuple(self.event_sources)

    def render_speech(self, speaker: str, duration: float, rng: np.random.Generator) -> np.ndarray:
        if speaker not in self.speech_sources:
            raise DataError(f"unknown speaker {speaker!r} (pool has {self.speakers})")
        return self.speech_sources[speaker].render(duration, rng)

    def render_event(self, label: str, duration: float, rng: np.random.Generator) -> np.ndarray:
        if label not in self.event_sources:
            raise DataError(f"unknown sound class {label!r} (pool has {self.sound_classes})")
        return self.event_sources[label].render(duration, rng)

    def speaker_signature(self, speaker: str, dim: int) -> np.ndarray:
        if speaker not in self.speech_sources:
            raise DataError(f"unknown speaker {speaker!r} (pool has {self.speakers})")
        return self.speech_sources[speaker].signature(dim)


def longterm_spectrum(wave: np.ndarray, sample_rate: int) -> np.ndarray:
    """Unit-norm Welch magnitude spectrum, used to compare source timbres."""
    _, psd = sps.welch(wave, fs=sample_rate, nperseg=1024)
    mag = np.sqrt(psd)
    return mag / np.linalg.norm(mag)


def _spectral_cosine(a, b, sample_rate: int) -> float:
    probe_rng = np.random.default_rng(90210)
    sa = longterm_spectrum(a.render(2.0, probe_rng), sample_rate)
    sb = longterm_spectrum(b.render(2.0, probe_rng), sample_rate)
    return float(np.dot(sa, sb))


_TEXTURE_KINDS = ("band_noise", "tone_complex", "am_noise", "pulse_train")


def synthesize_sources(
    vocab: Vocabulary,
    n_speakers: int | None = None,
    rng: np.random.Generator | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> SourcePool:
    """Build a fully synthetic source pool for the vocabulary.

    Speakers get harmonic voices with spread fundamentals; each sound class
    gets a distinct texture. Pairwise long-term-spectrum similarity below
    0.95 is checked at generation time.
    """
    rng = rng or np.random.default_rng(0)
    speaker_ids = vocab.speaker_ids
    if not speaker_ids:
        if n_speakers is None:
            raise ConfigError("vocabulary has no speakers and n_speakers not given")
        speaker_ids = tuple(f"spk{i + 1}" for i in range(n_speakers))
    elif n_speakers is not None and n_speakers != len(speaker_ids):
        raise ConfigError(
            f"n_speakers={n_speakers} conflicts with vocabulary speakers {speaker_ids}"
        )

    speech: dict[str, SpeakerVoice] = {}
    n_spk = len(speaker_ids)
    f0_grid = np.linspace(95.0, 270.0, n_spk) if n_spk > 1 else np.array([140.0])
    for i, spk in enumerate(speaker_ids):
        speech[spk] = SpeakerVoice(
            speaker_id=spk,
            f0=float(f0_grid[i] * rng.uniform(0.98, 1.02)),
            formants=(
                float(rng.uniform(330, 800)),
                float(rng.uniform(900, 2200)),
                float(rng.uniform(2300, 3100)),
            ),
            bandwidths=tuple(float(b * rng.uniform(0.8, 1.2)) for b in (90, 120, 160)),
            seed_key=int(rng.integers(2**31 - 1)),
            sample_rate=sample_rate,
        )

    events: dict[str, EventTexture] = {}
    n_cls = len(vocab.sound_classes)
    centers = np.geomspace(350.0, 6000.0, n_cls) if n_cls > 1 else np.array([1000.0])
    for i, label in enumerate(vocab.sound_classes):
        events[label] = EventTexture(
            label=label,
            kind=_TEXTURE_KINDS[i % len(_TEXTURE_KINDS)],
            center=float(centers[i] * rng.uniform(0.97, 1.03)),
            width=float(centers[i] * rng.uniform(0.25, 0.45)),
            am_rate=float(rng.uniform(2.0, 14.0)),
            seed_key=int(rng.integers(2**31 - 1)),
            sample_rate=sample_rate,
        )

    for group in (list(speech.values()), list(events.values())):
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                cos = _spectral_cosine(a, b, sample_rate)
                if cos >= 0.95:
                    raise DataError(
                        f"generated sources are not distinguishable "
                        f"(cosine {cos:.3f} between {a!r} and {b!r})"
                    )
    return SourcePool(sample_rate, speech, events)


# ---------------------------------------------------------------------------
# Conversation scheduling and rendering
# ---------------------------------------------------------------------------

def schedule_conversation(
    stats: ConversationStats,
    speakers: tuple[str, ...] | list[str],
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> list[tuple[str, Interval]]:
    """Draw the turn layout only (no audio). Turn boundaries are quantized
    to whole samples so labels match rendered tracks exactly."""
    if duration <= 0:
        raise ConfigError(f"duration must be positive, got {duration}")
    if not speakers:
        raise ConfigError("need at least one speaker")
    n_total = int(round(duration * sample_rate))
    initial_order = list(rng.permutation(list(speakers)))
    entries: list[tuple[str, Interval]] = []
    prev_spk: str | None = None
    prev_start = prev_end = 0.0
    turn = 0
    while True:
        if turn < len(initial_order):
            spk = str(initial_order[turn])
        else:
            choices = [s for s in speakers if s != prev_spk] or list(speakers)
            spk = str(choices[int(rng.integers(len(choices)))])
        dur = float(rng.lognormal(stats.turn_mu, stats.turn_sigma))
        if entries and rng.random() < stats.overlap_prob:
            overlap = float(rng.exponential(stats.overlap_mean))
            overlap = min(overlap, 0.8 * (prev_end - prev_start), 0.8 * dur)
            start = max(prev_end - overlap, 0.0)
        else:
            start = prev_end + float(rng.exponential(stats.gap_mean))
        if start >= duration:
            break
        s_idx = int(round(start * sample_rate))
        e_idx = min(int(round((start + dur) * sample_rate)), n_total)
        if e_idx > s_idx:
            iv = Interval(s_idx / sample_rate, e_idx / sample_rate)
            entries.append((spk, iv))
            prev_spk, prev_start, prev_end = spk, iv.onset, iv.offset
        turn += 1
    return entries


def simulate_conversation(
    pool: SourcePool,
    stats: ConversationStats,
    speakers: tuple[str, ...] | list[str],
    duration: float,
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], Timeline]:
    """Render per-speaker clean tracks plus the speaker timeline."""
    sr = pool.sample_rate
    schedule = schedule_conversation(stats, speakers, duration, rng, sr)
    n_total = int(round(duration * sr))
    tracks = {spk: np.zeros(n_total) for spk in speakers}
    for spk, iv in schedule:
        wave = pool.render_speech(spk, iv.duration, rng)
        s_idx = int(round(iv.onset * sr))
        tracks[spk][s_idx: s_idx + len(wave)] += wave
    timeline = Timeline(list(schedule), duration)
    return tracks, timeline


# ---------------------------------------------------------------------------
# Event planning and SNR mixing
# ---------------------------------------------------------------------------

def sample_event_plan(
    sound_classes: tuple[str, ...] | list[str],
    background_classes: tuple[str, ...] | list[str],
    duration: float,
    rng: np.random.Generator,
) -> EventPlan:
    """Draw 0-1 background and 1-2 foreground events with uniform durations,
    SNRs, and start times inside their configured ranges."""
    if not background_classes:
        raise ConfigError("background_classes must be a nonempty subset of sound classes")
    missing = set(background_classes) - set(sound_classes)
    if missing:
        raise ConfigError(f"background classes {sorted(missing)} not among sound classes")
    if duration <= 0:
        raise ConfigError(f"duration must be positive, got {duration}")

    def draw(classes, dur_range, snr_range, role) -> PlannedEvent:
        label = str(classes[int(rng.integers(len(classes)))])
        dur = float(rng.uniform(*dur_range))
        snr = float(rng.uniform(*snr_range))
        dur = min(dur, duration)
        start = float(rng.uniform(0.0, duration - dur)) if duration > dur else 0.0
        return PlannedEvent(label, start, dur, snr, role)

    plan = EventPlan()
    if int(rng.integers(0, 2)):
        plan.background.append(
            draw(background_classes, BACKGROUND_DURATION_RANGE, BACKGROUND_SNR_RANGE, "background")
        )
    for _ in range(int(rng.integers(1, 3))):
        plan.foreground.append(
            draw(sound_classes, FOREGROUND_DURATION_RANGE, FOREGROUND_SNR_RANGE, "foreground")
        )
    return plan


def snr_gain(base_segment: np.ndarray, event: np.ndarray, snr_db: float) -> float:
    """Gain applying ``snr_db`` between the base segment's power and the
    scaled event's power over the event span."""
    p_base = float(np.mean(np.asarray(base_segment, dtype=np.float64) ** 2))
    p_event = float(np.mean(np.asarray(event, dtype=np.float64) ** 2))
    if p_base <= 0.0:
        raise DataError("base signal is silent over the event span; SNR undefined")
    if p_event <= 0.0:
        raise DataError("event signal is silent; SNR undefined")
    return math.sqrt(p_base / (p_event * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(
    base: np.ndarray,
    event: np.ndarray,
    event_start: float,
    snr_db: float,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> np.ndarray:
    """Add ``event`` into a copy of ``base`` at the requested SNR, truncating
    the event at the end of the base signal if needed."""
    start_idx = int(round(event_start * sample_rate))
    if not 0 <= start_idx < len(base):
        raise DataError(f"event start {event_start} s lies outside the base signal")
    event = np.asarray(event)[: len(base) - start_idx]
    segment = base[start_idx: start_idx + len(event)]
    gain = snr_gain(segment, event, snr_db)
    out = np.array(base, dtype=np.float64, copy=True)
    out[start_idx: start_idx + len(event)] += gain * event
    return out


# ---------------------------------------------------------------------------
# Full utterance rendering
# ---------------------------------------------------------------------------

def render_utterance(
    pool: SourcePool,
    stats: ConversationStats,
    *,
    speakers: tuple[str, ...] | list[str] | None = None,
    sound_classes: tuple[str, ...] | list[str] | None = None,
    background_classes: tuple[str, ...] | list[str] | None = None,
    duration: float = DEFAULT_UTTERANCE_SECONDS,
    rng: np.random.Generator,
    plan: EventPlan | None = None,
    enroll_duration: float = 4.0,
    max_placement_retries: int = 100,
) -> Mixture:
    """Render one scene: conversation plus planned events plus enrollments.

    When ``plan`` is supplied it is honored verbatim (a silent base under an
    event then raises); auto-sampled plans re-draw an event's start time if
    it lands on silence.
    """
    if enroll_duration < MIN_ENROLLMENT_SECONDS:
        raise ConfigError(
            f"enrollments must be at least {MIN_ENROLLMENT_SECONDS} s, got {enroll_duration}"
        )
    sr = pool.sample_rate
    speakers = tuple(speakers or pool.speakers)
    sound_classes = tuple(sound_classes or pool.sound_classes)

    tracks, speaker_timeline = simulate_conversation(pool, stats, speakers, duration, rng)
    speech_mix = np.sum(list(tracks.values()), axis=0)
    n_total = len(speech_mix)

    forced = plan is not None
    if plan is None:
        if background_classes is None:
            raise ConfigError("background_classes required when sampling an event plan")
        plan = sample_event_plan(sound_classes, background_classes, duration, rng)

    placed: list[PlacedEvent] = []
    event_sum = np.zeros(n_total)
    for ev in plan.events:
        wave = pool.render_event(ev.label, ev.duration, rng)
        start_idx = int(round(ev.start * sr))
        wave = wave[: n_total - start_idx]
        retries = 0 if forced else max_placement_retries
        for attempt in range(retries + 1):
            segment = speech_mix[start_idx: start_idx + len(wave)]
            if np.mean(segment**2) > 0.0:
                break
            if attempt == retries:
                raise DataError(
                    f"no speech under event {ev.label!r} at {start_idx / sr:.3f} s; "
                    "SNR undefined"
                )
            start_idx = int(rng.integers(0, n_total - len(wave) + 1))
        gain = snr_gain(segment, wave, ev.snr_db)
        scaled = gain * wave
        event_sum[start_idx: start_idx + len(scaled)] += scaled
        placed.append(
            PlacedEvent(
                label=ev.label,
                start=start_idx / sr,
                duration=len(scaled) / sr,
                snr_db=ev.snr_db,
                role=ev.role,
                gain=gain,
                start_index=start_idx,
                clean=scaled,
            )
        )

    mixture = speech_mix + event_sum
    norm_gain = 1.0
    peak = float(np.abs(mixture).max()) if n_total else 0.0
    if peak > 1.0:
        norm_gain = 0.9 / peak
        mixture *= norm_gain
        speech_mix = speech_mix * norm_gain
        tracks = {spk: tr * norm_gain for spk, tr in tracks.items()}
        for ev in placed:
            ev.clean = ev.clean * norm_gain

    entries = list(speaker_timeline.entries)
    entries.extend(
        (ev.label, Interval(ev.start, ev.start + ev.duration)) for ev in placed
    )
    timeline = Timeline(entries, duration)

    enrollments = {
        spk: pool.render_speech(spk, enroll_duration, rng).astype(np.float32)
        for spk in speakers
    }
    return Mixture(
        waveform=mixture.astype(np.float32),
        ground_truth=timeline,
        enrollments=enrollments,
        sample_rate=sr,
        events=placed,
        speech_tracks={s: t.astype(np.float32) for s, t in tracks.items()},
        speech_reference=speech_mix.astype(np.float32),
        normalization_gain=norm_gain,
    )


def measured_snr_db(mixture: Mixture, event: PlacedEvent) -> float:
    """Recompute an event's SNR from the stored clean components."""
    a, b = event.start_index, event.start_index + len(event.clean)
    ref = np.asarray(mixture.speech_reference[a:b], dtype=np.float64)
    ev = np.asarray(event.clean, dtype=np.float64)
    return 10.0 * math.log10(np.mean(ref**2) / np.mean(ev**2))


# ---------------------------------------------------------------------------
# WAV I/O and corpus ingestion
# ---------------------------------------------------------------------------

def write_wav(path: str | Path, wave: np.ndarray, sample_rate: int) -> None:
    wavfile.write(str(path), sample_rate, np.asarray(wave, dtype=np.float32))


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a WAV file as mono float32 in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        logger.warning("%s is not mono; downmixing %d channels", path, data.shape[1])
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    return data.astype(np.float32), rate


def _resample(wave: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return wave
    g = math.gcd(src_rate, dst_rate)
    return sps.resample_poly(wave, dst_rate // g, src_rate // g)


def _load_source_dir(root: Path, sample_rate: int) -> dict[str, RecordedSource]:
    sources: dict[str, RecordedSource] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        clips = []
        for f in sorted(sub.glob("*.wav")):
            try:
                wave, rate = read_wav(f)
            except Exception as exc:  # unreadable or unsupported file
                logger.warning("skipping %s: %s", f, exc)
                continue
            clips.append(_resample(wave, rate, sample_rate).astype(np.float64))
        if not clips:
            raise DataError(f"class directory {sub} contains no usable WAV files")
        sources[sub.name] = RecordedSource(sub.name, clips, sample_rate)
    return sources


def ingest_corpus(
    speech_dir: str | Path,
    event_dir: str | Path,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> SourcePool:
    """Build a pool from ``speech_dir/<speaker>/*.wav`` and
    ``event_dir/<class>/*.wav``, resampling to the pool rate."""
    speech = _load_source_dir(Path(speech_dir), sample_rate)
    if not speech:
        raise DataError(f"no speaker subdirectories with audio under {speech_dir}")
    events = _load_source_dir(Path(event_dir), sample_rate)
    if not events:
        raise DataError(f"no sound class subdirectories with audio under {event_dir}")
    return SourcePool(sample_rate, speech, events)
