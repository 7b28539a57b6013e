"""Event intervals, frame activity matrices, and conversions between them.

A :class:`Timeline` is the canonical list-of-labelled-intervals form of a
reference or hypothesis; an :class:`ActivityMatrix` is its frame-level binary
form. Conversions use a frame-center containment rule so the round trip
matrix -> timeline -> matrix is exact. Intervals are half-open
``[onset, offset)`` throughout.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .errors import ConfigError, DataError

# Label used for the merged speech activity produced by derive_sed().
SPEECH_LABEL = "speech"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered label set: sound event classes followed by speaker ids.

    The concatenated order is stable and defines the row index of every
    label in activity matrices.
    """

    sound_classes: tuple[str, ...]
    speaker_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sound_classes", tuple(self.sound_classes))
        object.__setattr__(self, "speaker_ids", tuple(self.speaker_ids))
        labels = self.labels
        if not labels:
            raise ConfigError("vocabulary must contain at least one label")
        if len(set(labels)) != len(labels):
            raise ConfigError(
                "vocabulary labels must be unique across sound classes and speakers"
            )
        object.__setattr__(self, "_row", {lab: i for i, lab in enumerate(labels)})

    @property
    def labels(self) -> tuple[str, ...]:
        return self.sound_classes + self.speaker_ids

    @property
    def size(self) -> int:
        return len(self.sound_classes) + len(self.speaker_ids)

    def index(self, label: str) -> int:
        try:
            return self._row[label]  # type: ignore[attr-defined]
        except KeyError:
            raise DataError(f"unknown label {label!r} (not in vocabulary)") from None

    def __contains__(self, label: str) -> bool:
        return label in self._row  # type: ignore[attr-defined]

    def is_speaker(self, label: str) -> bool:
        return label in self.speaker_ids


@dataclass(frozen=True, order=True)
class Interval:
    """Half-open time span ``[onset, offset)`` in seconds."""

    onset: float
    offset: float

    def __post_init__(self) -> None:
        if self.onset < 0:
            raise DataError(f"interval onset must be >= 0, got {self.onset}")
        if not self.offset > self.onset:
            raise DataError(
                f"interval offset must exceed onset, got [{self.onset}, {self.offset})"
            )

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def overlap(self, other: "Interval") -> float:
        """Length of the intersection with ``other`` (0 if disjoint)."""
        return max(0.0, min(self.offset, other.offset) - max(self.onset, other.onset))


@dataclass
class Timeline:
    """Labelled intervals over ``[0, total_duration]``.

    Entries of the same label may overlap; :meth:`normalized` returns the
    unique form where same-label intervals are disjoint, merged, and sorted.
    """

    entries: list[tuple[str, Interval]]
    total_duration: float

    def __post_init__(self) -> None:
        if self.total_duration <= 0:
            raise DataError(f"total_duration must be positive, got {self.total_duration}")
        for label, iv in self.entries:
            if iv.offset > self.total_duration + 1e-9:
                raise DataError(
                    f"interval [{iv.onset}, {iv.offset}) of {label!r} exceeds "
                    f"total duration {self.total_duration}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, Interval]]:
        return iter(self.entries)

    def labels(self) -> tuple[str, ...]:
        """Distinct labels in first-appearance order."""
        seen: dict[str, None] = {}
        for label, _ in self.entries:
            seen.setdefault(label)
        return tuple(seen)

    def for_label(self, label: str) -> list[Interval]:
        return [iv for lab, iv in self.entries if lab == label]

    def normalized(self) -> "Timeline":
        """Merge overlapping/adjacent same-label intervals; sort by (label, onset)."""
        merged: list[tuple[str, Interval]] = []
        for label in sorted(self.labels()):
            merged.extend((label, iv) for iv in merge_intervals(self.for_label(label)))
        return Timeline(merged, self.total_duration)


def merge_intervals(intervals: Sequence[Interval]) -> list[Interval]:
    """Union of half-open intervals as a sorted disjoint list."""
    if not intervals:
        return []
    spans = sorted((iv.onset, iv.offset) for iv in intervals)
    out: list[list[float]] = [list(spans[0])]
    for onset, offset in spans[1:]:
        if onset <= out[-1][1]:
            out[-1][1] = max(out[-1][1], offset)
        else:
            out.append([onset, offset])
    return [Interval(a, b) for a, b in out]


@dataclass
class ActivityMatrix:
    """Binary frame activity, one row per vocabulary label."""

    values: np.ndarray  # (N, T), entries in {0, 1}
    frame_duration: float
    vocab: Vocabulary

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DataError(f"activity matrix must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] != self.vocab.size:
            raise DataError(
                f"activity matrix has {self.values.shape[0]} rows for a "
                f"vocabulary of size {self.vocab.size}"
            )
        if self.frame_duration <= 0:
            raise ConfigError(f"frame_duration must be positive, got {self.frame_duration}")
        if not np.isin(self.values, (0, 1)).all():
            raise DataError("activity matrix entries must be 0 or 1")
        self.values = self.values.astype(np.int8)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class ProbabilityMatrix:
    """Frame-level event probabilities, strictly inside (0, 1)."""

    values: np.ndarray  # (N, T)
    frame_duration: float
    vocab: Vocabulary

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.vocab.size:
            raise DataError(
                f"probability matrix shape {self.values.shape} does not match "
                f"vocabulary size {self.vocab.size}"
            )
        if self.frame_duration <= 0:
            raise ConfigError(f"frame_duration must be positive, got {self.frame_duration}")
        if not ((self.values > 0.0) & (self.values < 1.0)).all():
            raise DataError("probabilities must lie strictly inside (0, 1)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def timeline_to_matrix(
    timeline: Timeline, vocab: Vocabulary, frame_duration: float
) -> ActivityMatrix:
    """Rasterize a timeline: frame k of row n is 1 iff some interval of label n
    contains the frame center ``(k + 0.5) * frame_duration``."""
    if frame_duration <= 0:
        raise ConfigError(f"frame_duration must be positive, got {frame_duration}")
    n_frames = max(1, math.ceil(timeline.total_duration / frame_duration - 1e-9))
    values = np.zeros((vocab.size, n_frames), dtype=np.int8)
    centers = (np.arange(n_frames) + 0.5) * frame_duration
    for label, iv in timeline.entries:
        row = vocab.index(label)
        values[row] |= (centers >= iv.onset) & (centers < iv.offset)
    return ActivityMatrix(values, frame_duration, vocab)


def matrix_to_timeline(matrix: ActivityMatrix) -> Timeline:
    """Turn maximal runs of 1s into intervals ``[k_start*d, (k_end+1)*d)``."""
    d = matrix.frame_duration
    entries: list[tuple[str, Interval]] = []
    for row, label in enumerate(matrix.vocab.labels):
        active = matrix.values[row] != 0
        if not active.any():
            continue
        padded = np.concatenate(([False], active, [False]))
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for start, stop in zip(edges[::2], edges[1::2]):
            entries.append((label, Interval(start * d, stop * d)))
    total = matrix.n_frames * d
    return Timeline(entries, total)


def binarize(
    probs: ProbabilityMatrix, threshold: float = 0.5, median_filter_frames: int = 1
) -> ActivityMatrix:
    """Threshold probabilities (strict ``>``) and median-filter each row.

    ``median_filter_frames`` must be odd; a window of 1 disables filtering.
    Window edges are handled by replication.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    if median_filter_frames < 1 or median_filter_frames % 2 == 0:
        raise ConfigError(
            f"median filter window must be an odd integer >= 1, got {median_filter_frames}"
        )
    active = (probs.values > threshold).astype(np.int8)
    if median_filter_frames > 1:
        active = median_filter(active, size=(1, median_filter_frames), mode="nearest")
    return ActivityMatrix(active, probs.frame_duration, probs.vocab)


def derive_sed(timeline: Timeline, vocab: Vocabulary) -> Timeline:
    """Collapse all speaker intervals into merged ``speech`` intervals.

    Sound-event entries pass through unchanged.
    """
    speech: list[Interval] = []
    entries: list[tuple[str, Interval]] = []
    for label, iv in timeline.entries:
        if vocab.is_speaker(label):
            speech.append(iv)
        else:
            entries.append((label, iv))
    entries.extend((SPEECH_LABEL, iv) for iv in merge_intervals(speech))
    return Timeline(entries, timeline.total_duration)


def derive_sd(timeline: Timeline, vocab: Vocabulary) -> Timeline:
    """Keep only speaker intervals, normalized per speaker, labels preserved."""
    speakers = Timeline(
        [(lab, iv) for lab, iv in timeline.entries if vocab.is_speaker(lab)],
        timeline.total_duration,
    )
    return speakers.normalized()


# ---------------------------------------------------------------------------
# Label file I/O: one event per line, "onset<TAB>offset<TAB>label".
# ---------------------------------------------------------------------------

def format_label_file(timeline: Timeline) -> str:
    lines = [
        f"{iv.onset:.6f}\t{iv.offset:.6f}\t{label}"
        for label, iv in sorted(timeline.entries, key=lambda e: (e[1].onset, e[1].offset, e[0]))
    ]
    return "".join(line + "\n" for line in lines)


def write_label_file(timeline: Timeline, path: str | Path) -> None:
    Path(path).write_text(format_label_file(timeline))


def read_label_file(path: str | Path, total_duration: float | None = None) -> Timeline:
    """Parse a tab-separated label file; raises :class:`DataError` with the
    offending line number on malformed input."""
    entries: list[tuple[str, Interval]] = []
    max_offset = 0.0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(
                f"{path}: line {lineno}: expected 'onset<TAB>offset<TAB>label', got {raw!r}"
            )
        try:
            onset, offset = float(parts[0]), float(parts[1])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-numeric onset/offset in {raw!r}") from None
        try:
            entries.append((parts[2], Interval(onset, offset)))
        except DataError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        max_offset = max(max_offset, offset)
    if total_duration is None:
        total_duration = max_offset if max_offset > 0 else 1.0
    return Timeline(entries, total_duration)


# ---------------------------------------------------------------------------
# RTTM I/O for speaker timelines.
# ---------------------------------------------------------------------------

_RTTM_FIELDS = re.compile(r"\s+")


def format_rttm(timeline: Timeline, file_id: str = "utt") -> str:
    lines = [
        f"SPEAKER {file_id} 1 {iv.onset:.3f} {iv.duration:.3f} <NA> <NA> {label} <NA> <NA>"
        for label, iv in sorted(timeline.entries, key=lambda e: (e[1].onset, e[1].offset, e[0]))
    ]
    return "".join(line + "\n" for line in lines)


def write_rttm(timeline: Timeline, path: str | Path, file_id: str = "utt") -> None:
    Path(path).write_text(format_rttm(timeline, file_id))


def read_rttm(path: str | Path, total_duration: float | None = None) -> Timeline:
    """Read SPEAKER records from an RTTM file into a Timeline."""
    entries: list[tuple[str, Interval]] = []
    max_offset = 0.0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        parts = _RTTM_FIELDS.split(line)
        if parts[0] != "SPEAKER":
            continue
        if len(parts) < 8:
            raise DataError(f"{path}: line {lineno}: truncated RTTM record")
        try:
            onset, duration = float(parts[3]), float(parts[4])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-numeric onset/duration") from None
        try:
            entries.append((parts[7], Interval(onset, onset + duration)))
        except DataError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        max_offset = max(max_offset, onset + duration)
    if total_duration is None:
        total_duration = max_offset if max_offset > 0 else 1.0
    return Timeline(entries, total_duration)
