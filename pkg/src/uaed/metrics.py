"""Scoring: intersection-based F1, segment-based F1, and DER.

All time integrals are computed with interval arithmetic at millisecond
resolution (integer milliseconds), so scores are free of frame quantization.
The unified report also contains the derived sound-event scores (speakers
collapsed to ``speech``) and the derived diarization scores (speaker rows
only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError
from .timeline import Interval, Timeline, Vocabulary, derive_sd, derive_sed, merge_intervals

MS = 1000  # milliseconds per second


@dataclass(frozen=True)
class MatchParams:
    """Matching parameters for the detection metrics.

    ``rho_dtc`` is the minimum fraction of a hypothesis event's duration that
    must intersect same-class reference events; ``rho_gtc`` the analogous
    fraction for a reference event against accepted hypothesis events.
    """

    rho_dtc: float = 0.5
    rho_gtc: float = 0.5
    segment_length: float = 1.0
    collar: float = 0.0

    def __post_init__(self) -> None:
        for name in ("rho_dtc", "rho_gtc"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.segment_length <= 0:
            raise ConfigError(f"segment_length must be positive, got {self.segment_length}")
        if self.collar < 0:
            raise ConfigError(f"collar must be >= 0, got {self.collar}")

    def to_dict(self) -> dict:
        return {
            "rho_dtc": self.rho_dtc,
            "rho_gtc": self.rho_gtc,
            "segment_length": self.segment_length,
            "collar": self.collar,
        }


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "ClassCounts") -> "ClassCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass
class DERBreakdown:
    """Miss / false alarm / speaker confusion as percentages of reference
    speech time, plus the raw second integrals used for corpus aggregation."""

    ms: float
    fa: float
    sc: float
    der: float
    miss_seconds: float = 0.0
    fa_seconds: float = 0.0
    sc_seconds: float = 0.0
    speech_seconds: float = 0.0
    undefined: bool = False

    @classmethod
    def from_seconds(
        cls, miss: float, fa: float, sc: float, speech: float
    ) -> "DERBreakdown":
        if speech <= 0:
            return cls(
                math.nan, math.nan, math.nan, math.nan,
                miss, fa, sc, speech, undefined=True,
            )
        return cls(
            100.0 * miss / speech,
            100.0 * fa / speech,
            100.0 * sc / speech,
            100.0 * (miss + fa + sc) / speech,
            miss, fa, sc, speech,
        )

    def to_dict(self) -> dict:
        if self.undefined:
            return {"der": None, "ms": None, "fa": None, "sc": None, "undefined": True}
        return {
            "der": self.der,
            "ms": self.ms,
            "fa": self.fa,
            "sc": self.sc,
            "undefined": False,
        }


def _to_ms(seconds: float) -> int:
    return int(round(seconds * MS))


def _class_spans_ms(timeline: Timeline) -> dict[str, list[tuple[int, int]]]:
    """Per-label merged interval lists in integer milliseconds."""
    out: dict[str, list[tuple[int, int]]] = {}
    for label in timeline.labels():
        merged = merge_intervals(timeline.for_label(label))
        spans = [(_to_ms(iv.onset), _to_ms(iv.offset)) for iv in merged]
        spans = [(a, b) for a, b in spans if b > a]
        if spans:
            out[label] = spans
    return out


def _overlap_ms(a: tuple[int, int], spans: Sequence[tuple[int, int]]) -> int:
    return sum(max(0, min(a[1], b[1]) - max(a[0], b[0])) for b in spans)


# ---------------------------------------------------------------------------
# Intersection-based F1
# ---------------------------------------------------------------------------

def intersection_counts(
    ref: Timeline, hyp: Timeline, params: MatchParams | None = None
) -> dict[str, ClassCounts]:
    """TP/FP/FN per class under the intersection criterion.

    A hypothesis event is accepted when the intersected fraction of its own
    duration reaches ``rho_dtc``; a reference event counts as detected when
    the fraction covered by accepted hypothesis events reaches ``rho_gtc``.
    """
    params = params or MatchParams()
    ref_spans = _class_spans_ms(ref)
    hyp_spans = _class_spans_ms(hyp)
    counts: dict[str, ClassCounts] = {}
    for label in sorted(set(ref_spans) | set(hyp_spans)):
        r_events = ref_spans.get(label, [])
        h_events = hyp_spans.get(label, [])
        accepted = [
            ev
            for ev in h_events
            if _overlap_ms(ev, r_events) / (ev[1] - ev[0]) >= params.rho_dtc
        ]
        fp = len(h_events) - len(accepted)
        tp = sum(
            1
            for ev in r_events
            if _overlap_ms(ev, accepted) / (ev[1] - ev[0]) >= params.rho_gtc
        )
        fn = len(r_events) - tp
        counts[label] = ClassCounts(tp=tp, fp=fp, fn=fn)
    return counts


# ---------------------------------------------------------------------------
# Segment-based F1
# ---------------------------------------------------------------------------

def segment_counts(
    ref: Timeline, hyp: Timeline, segment_length: float = 1.0
) -> dict[str, ClassCounts]:
    """TP/FP/FN per class over consecutive fixed-length segments; a class is
    active in a segment iff any of its intervals overlaps it."""
    if segment_length <= 0:
        raise ConfigError(f"segment_length must be positive, got {segment_length}")
    total = max(ref.total_duration, hyp.total_duration)
    seg_ms = _to_ms(segment_length)
    n_seg = max(1, math.ceil(_to_ms(total) / seg_ms))
    ref_spans = _class_spans_ms(ref)
    hyp_spans = _class_spans_ms(hyp)
    counts: dict[str, ClassCounts] = {}
    for label in sorted(set(ref_spans) | set(hyp_spans)):
        c = ClassCounts()
        r_events = ref_spans.get(label, [])
        h_events = hyp_spans.get(label, [])
        for k in range(n_seg):
            seg = (k * seg_ms, (k + 1) * seg_ms)
            in_ref = _overlap_ms(seg, r_events) > 0
            in_hyp = _overlap_ms(seg, h_events) > 0
            if in_ref and in_hyp:
                c.tp += 1
            elif in_hyp:
                c.fp += 1
            elif in_ref:
                c.fn += 1
        counts[label] = c
    return counts


def f1_scores(counts: dict[str, ClassCounts]) -> tuple[dict[str, float], float]:
    """Per-class F1 and the unweighted macro average over present classes."""
    per_class = {label: c.f1 for label, c in counts.items()}
    macro = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, macro


def intersection_f1(
    ref: Timeline, hyp: Timeline, params: MatchParams | None = None
) -> tuple[dict[str, float], float]:
    return f1_scores(intersection_counts(ref, hyp, params))


def segment_f1(
    ref: Timeline, hyp: Timeline, segment_length: float = 1.0
) -> tuple[dict[str, float], float]:
    return f1_scores(segment_counts(ref, hyp, segment_length))


# ---------------------------------------------------------------------------
# DER
# ---------------------------------------------------------------------------

def _subtract_spans(
    spans: Sequence[tuple[int, int]], holes: Sequence[tuple[int, int]]
) -> list[tuple[int, int]]:
    """Remove ``holes`` from ``spans`` (both sorted-disjoint not required)."""
    if not holes:
        return list(spans)
    merged_holes = _merge_ms(holes)
    out: list[tuple[int, int]] = []
    for a, b in spans:
        cur = a
        for ha, hb in merged_holes:
            if hb <= cur or ha >= b:
                continue
            if ha > cur:
                out.append((cur, ha))
            cur = max(cur, hb)
            if cur >= b:
                break
        if cur < b:
            out.append((cur, b))
    return out


def _merge_ms(spans: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    if not spans:
        return []
    spans = sorted(spans)
    out = [list(spans[0])]
    for a, b in spans[1:]:
        if a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def der(ref_sd: Timeline, hyp_sd: Timeline, collar: float = 0.0) -> DERBreakdown:
    """Diarization error with an optimal one-to-one speaker mapping.

    Overlap regions count via per-instant speaker multiplicities: with
    ``nr`` reference and ``nh`` hypothesis speakers active, an instant
    contributes ``max(0, nr - nh)`` to miss, ``max(0, nh - nr)`` to false
    alarm, and ``min(nr, nh) - n_correct`` to confusion. A collar of
    ``+/- collar`` seconds around every reference boundary is excluded from
    scoring. Empty reference speech yields an explicit undefined marker.
    """
    ref_spk = _class_spans_ms(ref_sd)
    hyp_spk = _class_spans_ms(hyp_sd)
    ref_ids = sorted(ref_spk)
    hyp_ids = sorted(hyp_spk)

    collar_ms = _to_ms(collar)
    holes: list[tuple[int, int]] = []
    if collar_ms > 0:
        for spans in ref_spk.values():
            for a, b in spans:
                holes.append((max(0, a - collar_ms), a + collar_ms))
                holes.append((max(0, b - collar_ms), b + collar_ms))
    ref_scored = {s: _subtract_spans(ref_spk[s], holes) for s in ref_ids}
    hyp_scored = {s: _subtract_spans(hyp_spk[s], holes) for s in hyp_ids}

    speech_ms = sum(b - a for spans in ref_scored.values() for a, b in spans)

    # Optimal assignment maximizing correctly attributed (scored) time.
    mapping: dict[str, str] = {}
    if ref_ids and hyp_ids:
        overlap = np.zeros((len(ref_ids), len(hyp_ids)))
        for i, r in enumerate(ref_ids):
            for j, h in enumerate(hyp_ids):
                overlap[i, j] = sum(
                    _overlap_ms(span, hyp_scored[h]) for span in ref_scored[r]
                )
        rows, cols = linear_sum_assignment(-overlap)
        mapping = {hyp_ids[j]: ref_ids[i] for i, j in zip(rows, cols)}

    # Sweep over elementary segments.
    cuts = sorted(
        {t for spans in list(ref_scored.values()) + list(hyp_scored.values()) for ab in spans for t in ab}
    )
    miss = fa = conf = 0
    for a, b in zip(cuts, cuts[1:]):
        length = b - a
        active_ref = {s for s in ref_ids if _overlap_ms((a, b), ref_scored[s]) == length}
        active_hyp = {s for s in hyp_ids if _overlap_ms((a, b), hyp_scored[s]) == length}
        nr, nh = len(active_ref), len(active_hyp)
        n_correct = sum(1 for h in active_hyp if mapping.get(h) in active_ref)
        miss += max(0, nr - nh) * length
        fa += max(0, nh - nr) * length
        conf += (min(nr, nh) - n_correct) * length
    return DERBreakdown.from_seconds(miss / MS, fa / MS, conf / MS, speech_ms / MS)


# ---------------------------------------------------------------------------
# Unified report
# ---------------------------------------------------------------------------

@dataclass
class ScoreReport:
    """Unified, sound-event-derived, and diarization-derived scores."""

    uaed_ib_per_class: dict[str, float]
    uaed_ib_macro: float
    uaed_sb_per_class: dict[str, float]
    uaed_sb_macro: float
    sed_ib_per_class: dict[str, float]
    sed_ib_macro: float
    sed_sb_per_class: dict[str, float]
    sed_sb_macro: float
    sd_der: DERBreakdown
    params: MatchParams = field(default_factory=MatchParams)
    n_files: int = 1

    def to_dict(self) -> dict:
        return {
            "uaed": {
                "ib_f1": {"macro": self.uaed_ib_macro, "per_class": self.uaed_ib_per_class},
                "sb_f1": {"macro": self.uaed_sb_macro, "per_class": self.uaed_sb_per_class},
            },
            "sed": {
                "ib_f1": {"macro": self.sed_ib_macro, "per_class": self.sed_ib_per_class},
                "sb_f1": {"macro": self.sed_sb_macro, "per_class": self.sed_sb_per_class},
            },
            "sd": self.sd_der.to_dict(),
            "params": self.params.to_dict(),
            "n_files": self.n_files,
        }


class ScoreAccumulator:
    """Sums per-class counts and DER time integrals across files."""

    def __init__(self, vocab: Vocabulary, params: MatchParams | None = None) -> None:
        self.vocab = vocab
        self.params = params or MatchParams()
        self._uaed_ib: dict[str, ClassCounts] = {}
        self._uaed_sb: dict[str, ClassCounts] = {}
        self._sed_ib: dict[str, ClassCounts] = {}
        self._sed_sb: dict[str, ClassCounts] = {}
        self._der = np.zeros(4)  # miss, fa, sc, speech seconds
        self.n_files = 0

    @staticmethod
    def _merge(into: dict[str, ClassCounts], new: dict[str, ClassCounts]) -> None:
        for label, c in new.items():
            into.setdefault(label, ClassCounts())
            into[label] += c

    def add(self, ref: Timeline, hyp: Timeline) -> None:
        p = self.params
        self._merge(self._uaed_ib, intersection_counts(ref, hyp, p))
        self._merge(self._uaed_sb, segment_counts(ref, hyp, p.segment_length))
        sed_ref, sed_hyp = derive_sed(ref, self.vocab), derive_sed(hyp, self.vocab)
        self._merge(self._sed_ib, intersection_counts(sed_ref, sed_hyp, p))
        self._merge(self._sed_sb, segment_counts(sed_ref, sed_hyp, p.segment_length))
        d = der(derive_sd(ref, self.vocab), derive_sd(hyp, self.vocab), p.collar)
        self._der += [d.miss_seconds, d.fa_seconds, d.sc_seconds, d.speech_seconds]
        self.n_files += 1

    def report(self) -> ScoreReport:
        uaed_ib, uaed_ib_macro = f1_scores(self._uaed_ib)
        uaed_sb, uaed_sb_macro = f1_scores(self._uaed_sb)
        sed_ib, sed_ib_macro = f1_scores(self._sed_ib)
        sed_sb, sed_sb_macro = f1_scores(self._sed_sb)
        breakdown = DERBreakdown.from_seconds(*self._der[:3], self._der[3])
        return ScoreReport(
            uaed_ib, uaed_ib_macro, uaed_sb, uaed_sb_macro,
            sed_ib, sed_ib_macro, sed_sb, sed_sb_macro,
            breakdown, self.params, self.n_files,
        )


def score_uaed(
    ref: Timeline, hyp: Timeline, vocab: Vocabulary, params: MatchParams | None = None
) -> ScoreReport:
    """Score one reference/hypothesis pair at the unified level plus the
    derived sound-event and diarization views."""
    acc = ScoreAccumulator(vocab, params)
    acc.add(ref, hyp)
    return acc.report()


def score_corpus(
    pairs: Iterable[tuple[Timeline, Timeline]],
    vocab: Vocabulary,
    params: MatchParams | None = None,
) -> ScoreReport:
    """Score many (ref, hyp) pairs with pooled counts and time integrals."""
    acc = ScoreAccumulator(vocab, params)
    for ref, hyp in pairs:
        acc.add(ref, hyp)
    return acc.report()
