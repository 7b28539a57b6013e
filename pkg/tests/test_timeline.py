import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uaed.errors import ConfigError, DataError
from uaed.timeline import (
    ActivityMatrix,
    Interval,
    ProbabilityMatrix,
    SPEECH_LABEL,
    Timeline,
    Vocabulary,
    binarize,
    derive_sd,
    derive_sed,
    format_label_file,
    matrix_to_timeline,
    merge_intervals,
    read_label_file,
    read_rttm,
    timeline_to_matrix,
    write_label_file,
    write_rttm,
)

VOCAB = Vocabulary(("dog", "alarm"), ("spkA", "spkB"))


def test_vocabulary_indexing_and_order():
    assert VOCAB.size == 4
    assert VOCAB.labels == ("dog", "alarm", "spkA", "spkB")
    assert VOCAB.index("dog") == 0
    assert VOCAB.index("spkB") == 3
    assert VOCAB.is_speaker("spkA") and not VOCAB.is_speaker("dog")
    with pytest.raises(DataError):
        VOCAB.index("cat")


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ConfigError):
        Vocabulary(("dog", "dog"))
    with pytest.raises(ConfigError):
        Vocabulary(("dog",), ("dog",))
    with pytest.raises(ConfigError):
        Vocabulary(())


def test_interval_validation():
    with pytest.raises(DataError):
        Interval(-0.1, 1.0)
    with pytest.raises(DataError):
        Interval(1.0, 1.0)
    assert Interval(0.5, 1.5).duration == pytest.approx(1.0)


def test_timeline_rejects_out_of_range_interval():
    with pytest.raises(DataError):
        Timeline([("dog", Interval(0.0, 3.0))], total_duration=2.0)


def test_timeline_to_matrix_center_rule():
    t = Timeline([("dog", Interval(0.5, 1.5))], total_duration=2.0)
    m = timeline_to_matrix(t, VOCAB, 0.5)
    assert m.values.shape == (4, 4)
    np.testing.assert_array_equal(m.values[0], [0, 1, 1, 0])
    assert m.values[1:].sum() == 0


def test_timeline_to_matrix_empty():
    t = Timeline([], total_duration=2.0)
    m = timeline_to_matrix(t, VOCAB, 0.5)
    assert m.values.sum() == 0


def test_timeline_to_matrix_union_of_overlaps():
    t = Timeline(
        [("dog", Interval(0.0, 1.0)), ("dog", Interval(0.5, 1.5))], total_duration=2.0
    )
    m = timeline_to_matrix(t, VOCAB, 0.5)
    np.testing.assert_array_equal(m.values[0], [1, 1, 1, 0])


def test_timeline_to_matrix_unknown_label():
    t = Timeline([("cat", Interval(0.0, 1.0))], total_duration=2.0)
    with pytest.raises(DataError, match="unknown label"):
        timeline_to_matrix(t, VOCAB, 0.5)


def test_matrix_to_timeline_single_run():
    m = ActivityMatrix(
        np.array([[0, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]), 0.5, VOCAB
    )
    t = matrix_to_timeline(m)
    assert t.entries == [("dog", Interval(0.5, 1.5))]
    assert t.total_duration == pytest.approx(2.0)


def test_matrix_to_timeline_all_zero():
    m = ActivityMatrix(np.zeros((4, 5), dtype=int), 0.5, VOCAB)
    assert matrix_to_timeline(m).entries == []


def test_matrix_to_timeline_two_runs():
    m = ActivityMatrix(
        np.array([[1, 0, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]), 1.0, VOCAB
    )
    t = matrix_to_timeline(m)
    assert t.for_label("dog") == [Interval(0.0, 1.0), Interval(2.0, 4.0)]


@given(
    st.integers(min_value=1, max_value=30).flatmap(
        lambda t: st.lists(
            st.lists(st.integers(0, 1), min_size=t, max_size=t), min_size=4, max_size=4
        )
    )
)
@settings(max_examples=200)
def test_round_trip_matrix_timeline_matrix(rows):
    m = ActivityMatrix(np.array(rows), 0.25, VOCAB)
    back = timeline_to_matrix(matrix_to_timeline(m), VOCAB, 0.25)
    np.testing.assert_array_equal(back.values, m.values)


def test_binarize_threshold_and_window_one():
    probs = ProbabilityMatrix(
        np.full((4, 4), 0.3) + np.array([[0.1, 0.3, 0.4, -0.1]] + [[0.0] * 4] * 3),
        0.5,
        VOCAB,
    )
    out = binarize(probs, threshold=0.5, median_filter_frames=1)
    np.testing.assert_array_equal(out.values[0], [0, 1, 1, 0])


def test_binarize_median_window_three():
    vals = np.full((4, 3), 0.1)
    vals[0] = [0.6, 0.4, 0.6]
    out = binarize(ProbabilityMatrix(vals, 0.5, VOCAB), 0.5, median_filter_frames=3)
    np.testing.assert_array_equal(out.values[0], [1, 1, 1])


def test_binarize_strict_inequality_at_threshold():
    probs = ProbabilityMatrix(np.full((4, 6), 0.5), 0.5, VOCAB)
    assert binarize(probs, threshold=0.5).values.sum() == 0


def test_binarize_rejects_even_window():
    probs = ProbabilityMatrix(np.full((4, 6), 0.5), 0.5, VOCAB)
    with pytest.raises(ConfigError):
        binarize(probs, median_filter_frames=2)


@given(
    st.lists(st.floats(min_value=0.01, max_value=0.99), min_size=8, max_size=8),
    st.floats(min_value=0.1, max_value=0.9),
    st.floats(min_value=0.0, max_value=0.5),
)
@settings(max_examples=200)
def test_binarize_monotone_in_threshold(row, lo, bump):
    hi = min(0.99, lo + bump)
    vals = np.tile(np.array(row), (4, 1))
    probs = ProbabilityMatrix(vals, 0.5, VOCAB)
    low = binarize(probs, threshold=lo).values
    high = binarize(probs, threshold=hi).values
    assert (high <= low).all()


def test_derive_sed_merges_speakers():
    t = Timeline(
        [
            ("spkA", Interval(0.0, 2.0)),
            ("spkB", Interval(1.0, 3.0)),
            ("dog", Interval(4.0, 5.0)),
        ],
        total_duration=6.0,
    )
    out = derive_sed(t, VOCAB)
    assert out.for_label(SPEECH_LABEL) == [Interval(0.0, 3.0)]
    assert out.for_label("dog") == [Interval(4.0, 5.0)]


def test_derive_sed_without_speakers_is_identity():
    t = Timeline([("dog", Interval(0.0, 1.0))], total_duration=2.0)
    assert derive_sed(t, VOCAB).entries == t.entries


def test_derive_sed_single_speaker_relabels():
    t = Timeline([("spkA", Interval(0.0, 2.0))], total_duration=2.0)
    assert derive_sed(t, VOCAB).entries == [(SPEECH_LABEL, Interval(0.0, 2.0))]


@given(
    st.lists(
        st.tuples(
            st.sampled_from(["spkA", "spkB"]),
            st.floats(min_value=0.0, max_value=9.0),
            st.floats(min_value=0.05, max_value=1.0),
        ),
        max_size=8,
    )
)
@settings(max_examples=150)
def test_derive_sed_speech_is_disjoint(raw):
    entries = [(lab, Interval(a, a + d)) for lab, a, d in raw]
    t = Timeline(entries, total_duration=10.0)
    speech = derive_sed(t, VOCAB).for_label(SPEECH_LABEL)
    for first, second in zip(speech, speech[1:]):
        assert first.offset < second.onset or np.isclose(first.offset, second.onset)
        assert first.overlap(second) == 0.0


def test_derive_sd_filters_and_merges():
    t = Timeline(
        [("spkA", Interval(0.0, 2.0)), ("dog", Interval(4.0, 5.0))], total_duration=6.0
    )
    assert derive_sd(t, VOCAB).entries == [("spkA", Interval(0.0, 2.0))]

    only_sound = Timeline([("dog", Interval(0.0, 1.0))], total_duration=2.0)
    assert derive_sd(only_sound, VOCAB).entries == []

    overlapping = Timeline(
        [("spkA", Interval(0.0, 1.0)), ("spkA", Interval(0.5, 2.0))], total_duration=3.0
    )
    assert derive_sd(overlapping, VOCAB).entries == [("spkA", Interval(0.0, 2.0))]


@given(
    st.lists(
        st.tuples(
            st.sampled_from(["dog", "spkA", "spkB"]),
            st.floats(min_value=0.0, max_value=9.0),
            st.floats(min_value=0.05, max_value=1.0),
        ),
        max_size=8,
    )
)
@settings(max_examples=150)
def test_derive_sd_idempotent(raw):
    t = Timeline([(lab, Interval(a, a + d)) for lab, a, d in raw], total_duration=10.0)
    once = derive_sd(t, VOCAB)
    twice = derive_sd(once, VOCAB)
    assert once.entries == twice.entries


def test_merge_intervals_handles_touching():
    merged = merge_intervals([Interval(0.0, 1.0), Interval(1.0, 2.0), Interval(3.0, 4.0)])
    assert merged == [Interval(0.0, 2.0), Interval(3.0, 4.0)]


def test_label_file_round_trip(tmp_path):
    t = Timeline(
        [("dog", Interval(0.25, 1.75)), ("spkA", Interval(0.0, 2.0))], total_duration=2.0
    )
    path = tmp_path / "utt.tsv"
    write_label_file(t, path)
    text = path.read_text()
    assert "0.250000\t1.750000\tdog" in text
    back = read_label_file(path, total_duration=2.0)
    assert sorted(back.entries) == sorted(t.entries)


def test_label_file_malformed_line_reports_number(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("0.0\t1.0\tdog\nnot-a-number\t2.0\tdog\n")
    with pytest.raises(DataError, match="line 2"):
        read_label_file(path)


def test_label_file_format_has_three_plus_decimals():
    t = Timeline([("dog", Interval(0.1, 0.2))], total_duration=1.0)
    line = format_label_file(t).strip()
    onset, offset, _ = line.split("\t")
    assert len(onset.split(".")[1]) >= 3 and len(offset.split(".")[1]) >= 3


def test_rttm_round_trip(tmp_path):
    t = Timeline(
        [("spkA", Interval(0.0, 2.0)), ("spkB", Interval(1.5, 3.0))], total_duration=4.0
    )
    path = tmp_path / "utt.rttm"
    write_rttm(t, path, file_id="utt0")
    text = path.read_text()
    assert text.startswith("SPEAKER utt0 1 0.000 2.000 <NA> <NA> spkA <NA> <NA>")
    back = read_rttm(path, total_duration=4.0)
    assert sorted(back.entries) == sorted(t.entries)
