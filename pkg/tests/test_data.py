import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keybio.data import (
    HEADER,
    KeystrokeEvent,
    KeystrokeSequence,
    LogFormatError,
    SynthConfig,
    extract_features,
    format_log,
    generate_synthetic,
    pad_or_truncate,
    parse_log,
    split_subjects,
)


def seq_from(pairs, keys=None, subject="a", session="0"):
    keys = keys or [65] * len(pairs)
    return KeystrokeSequence(subject, session, tuple(KeystrokeEvent(k, p, r) for k, (p, r) in zip(keys, pairs)))


@st.composite
def sequences(draw, min_size=2, max_size=40):
    n = draw(st.integers(min_size, max_size))
    gaps = draw(st.lists(st.integers(0, 800), min_size=n, max_size=n))
    holds = draw(st.lists(st.integers(0, 400), min_size=n, max_size=n))
    keys = draw(st.lists(st.integers(0, 255), min_size=n, max_size=n))
    press = np.cumsum(gaps) + 1000
    return seq_from([(int(p), int(p + h)) for p, h in zip(press, holds)], keys)


class TestParse:
    def test_two_lines_one_session(self):
        text = f"{HEADER}\ns1,0,65,100,180\ns1,0,66,300,390\n"
        seqs = parse_log(text)
        assert len(seqs) == 1
        assert len(seqs[0]) == 2
        assert seqs[0].events[1] == KeystrokeEvent(66, 300, 390)

    def test_keycode_out_of_range_names_line(self):
        text = f"{HEADER}\ns1,0,65,100,180\ns1,0,300,300,390\n"
        with pytest.raises(LogFormatError, match="line 3"):
            parse_log(text)

    def test_release_before_press(self):
        with pytest.raises(LogFormatError, match="line 2"):
            parse_log(f"{HEADER}\ns1,0,65,100,90\n")

    @pytest.mark.parametrize("line", ["s1,0,65,100", "s1,0,a,1,2", "s1,0,65,1,2,3", ",0,65,1,2"])
    def test_malformed(self, line):
        with pytest.raises(LogFormatError, match="line 2"):
            parse_log(f"{HEADER}\n{line}\n")

    def test_missing_header(self):
        with pytest.raises(LogFormatError, match="line 1"):
            parse_log("s1,0,65,100,180\n")

    def test_comments_and_sorting_and_duplicates(self):
        text = "\n".join(
            [
                "# a comment",
                HEADER,
                "s1,0,66,300,390",
                "# another",
                "s1,0,65,100,180",
                "s1,0,65,100,180",
            ]
        )
        (seq,) = parse_log(text)
        assert seq.keycodes == (65, 66)
        assert [e.press_time for e in seq.events] == [100, 300]

    def test_short_sessions_dropped_with_warning(self, caplog):
        text = f"{HEADER}\ns1,0,65,100,180\ns1,0,66,300,390\ns2,0,65,1,2\n"
        with caplog.at_level(logging.WARNING):
            seqs = parse_log(text)
        assert [s.subject_id for s in seqs] == ["s1"]
        assert "dropped 1 session" in caplog.text

    def test_round_trip_generator(self):
        # 3 subjects x 15 sessions -> 45 sequences, equal after re-parsing
        gen = generate_synthetic(SynthConfig(num_subjects=3, seed=11))
        back = parse_log(format_log(gen))
        assert len(back) == 45
        assert back == gen

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 4), st.integers(2, 5))
    def test_round_trip_property(self, seed, subjects, sessions):
        gen = generate_synthetic(SynthConfig(num_subjects=subjects, sessions_per_subject=sessions, mean_sentence_len=12, seed=seed))
        assert parse_log(format_log(gen)) == gen


class TestFeatures:
    def test_hand_example(self):
        fs = extract_features(seq_from([(0, 80), (200, 290)], [65, 66]))
        np.testing.assert_allclose(fs.values[0], [0.08, 0, 0, 0, 65 / 255])
        np.testing.assert_allclose(fs.values[1], [0.09, 0.12, 0.20, 0.21, 66 / 255])

    def test_key_endpoint(self):
        fs = extract_features(seq_from([(0, 10), (20, 30)], [255, 0]))
        assert fs.values[0, 4] == 1.0
        assert fs.values[1, 4] == 0.0

    def test_rollover_negative_il(self):
        fs = extract_features(seq_from([(0, 150), (100, 180)]))
        assert fs.values[1, 1] == pytest.approx(-0.05)

    def test_single_key_rejected(self):
        with pytest.raises(ValueError):
            extract_features(seq_from([(0, 10)]))

    @given(sequences())
    def test_latency_identities(self, seq):
        v = extract_features(seq).values
        hl, il, pl, rl = v[:, 0], v[:, 1], v[:, 2], v[:, 3]
        np.testing.assert_allclose(pl[1:], il[1:] + hl[:-1], atol=1e-12, rtol=0)
        np.testing.assert_allclose(rl[1:], il[1:] + hl[1:], atol=1e-12, rtol=0)
        assert (hl >= 0).all()
        assert ((v[:, 4] >= 0) & (v[:, 4] <= 1)).all()
        np.testing.assert_array_equal(v[:, 4], np.array(seq.keycodes) / 255)


class TestPad:
    def test_pad(self):
        fs = pad_or_truncate(extract_features(seq_from([(0, 1), (2, 3), (4, 5)])), 5)
        assert fs.matrix.shape == (5, 5)
        assert fs.mask.tolist() == [True, True, True, False, False]
        assert not fs.matrix[3:].any()

    def test_truncate(self):
        full = extract_features(seq_from([(i * 10, i * 10 + 5) for i in range(7)]))
        fs = pad_or_truncate(full, 5)
        np.testing.assert_array_equal(fs.matrix, full.values[:5])
        assert fs.mask.all()

    def test_identity(self):
        full = extract_features(seq_from([(i * 10, i * 10 + 5) for i in range(4)]))
        fs = pad_or_truncate(full, 4)
        np.testing.assert_array_equal(fs.matrix, full.values)
        assert fs.mask.all()

    def test_bad_length(self):
        with pytest.raises(ValueError):
            pad_or_truncate(extract_features(seq_from([(0, 1), (2, 3)])), 0)

    @given(sequences(), st.integers(0, 20))
    def test_padding_preserves_frames(self, seq, extra):
        fs = extract_features(seq)
        padded = pad_or_truncate(fs, fs.n + extra)
        assert padded.mask.sum() == fs.n
        assert padded.mask[: fs.n].all()
        np.testing.assert_array_equal(padded.matrix[: fs.n], fs.values)
        assert not padded.matrix[fs.n :].any()


class TestSynthetic:
    def test_deterministic(self):
        cfg = SynthConfig(num_subjects=5, seed=3)
        assert format_log(generate_synthetic(cfg)) == format_log(generate_synthetic(cfg))

    def test_cardinality(self):
        seqs = generate_synthetic(SynthConfig(num_subjects=100, sessions_per_subject=15, seed=1))
        assert len(seqs) == 1500
        assert min(len(s) for s in seqs) >= 2
        assert all("country" in s.attributes for s in seqs)

    def test_subject_separability(self):
        # same-subject pairs differ less in mean HL than different-subject pairs
        seqs = generate_synthetic(SynthConfig(num_subjects=100, seed=5))
        mean_hl = {}
        for s in seqs:
            mean_hl.setdefault(s.subject_id, []).append(extract_features(s).values[:, 0].mean())
        arr = np.array(list(mean_hl.values()))  # subjects x sessions
        within = np.mean([np.abs(row[0] - row[1]) for row in arr])
        between = np.mean([np.abs(arr[i, 0] - arr[(i + 1) % len(arr), 0]) for i in range(len(arr))])
        assert within < between

    @pytest.mark.parametrize("field,value", [("num_subjects", 0), ("sessions_per_subject", 0), ("hold_mean", 0.0), ("interval_mean", -1.0)])
    def test_invalid(self, field, value):
        cfg = SynthConfig(**{field: value})
        with pytest.raises(ValueError):
            generate_synthetic(cfg)


class TestSplit:
    def test_half(self):
        seqs = generate_synthetic(SynthConfig(num_subjects=10, sessions_per_subject=2, mean_sentence_len=5, seed=0))
        train, test = split_subjects(seqs, 0.5, seed=4)
        tr = {s.subject_id for s in train}
        te = {s.subject_id for s in test}
        assert len(tr) == len(te) == 5
        assert not tr & te
        assert tr | te == {s.subject_id for s in seqs}
        again = split_subjects(seqs, 0.5, seed=4)
        assert again == (train, test)

    def test_too_few_subjects(self):
        seqs = generate_synthetic(SynthConfig(num_subjects=1, sessions_per_subject=2, mean_sentence_len=5))
        with pytest.raises(ValueError):
            split_subjects(seqs, 0.5, seed=0)
