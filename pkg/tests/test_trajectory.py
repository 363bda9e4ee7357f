import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmt.geo_vocab import build_grid_vocab
from pmt.trajectory import (
    MISSING, LbsRecord, TrajectorySequence, filter_by_occupancy, read_lbs_csv, read_sequences,
    split_users, temporal_occupancy, week_phase, windowize, windowize_arrays, write_lbs_csv,
    write_sequences,
)

T0 = 1_578_268_800  # a Monday 00:00 UTC
VOCAB = build_grid_vocab((0, 0, 1000, 1000), 500, seed=0)


def test_last_record_in_window_wins():
    recs = [LbsRecord("u", T0 + 10, 10, 10), LbsRecord("u", T0 + 1700, 600, 10),
            LbsRecord("u", T0 + 900, 10, 600)]
    (seq,) = windowize(recs, (T0, T0 + 3 * 1800), VOCAB)
    np.testing.assert_array_equal(seq.tokens, [1, MISSING, MISSING])


def test_timestamp_tie_keeps_later_input_record():
    recs = [LbsRecord("u", T0 + 5, 10, 10), LbsRecord("u", T0 + 5, 600, 600)]
    (seq,) = windowize(recs, (T0, T0 + 1800), VOCAB)
    assert seq.tokens[0] == 3


def test_out_of_grid_and_out_of_span_records_dropped():
    recs = [LbsRecord("u", T0 + 10, -5, 10), LbsRecord("u", T0 + 1800 * 5, 10, 10),
            LbsRecord("u", T0 + 1810, 10, 10)]
    (seq,) = windowize(recs, (T0, T0 + 2 * 1800), VOCAB)
    np.testing.assert_array_equal(seq.tokens, [MISSING, 0])


def test_misaligned_span_rejected():
    with pytest.raises(ValueError):
        windowize([LbsRecord("u", T0, 1, 1)], (T0 + 1, T0 + 1801), VOCAB)
    with pytest.raises(ValueError):
        windowize([LbsRecord("u", T0, 1, 1)], (T0, T0 + 100), VOCAB)


def _brute_windowize(users, ts, xs, ys, start, n):
    out = {}
    for k, (u, t, x, y) in enumerate(zip(users, ts, xs, ys)):
        if not (start <= t < start + n * 1800) or not (0 <= x < 1000 and 0 <= y < 1000):
            continue
        row = out.setdefault(u, [(None, None)] * n)
        w = (t - start) // 1800
        prev_t, _ = row[w]
        if prev_t is None or t >= prev_t:
            row[w] = (t, int(y // 500) * 2 + int(x // 500))
    return {u: [MISSING if tok is None else tok for _, tok in row] for u, row in out.items()}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(-1800, 6 * 1800),
                          st.floats(-100, 1100), st.floats(-100, 1100)), max_size=40))
def test_windowize_matches_brute_force(rows):
    users = [r[0] for r in rows]
    ts = [T0 + r[1] for r in rows]
    xs = [r[2] for r in rows]
    ys = [r[3] for r in rows]
    got = {s.user_id: s.tokens.tolist() for s in windowize_arrays(users, ts, xs, ys,
                                                                  (T0, T0 + 5 * 1800), VOCAB)}
    expect = _brute_windowize(users, ts, xs, ys, T0, 5)
    # users whose in-span records all fall off the grid still get an all-MISSING row
    for u, row in got.items():
        assert row == expect.get(u, [MISSING] * 5)


def test_occupancy_filter_is_strict():
    half = TrajectorySequence("h", T0, [0, MISSING, 1, MISSING])
    more = TrajectorySequence("m", T0, [0, 1, 1, MISSING])
    assert temporal_occupancy(half) == 0.5
    assert [s.user_id for s in filter_by_occupancy([half, more], 0.5)] == ["m"]
    with pytest.raises(ValueError):
        temporal_occupancy(np.array([], dtype=np.int64))


def test_split_is_user_disjoint_and_deterministic():
    seqs = [TrajectorySequence(f"u{i}", T0, [0]) for i in range(30)]
    tr, te = split_users(seqs, 2 / 3, seed=7)
    assert len(tr) == 20 and len(te) == 10
    assert not {s.user_id for s in tr} & {s.user_id for s in te}
    tr2, _ = split_users(seqs, 2 / 3, seed=7)
    assert [s.user_id for s in tr] == [s.user_id for s in tr2]
    tr3, _ = split_users(seqs, 2 / 3, seed=8)
    assert [s.user_id for s in tr] != [s.user_id for s in tr3]
    with pytest.raises(ValueError):
        split_users(seqs + seqs[:1])


def test_window_indices_relative_to_origin():
    s = TrajectorySequence("u", T0 + 3600, [0, 1, 2])
    np.testing.assert_array_equal(s.window_indices(T0), [2, 3, 4])
    np.testing.assert_array_equal(s.window_indices(), [0, 1, 2])


def test_week_phase():
    assert week_phase(T0) == 0
    assert week_phase(T0 + 86_400 + 1800) == 49
    assert week_phase(T0 + 7 * 86_400) == 0


def test_sequence_and_csv_files_round_trip(tmp_path):
    seqs = [TrajectorySequence("a", T0, [0, MISSING, 2], truth=[0, 1, 2]),
            TrajectorySequence("b", T0, [MISSING, MISSING, 3], truth=[3, 3, 3])]
    path = tmp_path / "seqs.txt"
    write_sequences(path, seqs)
    assert (tmp_path / "seqs.txt.truth").exists()
    back = read_sequences(path)
    for s, b in zip(seqs, back):
        assert s.user_id == b.user_id and s.start_epoch == b.start_epoch
        np.testing.assert_array_equal(s.tokens, b.tokens)
        np.testing.assert_array_equal(s.truth, b.truth)
    assert path.read_text().splitlines()[0] == f"a|{T0}|0,-1,2"

    recs = [LbsRecord("a", T0 + 3, 1.25, 2.5), LbsRecord("b", T0 + 9, 600.0, 0.1)]
    write_lbs_csv(tmp_path / "r.csv", recs)
    users, ts, xs, ys = read_lbs_csv(tmp_path / "r.csv")
    assert users == ["a", "b"] and ts.tolist() == [T0 + 3, T0 + 9]
    assert xs.tolist() == [1.25, 600.0] and ys.tolist() == [2.5, 0.1]
