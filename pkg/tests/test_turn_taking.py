import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jmlab.alignment import ActivityTrack, DiarSegment, Interval, activity_from_segments
from jmlab.token_grid import Channel, TokenGrid, apply_delays, build_schema
from jmlab.turn_taking import (
    REPORT_KEYS, IpuSet, activity_from_grid, analyze, classify_silences, mean_report, overlap_total,
    report, segments_to_ipus,
)

S, U = Channel.SELF, Channel.USER


def track(ch, *pairs):
    return ActivityTrack(ch, tuple(Interval(a, b) for a, b in pairs))


def ipus(ch, *pairs):
    return IpuSet(ch, tuple(Interval(a, b) for a, b in pairs))


def test_short_silence_merges():
    assert segments_to_ipus(track(S, (0, 1.0), (1.15, 2.0))).ipus == (Interval(0, 2.0),)


def test_exact_threshold_splits():
    assert len(segments_to_ipus(track(S, (0, 1.0), (1.2, 2.0))).ipus) == 2


def test_pause_and_gap_examples():
    pauses, gaps = classify_silences(ipus(S, (0, 1), (1.5, 2)), ipus(U), 2.0)
    assert pauses == [Interval(1, 1.5)] and gaps == []
    pauses, gaps = classify_silences(ipus(S, (0, 1)), ipus(U, (1.5, 2.5)), 3.0)
    assert pauses == [] and gaps == [Interval(1, 1.5)]


def test_edge_silence_unclassified():
    pauses, gaps = classify_silences(ipus(S, (1, 2), (3, 4)), ipus(U), 6.0)
    assert pauses == [Interval(2, 3)] and gaps == []
    rep = report(ipus(S, (1, 2), (3, 4)), ipus(U), 6.0)
    assert rep.edge_silence_s == pytest.approx(3.0)


def test_simultaneous_end_is_gap():
    # both channels stop together, one resumes: not a single-speaker pause
    pauses, gaps = classify_silences(ipus(S, (0, 1), (2, 3)), ipus(U, (0.5, 1)), 3.0)
    assert pauses == [] and gaps == [Interval(1, 2)]


def test_overlap_examples():
    assert overlap_total(ipus(S, (0, 2)), ipus(U, (1, 3))) == 1.0
    assert overlap_total(ipus(S, (0, 1)), ipus(U, (2, 3))) == 0.0


def test_report_arithmetic_and_silence():
    rep = report(ipus(S, (0, 10)), ipus(U, (5, 15)), 20.0)
    assert rep.ipu_s_per_min == 60.0 and rep.overlap_s_per_min == 15.0
    silent = report(ipus(S), ipus(U), 60.0)
    assert all(getattr(silent, k) == 0.0 for k in REPORT_KEYS)
    with pytest.raises(ValueError):
        report(ipus(S), ipus(U), 0.0)


def test_report_format_one_decimal():
    text = report(ipus(S, (0, 10)), ipus(U, (5, 15)), 20.0).format()
    assert text.splitlines() == ["ipu_s_per_min\t60.0", "pause_s_per_min\t0.0", "gap_s_per_min\t0.0",
                                 "overlap_s_per_min\t15.0"]


def test_mean_report_weights_by_duration():
    a = report(ipus(S, (0, 10)), ipus(U), 20.0)   # 30 s/min over 1/3 min
    b = report(ipus(S), ipus(U), 40.0)            # 0 over 2/3 min
    assert mean_report([a, b]).ipu_s_per_min == pytest.approx(10.0)


# dense oracle

def _runs(mask):
    padded = np.concatenate([[False], mask, [False]])
    e = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(e[::2], e[1::2]))


def oracle(act_s, act_u, min_bins=200):
    """Per-millisecond reference analysis of two activity masks."""
    N = len(act_s)
    ipu = []
    for act in (act_s, act_u):
        m = act.copy()
        for a, b in _runs(~act):
            if a > 0 and b < N and b - a < min_bins:
                m[a:b] = True
        ipu.append(m)
    pause = gap = edge = 0
    for a, b in _runs(~(ipu[0] | ipu[1])):
        if a == 0 or b == N:
            edge += b - a
            continue
        before = {c for c in (0, 1) if ipu[c][a - 1]}
        after = {c for c in (0, 1) if ipu[c][b]}
        if len(before) == 1 and before == after:
            pause += b - a
        else:
            gap += b - a
    overlap = int(np.count_nonzero(ipu[0] & ipu[1]))
    return ipu, pause / 1000, gap / 1000, overlap / 1000, edge / 1000


def random_instance(rng, N):
    tracks, masks = [], []
    for ch in (S, U):
        pts, t = [], int(rng.integers(0, 800))
        mask = np.zeros(N, dtype=bool)
        while t < N:
            length = int(rng.integers(1, 2500))
            end = min(t + length, N)
            pts.append((t, end))
            mask[t:end] = True
            t = end + int(rng.choice([int(rng.integers(1, 1500)), 200, 199, 201]))
        tracks.append(ActivityTrack(ch, tuple(Interval(a / 1000, b / 1000) for a, b in pts)))
        masks.append(mask)
    return tracks, masks


def test_dense_oracle_equivalence():
    rng = np.random.default_rng(7)
    N = 20_000
    for _ in range(1000):
        (ts, tu), (ms, mu) = random_instance(rng, N)
        ipu_mask, pause, gap, overlap, edge = oracle(ms, mu)
        got_s, got_u = segments_to_ipus(ts), segments_to_ipus(tu)
        for got, m in ((got_s, ipu_mask[0]), (got_u, ipu_mask[1])):
            ref = [(a / 1000, b / 1000) for a, b in _runs(m)]
            assert len(got.ipus) == len(ref)
            for iv, (a, b) in zip(got.ipus, ref):
                assert abs(iv.start - a) <= 1e-9 and abs(iv.end - b) <= 1e-9
        pauses, gaps = classify_silences(got_s, got_u, N / 1000)
        assert abs(sum(iv.duration for iv in pauses) - pause) <= 1e-9
        assert abs(sum(iv.duration for iv in gaps) - gap) <= 1e-9
        assert abs(overlap_total(got_s, got_u) - overlap) <= 1e-9
        rep = report(got_s, got_u, N / 1000)
        assert abs(rep.edge_silence_s - edge) <= 1e-9


# properties

intervals = st.lists(st.tuples(st.integers(0, 300), st.integers(1, 60)), max_size=12)


def build(ch, raw):
    ivs = [Interval(a / 10, (a + d) / 10) for a, d in raw]
    from jmlab.alignment import merge_intervals
    return ActivityTrack(ch, tuple(merge_intervals(ivs)))


@settings(max_examples=300, deadline=None)
@given(a=intervals, b=intervals)
def test_tiling_and_symmetry(a, b):
    duration = 40.0
    ts, tu = build(S, a), build(U, b)
    ps, pu = segments_to_ipus(ts), segments_to_ipus(tu)
    pauses, gaps = classify_silences(ps, pu, duration)
    rep = report(ps, pu, duration)
    union = sum(iv.duration for iv in ps.ipus) + sum(iv.duration for iv in pu.ipus) - overlap_total(ps, pu)
    silent = duration - union
    classified = sum(iv.duration for iv in pauses + gaps)
    assert abs(silent - classified - rep.edge_silence_s) <= 1e-9
    for iv in pauses + gaps:
        assert 0 <= iv.start < iv.end <= duration
    swapped = report(IpuSet(S, pu.ipus), IpuSet(U, ps.ipus), duration)
    for k in REPORT_KEYS:
        assert getattr(swapped, k) == pytest.approx(getattr(rep, k), abs=1e-9)
    assert rep.ipu_s_per_min <= 120.0


@settings(max_examples=200, deadline=None)
@given(a=intervals, b=intervals, data=st.data())
def test_split_invariance(a, b, data):
    ts, tu = build(S, a), build(U, b)
    if not ts.intervals:
        return
    k = data.draw(st.integers(0, len(ts.intervals) - 1))
    iv = ts.intervals[k]
    cut = iv.start + data.draw(st.floats(0.01, 0.99)) * iv.duration
    pieces = ts.intervals[:k] + (Interval(iv.start, cut), Interval(cut, iv.end)) + ts.intervals[k + 1:]
    r1 = analyze(ts, tu, 40.0)
    r2 = analyze(ActivityTrack(S, pieces), tu, 40.0)
    for key in REPORT_KEYS:
        assert getattr(r1, key) == pytest.approx(getattr(r2, key), abs=1e-9)


# grids

def test_activity_from_grid_examples():
    schema = build_schema("dialogue", 8, 12, 6)
    tokens = np.zeros((20, len(schema)), dtype=np.int64)
    g = TokenGrid(schema, tokens)
    assert activity_from_grid(g, S).intervals == ()
    tokens[5:10, schema.semantic_index(S)] = 3
    got = activity_from_grid(TokenGrid(schema, tokens), S).intervals
    assert got == (Interval(0.4, 0.8),)
    with pytest.raises(ValueError):
        activity_from_grid(apply_delays(g), S)


def test_grid_activity_round_trip(rng):
    schema = build_schema("dialogue", 8, 12, 6)
    for _ in range(100):
        T = 60
        active = rng.random(T) < 0.5
        from jmlab.turn_taking import frames_to_intervals
        segs = [DiarSegment("A", iv) for iv in frames_to_intervals(active)]
        tr = activity_from_segments(segs, {"A": S}, S, T)
        tokens = np.zeros((T, len(schema)), dtype=np.int64)
        from jmlab.alignment import activity_mask
        tokens[:, schema.semantic_index(S)] = activity_mask(tr, T).astype(np.int64)
        assert activity_from_grid(TokenGrid(schema, tokens), S).intervals == tr.intervals
