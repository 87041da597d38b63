import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coasting.model import SchoolCalendar
from coasting.sessions import (
    SESSION_COLUMNS,
    ClassSession,
    SessionConfig,
    SessionType,
    build_class_sessions,
    classify_session,
    concurrency_profile,
    infer_sessions,
    segment_bursts,
    write_sessions_csv,
)

from helpers import dense, local, table

NY = SchoolCalendar("America/New_York")


def bursts_of(rows, gap=900):
    return segment_bursts(table(rows), gap)


def test_close_events_form_one_burst():
    b = bursts_of([("s", "c", 0, "Response"), ("s", "c", 60, "Response"), ("s", "c", 120, "Response")])
    assert [(x.start, x.end, x.event_count) for x in b] == [(0, 120, 3)]


def test_gap_over_split_starts_new_burst():
    b = bursts_of([("s", "c", 0, "Response"), ("s", "c", 1200, "Response")])
    assert [(x.start, x.end) for x in b] == [(0, 0), (1200, 1200)]
    # a gap equal to split_gap does not split
    b = bursts_of([("s", "c", 0, "Response"), ("s", "c", 900, "Response")])
    assert len(b) == 1


def test_empty_log():
    b = bursts_of([])
    assert len(b) == 0
    sessions, lab = build_class_sessions(b)
    assert sessions == [] and len(lab) == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.integers(0, 20_000)), max_size=60),
       st.integers(1, 3000))
def test_bursts_match_quadratic_scanner(raw, gap):
    rows = [(f"s{s}", f"c{c}", t, "Response", f"a{i}") for i, (s, c, t) in enumerate(raw)]
    ev = table(rows)
    b = segment_bursts(ev, gap)
    n = len(ev)
    ts, pair = ev.ts, ev.pair
    # two events share a burst iff same (student, class) and no consecutive gap between them exceeds split_gap
    for i in range(n):
        for j in range(i + 1, n):
            same = pair[i] == pair[j] and all(
                ts[k + 1] - ts[k] <= gap for k in range(i, j)
            ) and all(pair[k] == pair[i] for k in range(i, j + 1))
            assert (b.event_burst[i] == b.event_burst[j]) == same
    for x in range(len(b)):
        assert b.start[x] <= b.end[x] and b.count[x] >= 1


def test_overlapping_bursts_merge():
    rows = dense("a", "c", 0, 600) + dense("b", "c", 300, 1200)
    sessions, _ = build_class_sessions(bursts_of(rows))
    assert [(s.start, s.end) for s in sessions] == [(0, 1200)]


def test_disjoint_bursts_stay_apart():
    rows = dense("a", "c", 0, 600) + dense("b", "c", 2400, 3000)
    sessions, _ = build_class_sessions(bursts_of(rows))
    assert [(s.start, s.end) for s in sessions] == [(0, 600), (2400, 3000)]


def test_touching_bursts_merge():
    rows = [("a", "c", 0, "Response"), ("a", "c", 100, "Response"),
            ("b", "c", 100, "Response"), ("b", "c", 200, "Response")]
    sessions, _ = build_class_sessions(bursts_of(rows))
    assert len(sessions) == 1 and sessions[0].peak_concurrency == 2


def _union_find_groups(bursts):
    n = len(bursts)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(i + 1, n):
            if bursts.klass[i] == bursts.klass[j] and bursts.start[i] <= bursts.end[j] and bursts.start[j] <= bursts.end[i]:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


@pytest.mark.parametrize("seed", range(5))
def test_sessions_match_interval_graph_components(seed):
    rng = random.Random(seed)
    rows = []
    for k in range(100):
        cls = f"c{rng.randrange(3)}"
        start = rng.randrange(0, 40_000)
        rows += [(f"s{k}", cls, start, "Response"), (f"s{k}", cls, start + rng.randrange(0, 900), "Response")]
    b = bursts_of(rows)
    assert len(b) == 100
    sessions, lab = build_class_sessions(b)
    got = {frozenset(np.flatnonzero(lab == s).tolist()) for s in range(len(sessions))}
    assert got == _union_find_groups(b)
    for s_i, s in enumerate(sessions):
        assert set(s.bursts.tolist()) == set(np.flatnonzero(lab == s_i).tolist())
        assert s.start == b.start[s.bursts].min() and s.end == b.end[s.bursts].max()


def test_concurrency_small_cases():
    one = bursts_of(dense("a", "c", 0, 600))
    sessions, _ = build_class_sessions(one)
    assert sessions[0].peak_concurrency == 1
    six = bursts_of(sum((dense(f"s{i}", "c", 0, 600) for i in range(6)), []))
    sessions, _ = build_class_sessions(six)
    assert sessions[0].peak_concurrency == 6
    _, counts, peak = concurrency_profile(sessions[0], six)
    assert peak == 6 and counts[-1] == 0


@pytest.mark.parametrize("seed", range(5))
def test_peak_matches_per_second_count(seed):
    rng = random.Random(100 + seed)
    rows = []
    for s in range(12):
        t = rng.randrange(0, 1500)
        for _ in range(rng.randrange(1, 4)):
            end = t + rng.randrange(0, 400)
            rows += dense(f"s{s}", "c", t, end, step=97)
            t = end + rng.randrange(901, 1400)
    b = bursts_of(rows)
    sessions, lab = build_class_sessions(b)
    for s_i, s in enumerate(sessions):
        members = np.flatnonzero(lab == s_i)
        best = 0
        for sec in range(s.start, s.end + 1):
            active = {b.student[m] for m in members if b.start[m] <= sec <= b.end[m]}
            best = max(best, len(active))
        assert s.peak_concurrency == best
        assert concurrency_profile(s, b)[2] == best


def _session(start, peak):
    return ClassSession("c", start, start + 1800, np.zeros(0, np.int64), peak, peak)


def test_classification_rules():
    assert classify_session(_session(local(2023, 3, 7, 9, 0), 12), NY) is SessionType.Classwork
    assert classify_session(_session(local(2023, 3, 11, 10, 0), 20), NY) is SessionType.Homework
    assert classify_session(_session(local(2023, 3, 7, 10, 0), 3), NY) is SessionType.IndependentWork
    assert classify_session(_session(local(2023, 3, 7, 10, 0), 5), NY) is SessionType.IndependentWork
    assert classify_session(_session(local(2023, 3, 7, 10, 0), 6), NY) is SessionType.Classwork
    assert classify_session(_session(local(2023, 3, 7, 14, 50), 8), NY) is SessionType.Classwork
    assert classify_session(_session(local(2023, 3, 7, 10, 0), 6), NY, 6) is SessionType.IndependentWork


def _class_rows(start, n, cls="c", length=1500):
    return sum((dense(f"{cls}-s{i}", cls, start + 7 * i, start + length - 5 * i, step=60) for i in range(n)), [])


def test_infer_sessions_labels_and_is_order_free():
    rows = (
        _class_rows(local(2023, 3, 7, 9, 0), 8)
        + _class_rows(local(2023, 3, 8, 10, 0), 2)
        + _class_rows(local(2023, 3, 8, 19, 0), 1)
    )
    ss = infer_sessions(table(rows), NY)
    kinds = [s.session_type for s in ss.sessions]
    assert kinds == [SessionType.Classwork, SessionType.IndependentWork, SessionType.Homework]
    random.Random(3).shuffle(rows)
    again = infer_sessions(table(rows), {"c": NY})
    assert [s.session_type for s in again.sessions] == kinds
    assert ss.of_type(SessionType.Classwork) == [0]


def test_trim_narrows_bounds():
    rows = _class_rows(local(2023, 3, 7, 9, 0), 10)
    full = infer_sessions(table(rows), NY).sessions[0]
    trimmed = infer_sessions(table(rows), NY, SessionConfig(trim_quantile=0.2)).sessions[0]
    assert full.start < trimmed.start < trimmed.end < full.end


def test_every_event_in_one_burst_and_session(small_sim):
    ss = infer_sessions(small_sim.events, {r.class_id: SchoolCalendar(r.timezone) for r in small_sim.roster})
    assert len(ss.bursts.event_burst) == len(small_sim.events)
    assert ss.burst_session.min() >= 0 and ss.burst_session.max() == len(ss.sessions) - 1
    for s in ss.sessions:
        assert s.peak_concurrency >= 1 and s.start <= s.end


def test_classwork_recovers_scheduled_sessions(small_sim):
    ss = infer_sessions(small_sim.events, {r.class_id: SchoolCalendar(r.timezone) for r in small_sim.roster})
    sched = {(t.class_id, t.session_start, t.session_end) for t in small_sim.truth.records}
    cw = [s for s in ss.sessions if s.session_type is SessionType.Classwork]
    assert cw
    for s in cw:
        best = min(sched, key=lambda x: abs(x[1] - s.start) + abs(x[2] - s.end) if x[0] == s.class_id else 1e18)
        assert abs(best[1] - s.start) <= 900 and abs(best[2] - s.end) <= 900


def test_sessions_csv(tmp_path):
    ss = infer_sessions(table(_class_rows(local(2023, 3, 7, 9, 0), 7)), NY)
    write_sessions_csv(ss.sessions, tmp_path / "s.csv")
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SESSION_COLUMNS
    assert rows[1][3] == "Classwork" and rows[1][4] == "7" and rows[1][1].endswith("Z")
