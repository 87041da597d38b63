"""Activity bursts, class-session reconstruction and session-type classification.

A burst is a maximal run of one student's events in one class with no gap
longer than ``split_gap``. Bursts of a class that overlap or touch are
merged into a candidate class session; the session is then labelled from
its start instant in school-local time and its peak number of concurrently
active students.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coasting import kernels
from coasting.model import EventTable, SchoolCalendar, format_timestamp

DEFAULT_SPLIT_GAP = 15 * 60
DEFAULT_MIN_CLASSWORK_CONCURRENCY = 5


class SessionType(str, enum.Enum):
    Classwork = "Classwork"
    IndependentWork = "IndependentWork"
    Homework = "Homework"


@dataclass(frozen=True)
class ActivityBurst:
    student_id: str
    class_id: str
    start: int
    end: int
    event_count: int


@dataclass(frozen=True)
class BurstTable:
    """Column store of bursts, ordered by (student, class, start).

    ``event_burst[i]`` is the burst of event ``i`` of the source table.
    """

    events: EventTable
    event_burst: np.ndarray
    student: np.ndarray
    klass: np.ndarray
    start: np.ndarray
    end: np.ndarray
    count: np.ndarray

    def __len__(self) -> int:
        return len(self.start)

    def burst(self, i: int) -> ActivityBurst:
        return ActivityBurst(
            self.events.student_ids[self.student[i]],
            self.events.class_ids[self.klass[i]],
            int(self.start[i]),
            int(self.end[i]),
            int(self.count[i]),
        )

    def __iter__(self):
        return (self.burst(i) for i in range(len(self)))


@dataclass
class ClassSession:
    class_id: str
    start: int
    end: int
    bursts: np.ndarray  # indices into the BurstTable
    peak_concurrency: int = 0
    n_students: int = 0
    session_type: SessionType | None = None
    envelope: tuple[int, int] = (0, 0)

    @property
    def length(self) -> int:
        return self.end - self.start


def segment_bursts(events: EventTable, split_gap: int = DEFAULT_SPLIT_GAP) -> BurstTable:
    """Split each (student, class) event stream wherever the gap exceeds ``split_gap`` seconds."""
    ts = np.ascontiguousarray(events.ts, dtype=np.int64)
    pair = np.ascontiguousarray(events.pair, dtype=np.int64)
    event_burst = kernels.split_bursts(ts, pair, int(split_gap))
    if len(ts) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return BurstTable(events, event_burst, empty, empty, empty, empty, empty)
    firsts = np.flatnonzero(np.diff(event_burst, prepend=-1))
    lasts = np.append(firsts[1:] - 1, len(ts) - 1)
    return BurstTable(
        events,
        event_burst,
        events.student[firsts],
        events.klass[firsts],
        ts[firsts],
        ts[lasts],
        lasts - firsts + 1,
    )


def _offsets(keys: np.ndarray) -> np.ndarray:
    """Run boundaries of a sorted key array, as an offsets vector."""
    if len(keys) == 0:
        return np.zeros(1, dtype=np.int64)
    cuts = np.flatnonzero(keys[1:] != keys[:-1]) + 1
    return np.concatenate([[0], cuts, [len(keys)]]).astype(np.int64)


def build_class_sessions(bursts: BurstTable) -> tuple[list[ClassSession], np.ndarray]:
    """Merge overlapping or touching bursts of each class into candidate sessions.

    Returns the sessions ordered by (class, start) and the session index of
    every burst.
    """
    order = np.lexsort((bursts.end, bursts.start, bursts.klass))
    starts = np.ascontiguousarray(bursts.start[order])
    ends = np.ascontiguousarray(bursts.end[order])
    labels = kernels.label_overlaps(starts, ends, _offsets(bursts.klass[order]))
    burst_session = np.empty(len(bursts), dtype=np.int64)
    burst_session[order] = labels
    sessions = []
    if len(order):
        seg = _offsets(labels)
        for k in range(len(seg) - 1):
            members = np.sort(order[seg[k] : seg[k + 1]])
            lo = int(starts[seg[k] : seg[k + 1]].min())
            hi = int(ends[seg[k] : seg[k + 1]].max())
            sessions.append(
                ClassSession(
                    bursts.events.class_ids[bursts.klass[members[0]]],
                    lo, hi, members, envelope=(lo, hi),
                )
            )
    _attach_concurrency(sessions, bursts, burst_session)
    return sessions, burst_session


def _student_intervals(bursts: BurstTable, burst_session: np.ndarray):
    """Per (session, student) union of bursts, merged where they overlap or touch."""
    order = np.lexsort((bursts.end, bursts.start, bursts.student, burst_session))
    sess = burst_session[order]
    stud = bursts.student[order]
    key = sess * (int(bursts.student.max(initial=0)) + 1) + stud
    starts = np.ascontiguousarray(bursts.start[order])
    ends = np.ascontiguousarray(bursts.end[order])
    comp = kernels.label_overlaps(starts, ends, _offsets(key))
    seg = _offsets(comp)
    lo = seg[:-1]
    m_start = starts[lo]
    m_end = np.maximum.reduceat(ends, lo) if len(lo) else ends[:0]
    return sess[lo], stud[lo], m_start, m_end


def _attach_concurrency(sessions, bursts, burst_session) -> None:
    if not sessions:
        return
    sess, stud, m_start, m_end = _student_intervals(bursts, burst_session)
    # starts and ends are sorted independently within each session
    so = np.lexsort((m_start, sess))
    eo = np.lexsort((m_end, sess))
    offsets = np.searchsorted(sess[so], np.arange(len(sessions) + 1)).astype(np.int64)
    peaks = kernels.peak_concurrency(
        np.ascontiguousarray(m_start[so]), np.ascontiguousarray(m_end[eo]), offsets
    )
    n_students = np.zeros(len(sessions), dtype=np.int64)
    uniq = np.unique(np.stack([sess, stud]), axis=1)
    np.add.at(n_students, uniq[0], 1)
    for k, s in enumerate(sessions):
        s.peak_concurrency = int(peaks[k])
        s.n_students = int(n_students[k])


def concurrency_profile(session: ClassSession, bursts: BurstTable):
    """Step function of distinct active students over the session.

    Returns ``(times, counts, peak)``: ``counts[i]`` holds from ``times[i]``
    until ``times[i + 1]``. Intervals are closed, so a student whose burst
    ends at ``t`` and one starting at ``t`` are simultaneously active.
    """
    members = session.bursts
    sel = BurstTable(
        bursts.events, bursts.event_burst,
        bursts.student[members], bursts.klass[members],
        bursts.start[members], bursts.end[members], bursts.count[members],
    )
    _, _, m_start, m_end = _student_intervals(sel, np.zeros(len(members), dtype=np.int64))
    # +1 at start, -1 just after end (closed intervals on an integer clock)
    points = np.concatenate([m_start, m_end + 1])
    deltas = np.concatenate([np.ones(len(m_start), np.int64), -np.ones(len(m_end), np.int64)])
    order = np.argsort(points, kind="stable")
    times, inv = np.unique(points[order], return_inverse=True)
    change = np.zeros(len(times), dtype=np.int64)
    np.add.at(change, inv, deltas[order])
    counts = np.cumsum(change)
    return times, counts, int(counts.max(initial=0))


def classify_session(
    session: ClassSession,
    calendar: SchoolCalendar,
    min_classwork_concurrency: int = DEFAULT_MIN_CLASSWORK_CONCURRENCY,
) -> SessionType:
    if not calendar.in_school_hours(session.start):
        return SessionType.Homework
    if session.peak_concurrency > min_classwork_concurrency:
        return SessionType.Classwork
    return SessionType.IndependentWork


@dataclass
class SessionConfig:
    split_gap: int = DEFAULT_SPLIT_GAP
    min_classwork_concurrency: int = DEFAULT_MIN_CLASSWORK_CONCURRENCY
    trim_quantile: float = 0.0  # 0 disables boundary trimming


@dataclass
class SessionSet:
    events: EventTable
    bursts: BurstTable
    sessions: list[ClassSession]
    burst_session: np.ndarray
    config: SessionConfig = field(default_factory=SessionConfig)

    def of_type(self, kind: SessionType) -> list[int]:
        return [i for i, s in enumerate(self.sessions) if s.session_type is kind]


def _trim(session: ClassSession, bursts: BurstTable, q: float) -> None:
    m = session.bursts
    first = {}
    last = {}
    for st, a, b in zip(bursts.student[m], bursts.start[m], bursts.end[m]):
        first[st] = min(first.get(st, a), a)
        last[st] = max(last.get(st, b), b)
    lo = int(np.floor(np.quantile(np.fromiter(first.values(), float), q)))
    hi = int(np.ceil(np.quantile(np.fromiter(last.values(), float), 1.0 - q)))
    if hi > lo:
        session.start, session.end = lo, hi


def infer_sessions(
    events: EventTable,
    calendars: dict[str, SchoolCalendar] | SchoolCalendar,
    config: SessionConfig | None = None,
) -> SessionSet:
    """Bursts -> class sessions -> labels, for every class in ``events``."""
    config = config or SessionConfig()
    bursts = segment_bursts(events, config.split_gap)
    sessions, burst_session = build_class_sessions(bursts)
    for s in sessions:
        cal = calendars if isinstance(calendars, SchoolCalendar) else calendars[s.class_id]
        if config.trim_quantile > 0:
            _trim(s, bursts, config.trim_quantile)
        s.session_type = classify_session(s, cal, config.min_classwork_concurrency)
    return SessionSet(events, bursts, sessions, burst_session, config)


SESSION_COLUMNS = ("class_id", "start", "end", "type", "peak_concurrency", "n_students")


def write_sessions_csv(sessions: list[ClassSession], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SESSION_COLUMNS)
        for s in sessions:
            w.writerow(
                [
                    s.class_id,
                    format_timestamp(s.start),
                    format_timestamp(s.end),
                    s.session_type.value if s.session_type else "",
                    s.peak_concurrency,
                    s.n_students,
                ]
            )
