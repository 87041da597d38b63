"""Coasted-time decomposition of classwork sessions.

For a student present in a classwork session, with ``first`` and ``last``
the student's first and last event inside the session::

    delayed_start = first - session.start
    early_stop    = session.end - last
    idle_time     = sum of inter-event gaps longer than the idle threshold
    time_on_task  = (last - first) - idle_time
    coasted_time  = delayed_start + idle_time + early_stop

so ``coasted_time + time_on_task == session_length`` in integer seconds.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from coasting import kernels
from coasting.model import EventKind, EventTable
from coasting.sessions import ClassSession, SessionSet, SessionType

log = logging.getLogger(__name__)

DEFAULT_IDLE_THRESHOLD = 120
MIN_GAPS_FOR_THRESHOLD = 100

IDLE_FULL = "full"
IDLE_EXCESS = "excess"


@dataclass(frozen=True)
class StudentWindow:
    student_id: str
    session: ClassSession
    times: np.ndarray  # event instants clamped to the session bounds, sorted
    completions: np.ndarray  # AssignmentComplete instants, clamped, sorted

    @property
    def first_event(self) -> int:
        return int(self.times[0])

    @property
    def last_event(self) -> int:
        return int(self.times[-1])

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times)


@dataclass(frozen=True)
class CoastingRecord:
    student_id: str
    class_id: str
    session_index: int
    session_start: int
    session_length: int
    delayed_start: int
    idle_time: int
    early_stop: int
    time_on_task: int
    coasted_time: int
    adjusted_coasted_time: int
    completed_assignment: bool
    extra_effort_time: int

    def proportion(self, name: str) -> float:
        return getattr(self, name) / self.session_length

    @property
    def coasted_prop(self) -> float:
        return self.coasted_time / self.session_length

    @property
    def adjusted_prop(self) -> float:
        return self.adjusted_coasted_time / self.session_length

    @property
    def on_task_prop(self) -> float:
        return self.time_on_task / self.session_length

    @property
    def extra_effort_prop(self) -> float:
        return self.extra_effort_time / self.session_length


def _clamped(ts: np.ndarray, session: ClassSession) -> np.ndarray:
    return np.clip(np.asarray(ts, dtype=np.int64), session.start, session.end)


def student_window(
    session: ClassSession,
    student_events: Sequence[tuple[int, EventKind]] | np.ndarray,
    student_id: str = "",
) -> StudentWindow | None:
    """Window of one student's events in ``session``; ``None`` when absent.

    ``student_events`` are ``(instant, kind)`` pairs; only instants within
    the session's burst envelope are considered part of the session.
    """
    if len(student_events) == 0:
        return None
    ts = np.array([int(t) for t, _ in student_events], dtype=np.int64)
    kinds = np.array([int(k) for _, k in student_events], dtype=np.int64)
    lo, hi = session.envelope if session.envelope != (0, 0) else (session.start, session.end)
    inside = (ts >= lo) & (ts <= hi)
    if not inside.any():
        return None
    order = np.argsort(ts[inside], kind="stable")
    t = ts[inside][order]
    k = kinds[inside][order]
    times = _clamped(t, session)
    done = times[k == int(EventKind.AssignmentComplete)]
    return StudentWindow(student_id, session, times, done)


def idle_seconds(gaps: np.ndarray, idle_threshold: int, idle_mode: str = IDLE_FULL) -> int:
    long = gaps[gaps > idle_threshold]
    if idle_mode == IDLE_EXCESS:
        return int((long - idle_threshold).sum())
    return int(long.sum())


def measure_session(
    window: StudentWindow,
    session: ClassSession,
    idle_threshold: int = DEFAULT_IDLE_THRESHOLD,
    idle_mode: str = IDLE_FULL,
    session_index: int = -1,
) -> CoastingRecord:
    """Unadjusted decomposition; see :func:`adjust_for_completion` and :func:`extra_effort`."""
    first, last = window.first_event, window.last_event
    idle = idle_seconds(window.gaps, idle_threshold, idle_mode)
    delayed = max(first - session.start, 0)
    early = max(session.end - last, 0)
    on_task = (last - first) - idle
    coasted = delayed + idle + early
    return CoastingRecord(
        student_id=window.student_id,
        class_id=session.class_id,
        session_index=session_index,
        session_start=session.start,
        session_length=session.length,
        delayed_start=delayed,
        idle_time=idle,
        early_stop=early,
        time_on_task=on_task,
        coasted_time=coasted,
        adjusted_coasted_time=coasted,
        completed_assignment=False,
        extra_effort_time=0,
    )


def adjust_for_completion(record: CoastingRecord, completion_events: Sequence[int]) -> CoastingRecord:
    """Zero the early stop in the adjusted measure when an assignment was completed."""
    if len(completion_events) == 0:
        return replace(record, adjusted_coasted_time=record.coasted_time, completed_assignment=False)
    return replace(
        record,
        adjusted_coasted_time=record.delayed_start + record.idle_time,
        completed_assignment=True,
    )


def extra_effort(
    window: StudentWindow,
    idle_threshold: int = DEFAULT_IDLE_THRESHOLD,
    idle_mode: str = IDLE_FULL,
) -> int:
    """Active (idle-excluded) seconds after the first assignment completion."""
    if len(window.completions) == 0:
        return 0
    tc = int(window.completions[0])
    after = window.times[window.times >= tc]
    return int(after[-1] - tc) - idle_seconds(np.diff(after), idle_threshold, idle_mode)


def derive_idle_threshold(events: EventTable, split_gap: int | None = None) -> int:
    """Ceil-to-minute 99th percentile (nearest rank) of within-burst gaps.

    Zero gaps (several log lines in the same second) are not response times
    and are skipped. Falls back to 120 s with fewer than 100 gaps.
    """
    from coasting.sessions import DEFAULT_SPLIT_GAP

    gap_limit = DEFAULT_SPLIT_GAP if split_gap is None else split_gap
    pair = events.pair
    d = np.diff(events.ts)
    same = (pair[1:] == pair[:-1]) & (d > 0) & (d <= gap_limit)
    gaps = np.sort(d[same])
    if len(gaps) < MIN_GAPS_FOR_THRESHOLD:
        log.warning("only %d gaps; using default idle threshold", len(gaps))
        return DEFAULT_IDLE_THRESHOLD
    rank = math.ceil(0.99 * len(gaps))
    q99 = int(gaps[rank - 1])
    return max(60, 60 * math.ceil(q99 / 60))


@dataclass
class MeasureConfig:
    idle_threshold: int = DEFAULT_IDLE_THRESHOLD
    idle_mode: str = IDLE_FULL


def measure_all(sessions: SessionSet, config: MeasureConfig | None = None) -> list[CoastingRecord]:
    """Records for every (student, classwork session) pair, ordered by (session, student id)."""
    config = config or MeasureConfig()
    if config.idle_mode not in (IDLE_FULL, IDLE_EXCESS):
        raise ValueError(f"unknown idle mode {config.idle_mode!r}")
    ev = sessions.events
    if len(ev) == 0:
        return []
    event_session = sessions.burst_session[sessions.bursts.event_burst]
    is_cw = np.array(
        [s.session_type is SessionType.Classwork and s.length > 0 for s in sessions.sessions]
    )
    sel = np.flatnonzero(is_cw[event_session])
    if len(sel) == 0:
        return []
    # student ids are sorted, so sorting by the index sorts by id; stable keeps time order
    order = sel[np.lexsort((sel, ev.student[sel], event_session[sel]))]
    sess = event_session[order]
    stud = ev.student[order]
    key = sess * len(ev.student_ids) + stud
    cuts = np.flatnonzero(key[1:] != key[:-1]) + 1
    offsets = np.concatenate([[0], cuts, [len(key)]]).astype(np.int64)
    head = offsets[:-1]
    seg_sess = sess[head]
    s_start = np.array([s.start for s in sessions.sessions], dtype=np.int64)[seg_sess]
    s_end = np.array([s.end for s in sessions.sessions], dtype=np.int64)[seg_sess]
    complete = (ev.kind[order] == int(EventKind.AssignmentComplete)).astype(np.int64)
    first, last, idle, extra, done = kernels.measure_windows(
        np.ascontiguousarray(ev.ts[order]),
        complete,
        offsets,
        s_start,
        s_end,
        int(config.idle_threshold),
        config.idle_mode == IDLE_EXCESS,
    )
    delayed = first - s_start
    early = s_end - last
    on_task = (last - first) - idle
    coasted = delayed + idle + early
    adjusted = np.where(done == 1, delayed + idle, coasted)
    out = []
    for k in range(len(head)):
        s = sessions.sessions[seg_sess[k]]
        out.append(
            CoastingRecord(
                student_id=ev.student_ids[stud[head[k]]],
                class_id=s.class_id,
                session_index=int(seg_sess[k]),
                session_start=s.start,
                session_length=s.length,
                delayed_start=int(delayed[k]),
                idle_time=int(idle[k]),
                early_stop=int(early[k]),
                time_on_task=int(on_task[k]),
                coasted_time=int(coasted[k]),
                adjusted_coasted_time=int(adjusted[k]),
                completed_assignment=bool(done[k]),
                extra_effort_time=int(extra[k]),
            )
        )
    return out


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class StudentAggregate:
    student_id: str
    n_classwork_sessions: int
    coasted: float
    adjusted_coasted: float
    time_on_task: float
    extra_effort: float
    class_id: str = ""


def aggregate_student(records: Iterable[CoastingRecord]) -> StudentAggregate:
    """Unweighted mean of per-session proportions for one student."""
    recs = list(records)
    if not recs:
        raise ValueError("at least one classwork record required")
    ids = {r.student_id for r in recs}
    if len(ids) != 1:
        raise ValueError("records span several students")
    classes = defaultdict(int)
    for r in recs:
        classes[r.class_id] += 1
    # home class: most classwork sessions, ties to the smallest id
    home = min(classes, key=lambda c: (-classes[c], c))
    n = len(recs)
    return StudentAggregate(
        student_id=recs[0].student_id,
        n_classwork_sessions=n,
        coasted=math.fsum(r.coasted_prop for r in recs) / n,
        adjusted_coasted=math.fsum(r.adjusted_prop for r in recs) / n,
        time_on_task=math.fsum(r.on_task_prop for r in recs) / n,
        extra_effort=math.fsum(r.extra_effort_prop for r in recs) / n,
        class_id=home,
    )


def aggregate_students(records: Iterable[CoastingRecord]) -> dict[str, StudentAggregate]:
    by_student = defaultdict(list)
    for r in records:
        by_student[r.student_id].append(r)
    return {sid: aggregate_student(by_student[sid]) for sid in sorted(by_student)}


COMPONENTS = (
    ("Available Time", "session_length"),
    ("Time on Task", "time_on_task"),
    ("Total Coasted Time", "coasted_time"),
    ("Delayed Start", "delayed_start"),
    ("Idle Time", "idle_time"),
    ("Early Stop", "early_stop"),
    ("Adjusted Coasted Time", "adjusted_coasted_time"),
    ("Extra Effort", "extra_effort_time"),
)


@dataclass(frozen=True)
class DescriptiveRow:
    measure: str
    field: str
    n: int
    mean: float  # minutes
    sd: float
    median: float
    pct_available: float
    pct_coasted: float
    mean_proportion: float  # mean of per-unit proportions of available time


def corpus_descriptives(
    records: Sequence[CoastingRecord], weighting: str = "session"
) -> list[DescriptiveRow]:
    """Corpus summary in minutes.

    ``weighting="session"`` treats each (student, session) record as a unit;
    ``"student"`` first averages each student's records. ``pct_available`` and
    ``pct_coasted`` are ratios of means, ``mean_proportion`` the mean of
    per-unit proportions.
    """
    if not records:
        return []
    fields = [f for _, f in COMPONENTS]
    mat = np.array([[getattr(r, f) for f in fields] for r in records], dtype=float) / 60.0
    prop = mat / mat[:, [0]]
    if weighting == "student":
        sids = np.array([r.student_id for r in records])
        uniq, inv = np.unique(sids, return_inverse=True)
        counts = np.bincount(inv).astype(float)
        mat = np.stack([np.bincount(inv, mat[:, j]) / counts for j in range(mat.shape[1])], 1)
        prop = np.stack([np.bincount(inv, prop[:, j]) / counts for j in range(prop.shape[1])], 1)
    elif weighting != "session":
        raise ValueError(f"unknown weighting {weighting!r}")
    means = mat.mean(axis=0)
    sds = mat.std(axis=0, ddof=1) if len(mat) > 1 else np.zeros(len(fields))
    medians = np.median(mat, axis=0)
    avail, coasted = means[0], means[2]
    rows = []
    for j, (label, f) in enumerate(COMPONENTS):
        rows.append(
            DescriptiveRow(
                measure=label,
                field=f,
                n=len(mat),
                mean=float(means[j]),
                sd=float(sds[j]),
                median=float(medians[j]),
                pct_available=float(means[j] / avail) if avail > 0 else float("nan"),
                pct_coasted=float(means[j] / coasted) if coasted > 0 else float("nan"),
                mean_proportion=float(prop[:, j].mean()),
            )
        )
    return rows


# ---------------------------------------------------------------- export

RECORD_COLUMNS = (
    "student_id", "class_id", "session_index", "session_start", "session_length",
    "delayed_start", "idle_time", "early_stop", "time_on_task", "coasted_time",
    "adjusted_coasted_time", "completed_assignment", "extra_effort_time",
    "delayed_start_prop", "idle_time_prop", "early_stop_prop", "time_on_task_prop",
    "coasted_prop", "adjusted_coasted_prop", "extra_effort_prop",
)


def write_records_csv(records: Sequence[CoastingRecord], path: str | Path) -> None:
    from coasting.model import format_timestamp

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            d = asdict(r)
            d["session_start"] = format_timestamp(r.session_start)
            d["completed_assignment"] = int(r.completed_assignment)
            L = r.session_length
            props = [
                r.delayed_start / L, r.idle_time / L, r.early_stop / L, r.time_on_task / L,
                r.coasted_time / L, r.adjusted_coasted_time / L, r.extra_effort_time / L,
            ]
            w.writerow([d[c] for c in RECORD_COLUMNS[:13]] + [f"{p:.10f}" for p in props])


AGGREGATE_COLUMNS = (
    "student_id", "class_id", "n_classwork_sessions", "coasted", "adjusted_coasted",
    "time_on_task", "extra_effort",
)


def write_aggregates_csv(aggs: dict[str, StudentAggregate], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for sid in sorted(aggs):
            a = aggs[sid]
            w.writerow(
                [a.student_id, a.class_id, a.n_classwork_sessions]
                + [f"{v:.10f}" for v in (a.coasted, a.adjusted_coasted, a.time_on_task, a.extra_effort)]
            )
