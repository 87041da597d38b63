"""Canonical record types and CSV ingestion for logs, rosters and assessments.

Events are held column-wise in an :class:`EventTable` (numpy arrays plus
string dictionaries) because the pipeline runs per-event loops over
millions of rows; :class:`TransactionEvent` is the row view.
"""

from __future__ import annotations

import configparser
import csv
import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, time, timezone
from pathlib import Path
from typing import Iterator
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

import numpy as np

log = logging.getLogger(__name__)


class IngestError(ValueError):
    """Hard ingestion failure (missing column, duplicate key, bad timezone)."""


class EventKind(enum.IntEnum):
    # Integer order is the tie-break order for equal timestamps.
    AssignmentStart = 0
    ProblemStart = 1
    HintRequest = 2
    Response = 3
    AssignmentComplete = 4


class Gender(str, enum.Enum):
    Male = "Male"
    Female = "Female"
    Missing = "Missing"


class Ethnicity(str, enum.Enum):
    White = "White"
    AfricanAmerican = "AfricanAmerican"
    Hispanic = "Hispanic"
    Other = "Other"
    Missing = "Missing"


class TriState(str, enum.Enum):
    Eligible = "Eligible"
    NotEligible = "NotEligible"
    Missing = "Missing"


class Locale(str, enum.Enum):
    Urban = "Urban"
    Rural = "Rural"
    Missing = "Missing"


@dataclass(frozen=True)
class TransactionEvent:
    student_id: str
    class_id: str
    timestamp: int  # UTC epoch seconds
    event_kind: EventKind
    assignment_id: str
    problem_id: str | None = None

    def sort_key(self):
        return (
            self.student_id,
            self.class_id,
            self.timestamp,
            int(self.event_kind),
            self.assignment_id,
            self.problem_id or "",
        )


@dataclass(frozen=True)
class StudentProfile:
    student_id: str
    gender: Gender = Gender.Missing
    ethnicity: Ethnicity = Ethnicity.Missing
    frl: TriState = TriState.Missing
    iep: TriState = TriState.Missing
    ell: TriState = TriState.Missing
    locale: Locale = Locale.Missing


@dataclass(frozen=True)
class AssessmentRecord:
    student_id: str
    map_fall: float | None = None
    map_spring: float | None = None


@dataclass(frozen=True)
class SchoolCalendar:
    timezone: str = "America/New_York"
    school_day_start: time = time(7, 0)
    school_day_end: time = time(15, 0)
    weekend_days: tuple[int, ...] = (5, 6)  # Monday == 0

    def __post_init__(self):
        if not self.school_day_start < self.school_day_end:
            raise IngestError("school_day_start must be before school_day_end")
        try:
            ZoneInfo(self.timezone)
        except (ZoneInfoNotFoundError, ValueError) as exc:
            raise IngestError(f"unresolvable timezone {self.timezone!r}") from exc

    @property
    def zone(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)

    def local(self, instant: int) -> datetime:
        return datetime.fromtimestamp(instant, tz=timezone.utc).astimezone(self.zone)

    def in_school_hours(self, instant: int) -> bool:
        loc = self.local(instant)
        if loc.weekday() in self.weekend_days:
            return False
        return self.school_day_start <= loc.time() < self.school_day_end


@dataclass
class IngestReport:
    source: str
    rows_read: int = 0
    accepted: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)
    warnings: Counter = field(default_factory=Counter)

    def reject(self, reason: str) -> None:
        self.rejected += 1
        self.reasons[reason] += 1

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "rows_read": self.rows_read,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "reasons": dict(sorted(self.reasons.items())),
            "warnings": dict(sorted(self.warnings.items())),
        }


# ---------------------------------------------------------------- config files


def read_keyvalue(path: str | Path) -> dict[str, str]:
    """Parse a plain ``key = value`` file (``#`` comments, no sections)."""
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"), strict=True
    )
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[root]\n" + text, source=str(path))
    return dict(parser["root"])


EVENT_FIELDS = ("student_id", "class_id", "timestamp", "event_kind", "assignment_id", "problem_id")
PROFILE_FIELDS = ("student_id", "gender", "ethnicity", "frl", "iep", "ell", "locale")
ASSESSMENT_FIELDS = ("student_id", "map_fall", "map_spring")
CLASS_FIELDS = ("class_id", "school_id", "timezone")


def load_mapping(path: str | Path | None, fields: tuple[str, ...]) -> dict[str, str]:
    """Column mapping (canonical field -> source column); identity when no file."""
    mapping = {f: f for f in fields}
    if path is not None:
        given = read_keyvalue(path)
        unknown = sorted(set(given) - set(fields))
        if unknown:
            raise IngestError(f"unknown canonical fields in mapping: {', '.join(unknown)}")
        mapping.update(given)
    return mapping


# ---------------------------------------------------------------- timestamps


def parse_timestamp(text: str, default_zone: ZoneInfo) -> int:
    """ISO-8601 or epoch seconds to UTC epoch seconds; naive times use ``default_zone``."""
    s = text.strip()
    if not s:
        raise ValueError("empty timestamp")
    if s.lstrip("-").isdigit():
        return int(s)
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=default_zone)
    return math.floor(dt.timestamp())


def format_timestamp(instant: int) -> str:
    return datetime.fromtimestamp(int(instant), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


_KIND_ALIASES = {}
for _k in EventKind:
    _KIND_ALIASES[_k.name.lower()] = _k
    snake = "".join("_" + c.lower() if c.isupper() else c for c in _k.name).lstrip("_")
    _KIND_ALIASES[snake] = _k


def parse_kind(text: str) -> EventKind:
    return _KIND_ALIASES[text.strip().lower()]


# ---------------------------------------------------------------- event table


@dataclass(frozen=True)
class EventTable:
    """Immutable column store of events sorted by (student, class, time, kind, assignment, problem).

    ``student``, ``klass``, ``assignment`` and ``problem`` hold indices into
    the sorted id lists; ``problem`` uses -1 for absent.
    """

    student_ids: tuple[str, ...]
    class_ids: tuple[str, ...]
    assignment_ids: tuple[str, ...]
    problem_ids: tuple[str, ...]
    student: np.ndarray
    klass: np.ndarray
    ts: np.ndarray
    kind: np.ndarray
    assignment: np.ndarray
    problem: np.ndarray

    def __len__(self) -> int:
        return len(self.ts)

    def __iter__(self) -> Iterator[TransactionEvent]:
        for i in range(len(self)):
            yield self.event(i)

    def event(self, i: int) -> TransactionEvent:
        p = int(self.problem[i])
        return TransactionEvent(
            student_id=self.student_ids[self.student[i]],
            class_id=self.class_ids[self.klass[i]],
            timestamp=int(self.ts[i]),
            event_kind=EventKind(int(self.kind[i])),
            assignment_id=self.assignment_ids[self.assignment[i]],
            problem_id=None if p < 0 else self.problem_ids[p],
        )

    @property
    def pair(self) -> np.ndarray:
        """Integer code of the (student, class) pair, nondecreasing in table order."""
        return self.student * len(self.class_ids) + self.klass

    @classmethod
    def from_events(cls, events) -> EventTable:
        events = list(events)
        sids = tuple(sorted({e.student_id for e in events}))
        cids = tuple(sorted({e.class_id for e in events}))
        aids = tuple(sorted({e.assignment_id for e in events}))
        pids = tuple(sorted({e.problem_id for e in events if e.problem_id is not None}))
        s_ix = {v: i for i, v in enumerate(sids)}
        c_ix = {v: i for i, v in enumerate(cids)}
        a_ix = {v: i for i, v in enumerate(aids)}
        p_ix = {v: i for i, v in enumerate(pids)}
        n = len(events)
        student = np.fromiter((s_ix[e.student_id] for e in events), np.int64, n)
        klass = np.fromiter((c_ix[e.class_id] for e in events), np.int64, n)
        ts = np.fromiter((e.timestamp for e in events), np.int64, n)
        kind = np.fromiter((int(e.event_kind) for e in events), np.int64, n)
        assignment = np.fromiter((a_ix[e.assignment_id] for e in events), np.int64, n)
        problem = np.fromiter(
            (-1 if e.problem_id is None else p_ix[e.problem_id] for e in events), np.int64, n
        )
        # ids are sorted, so index order equals string order; absent problem sorts first
        order = np.lexsort((problem, assignment, kind, ts, klass, student))
        return cls(
            sids, cids, aids, pids,
            student[order], klass[order], ts[order], kind[order],
            assignment[order], problem[order],
        )

    def duplicate_mask(self) -> np.ndarray:
        """True for rows identical to their predecessor on every sort key."""
        if len(self) == 0:
            return np.zeros(0, dtype=bool)
        cols = (self.student, self.klass, self.ts, self.kind, self.assignment, self.problem)
        same = np.ones(len(self) - 1, dtype=bool)
        for c in cols:
            same &= c[1:] == c[:-1]
        return np.concatenate([[False], same])

    def take(self, mask: np.ndarray) -> EventTable:
        return EventTable(
            self.student_ids, self.class_ids, self.assignment_ids, self.problem_ids,
            self.student[mask], self.klass[mask], self.ts[mask], self.kind[mask],
            self.assignment[mask], self.problem[mask],
        )


# ---------------------------------------------------------------- readers


def _open_rows(path: str | Path, mapping: dict[str, str], required: tuple[str, ...]):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    missing = [f for f in required if mapping[f] not in header]
    if missing:
        fh.close()
        cols = ", ".join(f"{f} (column {mapping[f]!r})" for f in missing)
        raise IngestError(f"{path}: missing mandatory column(s): {cols}")
    return fh, reader


def ingest_events(
    path: str | Path,
    schema: dict[str, str] | None = None,
    default_timezone: str = "UTC",
    class_timezones: dict[str, str] | None = None,
) -> tuple[EventTable, IngestReport]:
    """Read, validate and sort an event log.

    Timestamps without an offset are read as local time of the class's
    school (``class_timezones``), else of ``default_timezone``.
    """
    mapping = {f: f for f in EVENT_FIELDS}
    mapping.update(schema or {})
    default_zone = ZoneInfo(default_timezone)
    zones = {c: ZoneInfo(tz) for c, tz in (class_timezones or {}).items()}
    report = IngestReport(str(path))
    has_problem = True
    events = []
    fh, reader = _open_rows(path, mapping, EVENT_FIELDS[:-1])
    with fh:
        has_problem = mapping["problem_id"] in (reader.fieldnames or [])
        for row in reader:
            report.rows_read += 1
            sid = (row.get(mapping["student_id"]) or "").strip()
            cid = (row.get(mapping["class_id"]) or "").strip()
            aid = (row.get(mapping["assignment_id"]) or "").strip()
            if not sid or not cid or not aid:
                report.reject("missing id")
                continue
            try:
                ts = parse_timestamp(
                    row.get(mapping["timestamp"]) or "", zones.get(cid, default_zone)
                )
            except (ValueError, OverflowError):
                report.reject("unparseable timestamp")
                continue
            try:
                kind = parse_kind(row.get(mapping["event_kind"]) or "")
            except KeyError:
                report.reject("unknown event kind")
                continue
            pid = (row.get(mapping["problem_id"]) or "").strip() if has_problem else ""
            events.append(TransactionEvent(sid, cid, ts, kind, aid, pid or None))
    table = EventTable.from_events(events)
    dup = table.duplicate_mask()
    if dup.any():
        for _ in range(int(dup.sum())):
            report.reject("duplicate event")
        table = table.take(~dup)
    report.accepted = len(table)
    if report.rejected:
        log.warning("%s: rejected %d of %d rows", path, report.rejected, report.rows_read)
    return table, report


_GENDER = {"male": Gender.Male, "m": Gender.Male, "female": Gender.Female, "f": Gender.Female}
_ETHNICITY = {
    "white": Ethnicity.White,
    "africanamerican": Ethnicity.AfricanAmerican,
    "african american": Ethnicity.AfricanAmerican,
    "black": Ethnicity.AfricanAmerican,
    "hispanic": Ethnicity.Hispanic,
    "other": Ethnicity.Other,
}
_TRI = {
    "eligible": TriState.Eligible, "yes": TriState.Eligible, "y": TriState.Eligible,
    "1": TriState.Eligible, "true": TriState.Eligible,
    "noteligible": TriState.NotEligible, "not eligible": TriState.NotEligible,
    "no": TriState.NotEligible, "n": TriState.NotEligible, "0": TriState.NotEligible,
    "false": TriState.NotEligible,
}
_LOCALE = {"urban": Locale.Urban, "rural": Locale.Rural}
_MISSING_TOKENS = {"", "missing", "na", "n/a", "nan", "null", "none"}


def _categorical(raw: str | None, table: dict, missing, name: str, report: IngestReport):
    key = (raw or "").strip().lower()
    if key in _MISSING_TOKENS:
        return missing
    try:
        return table[key]
    except KeyError:
        report.warnings[f"unknown {name} value"] += 1
        return missing


def ingest_profiles(
    path: str | Path, schema: dict[str, str] | None = None
) -> tuple[dict[str, StudentProfile], IngestReport]:
    mapping = {f: f for f in PROFILE_FIELDS}
    mapping.update(schema or {})
    report = IngestReport(str(path))
    out: dict[str, StudentProfile] = {}
    fh, reader = _open_rows(path, mapping, ("student_id",))
    with fh:
        header = set(reader.fieldnames or [])
        for row in reader:
            report.rows_read += 1
            sid = (row.get(mapping["student_id"]) or "").strip()
            if not sid:
                report.reject("missing id")
                continue
            if sid in out:
                raise IngestError(f"{path}: duplicate student_id {sid!r}")

            def col(f):
                return row.get(mapping[f]) if mapping[f] in header else None

            out[sid] = StudentProfile(
                sid,
                gender=_categorical(col("gender"), _GENDER, Gender.Missing, "gender", report),
                ethnicity=_categorical(
                    col("ethnicity"), _ETHNICITY, Ethnicity.Missing, "ethnicity", report
                ),
                frl=_categorical(col("frl"), _TRI, TriState.Missing, "frl", report),
                iep=_categorical(col("iep"), _TRI, TriState.Missing, "iep", report),
                ell=_categorical(col("ell"), _TRI, TriState.Missing, "ell", report),
                locale=_categorical(col("locale"), _LOCALE, Locale.Missing, "locale", report),
            )
            report.accepted += 1
    return out, report


def _score(raw: str | None) -> float | None:
    s = (raw or "").strip()
    if s.lower() in _MISSING_TOKENS:
        return None
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("non-finite score")
    return v


def ingest_assessments(
    path: str | Path, schema: dict[str, str] | None = None
) -> tuple[dict[str, AssessmentRecord], IngestReport]:
    mapping = {f: f for f in ASSESSMENT_FIELDS}
    mapping.update(schema or {})
    report = IngestReport(str(path))
    out: dict[str, AssessmentRecord] = {}
    fh, reader = _open_rows(path, mapping, ASSESSMENT_FIELDS)
    with fh:
        for row in reader:
            report.rows_read += 1
            sid = (row.get(mapping["student_id"]) or "").strip()
            if not sid:
                report.reject("missing id")
                continue
            if sid in out:
                raise IngestError(f"{path}: duplicate student_id {sid!r}")
            try:
                fall = _score(row.get(mapping["map_fall"]))
                spring = _score(row.get(mapping["map_spring"]))
            except ValueError:
                report.reject("unparseable score")
                continue
            out[sid] = AssessmentRecord(sid, fall, spring)
            report.accepted += 1
    return out, report


@dataclass(frozen=True)
class ClassInfo:
    class_id: str
    school_id: str
    calendar: SchoolCalendar


def ingest_classes(
    path: str | Path,
    schema: dict[str, str] | None = None,
    school_day_start: time = time(7, 0),
    school_day_end: time = time(15, 0),
) -> tuple[dict[str, ClassInfo], IngestReport]:
    """Class -> school/timezone table. An unresolvable timezone is a hard failure."""
    mapping = {f: f for f in CLASS_FIELDS}
    mapping.update(schema or {})
    report = IngestReport(str(path))
    out: dict[str, ClassInfo] = {}
    fh, reader = _open_rows(path, mapping, CLASS_FIELDS)
    with fh:
        for row in reader:
            report.rows_read += 1
            cid = (row.get(mapping["class_id"]) or "").strip()
            if not cid:
                report.reject("missing id")
                continue
            if cid in out:
                raise IngestError(f"{path}: duplicate class_id {cid!r}")
            tz = (row.get(mapping["timezone"]) or "").strip()
            cal = SchoolCalendar(tz, school_day_start, school_day_end)
            out[cid] = ClassInfo(cid, (row.get(mapping["school_id"]) or "").strip(), cal)
            report.accepted += 1
    return out, report
