"""Seeded generator of classroom practice logs with exact ground truth.

Each class meets for a number of scheduled practice sessions. A present
student starts after a sampled delay, acts at short intervals (never longer
than the idle threshold) with explicitly injected idle gaps, and works
through assignments, each needing a fixed count of responses. On completing
the first assignment the student either stops (raising early stop) or
starts a second assignment (extra effort). One present student per session
works from the scheduled start to the scheduled end, so the session
envelope equals the schedule and truth is exact.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from coasting.model import (
    ASSESSMENT_FIELDS,
    AssessmentRecord,
    EventKind,
    EventTable,
    StudentProfile,
    Ethnicity,
    Gender,
    Locale,
    TriState,
    format_timestamp,
)

TIMEZONES = ("America/New_York", "America/Chicago", "America/Denver", "America/Los_Angeles")

# marginal rates of the demographic variables (proportions, Missing last)
ETHNICITY_RATES = {
    Ethnicity.White: 0.5863, Ethnicity.Hispanic: 0.2201, Ethnicity.AfricanAmerican: 0.0850,
    Ethnicity.Other: 0.0657, Ethnicity.Missing: 0.0433,
}
GENDER_RATES = {Gender.Male: 0.4549, Gender.Female: 0.4962, Gender.Missing: 0.0489}
FRL_RATES = {TriState.Eligible: 0.3019, TriState.NotEligible: 0.4110, TriState.Missing: 0.2872}
IEP_RATES = {TriState.Eligible: 0.0943, TriState.NotEligible: 0.7268, TriState.Missing: 0.1789}
ELL_RATES = {TriState.Eligible: 0.0839, TriState.NotEligible: 0.6695, TriState.Missing: 0.2467}
URBAN_RATE = 0.35


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    seed: int
    n_classes: int = 70
    n_students: int | None = None  # exact total; None draws class sizes freely
    class_size_mean: float = 20.0
    class_size_sd: float = 4.86
    class_size_min: int = 8
    classes_per_school: int = 3
    sessions_per_class: int = 24
    year_start: date = date(2022, 9, 6)
    school_weeks: int = 34
    session_mean_min: float = 26.9
    session_sd_min: float = 7.93
    session_min_min: float = 5.0
    absence_rate: float = 0.35
    # per-student trait means; per-session draws scatter around them
    delay_mean: float = 0.23
    delay_trait_conc: float = 12.0
    delay_session_conc: float = 14.0
    early_mean: float = 0.26
    early_trait_conc: float = 10.0
    early_session_conc: float = 12.0
    idle_rate_mean: float = 0.135  # injected idle gaps per session
    idle_extra_mean: int = 60  # seconds beyond the threshold
    pace_mean: float = 24.0  # mean seconds between actions
    pace_sd: float = 6.0
    hint_rate: float = 0.1
    assignment_size_mean: float = 12.0  # responses required
    assignment_size_sd: float = 4.0
    extra_effort_mean: float = 0.3  # probability of continuing after completion
    homework_rate: float = 0.03  # per student per session day
    independent_rate: float = 0.01
    map_missing_rate: float = 0.02
    fall_coef: float = 0.78
    time_on_task_coef: float = 0.0
    extra_effort_coef: float = 1.44
    class_sd: float = math.sqrt(0.06)
    noise_sd: float = math.sqrt(0.23)
    idle_threshold: int = 120
    jobs: int = 1

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.sessions_per_class < 1:
            raise ConfigError("sessions_per_class must be >= 1")
        if not 0.0 <= self.absence_rate <= 1.0:
            raise ConfigError("absence_rate must lie in [0, 1]")
        if self.session_min_min * 60 <= self.idle_threshold:
            raise ConfigError("minimum session length must exceed the idle threshold")
        if self.session_mean_min <= 0 or self.session_sd_min < 0:
            raise ConfigError("invalid session length distribution")
        for name in ("delay_mean", "early_mean", "extra_effort_mean"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.delay_mean + self.early_mean >= 0.95:
            raise ConfigError("delay_mean + early_mean leaves no practice time")
        if not 1.0 <= self.pace_mean < self.idle_threshold:
            raise ConfigError("pace_mean must lie in [1, idle_threshold)")
        if self.assignment_size_mean < 1:
            raise ConfigError("assignment_size_mean must be >= 1")
        if self.sessions_per_class > 5 * self.school_weeks:
            raise ConfigError("more sessions than school days")
        if self.n_students is not None and self.n_students < self.n_classes:
            raise ConfigError("n_students must be at least n_classes")


@dataclass(frozen=True)
class StudentTraits:
    student_id: str
    class_id: str
    delay: float
    early: float
    idle_rate: float
    pace: float
    extra_effort: float


@dataclass(frozen=True)
class TruthRecord:
    student_id: str
    class_id: str
    session_index: int
    session_start: int
    session_end: int
    delayed_start: int
    idle_time: int
    early_stop: int
    time_on_task: int
    completed_assignment: bool
    extra_effort_time: int

    @property
    def session_length(self) -> int:
        return self.session_end - self.session_start

    @property
    def coasted_time(self) -> int:
        return self.delayed_start + self.idle_time + self.early_stop


@dataclass
class GroundTruth:
    records: list[TruthRecord]
    traits: list[StudentTraits]


@dataclass(frozen=True)
class ClassRow:
    class_id: str
    school_id: str
    timezone: str


@dataclass
class SimOutput:
    events: EventTable
    roster: list[ClassRow]
    profiles: dict[str, StudentProfile]
    assessments: dict[str, AssessmentRecord]
    truth: GroundTruth


# ---------------------------------------------------------------- helpers


def _beta(rng, mean, conc):
    mean = min(max(mean, 1e-4), 1 - 1e-4)
    return rng.beta(mean * conc, (1 - mean) * conc)


def _categorical(rng, rates: dict):
    keys = list(rates)
    p = np.array([rates[k] for k in keys], dtype=float)
    return keys[rng.choice(len(keys), p=p / p.sum())]


def _class_sizes(cfg: SimConfig, rng) -> list[int]:
    raw = np.maximum(rng.normal(cfg.class_size_mean, cfg.class_size_sd, cfg.n_classes), cfg.class_size_min)
    if cfg.n_students is None:
        return [int(round(x)) for x in raw]
    scaled = raw * cfg.n_students / raw.sum()
    sizes = np.maximum(np.floor(scaled).astype(int), 1)
    short = cfg.n_students - sizes.sum()
    frac_order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
    i = 0
    while short != 0:
        k = frac_order[i % cfg.n_classes]
        step = 1 if short > 0 else -1
        if sizes[k] + step >= 1:
            sizes[k] += step
            short -= step
        i += 1
    return sizes.tolist()


def _school_days(cfg: SimConfig) -> list[date]:
    days = []
    d = cfg.year_start
    end = cfg.year_start + timedelta(weeks=cfg.school_weeks)
    while d < end:
        if d.weekday() < 5:
            days.append(d)
        d += timedelta(days=1)
    return days


def _instant(day: date, clock: time, zone: ZoneInfo) -> int:
    return int(datetime.combine(day, clock, tzinfo=zone).timestamp())


class _Emitter:
    """Collects events of one class as parallel lists."""

    def __init__(self, class_id: str):
        self.class_id = class_id
        self.student: list[str] = []
        self.ts: list[int] = []
        self.kind: list[int] = []
        self.assignment: list[str] = []
        self.problem: list[str | None] = []

    def add(self, sid, t, kind, aid, pid=None):
        self.student.append(sid)
        self.ts.append(int(t))
        self.kind.append(int(kind))
        self.assignment.append(aid)
        self.problem.append(pid)


def _action_gaps(rng, total: int, pace: float) -> list[int]:
    """Positive integer gaps of at most 120 s summing exactly to ``total``."""
    gaps: list[int] = []
    acc = 0
    shape = 2.0
    while acc < total:
        g = int(min(max(round(1 + rng.gamma(shape, (pace - 1) / shape)), 1), 120))
        g = min(g, total - acc)
        gaps.append(g)
        acc += g
    return gaps


def _practice(em, rng, sid, start, window, idle_gaps, pace, size, keep_going, hint_rate, prefix):
    """Emit one student's actions from ``start``; returns the first completion instant."""
    seq = [(g, False) for g in _action_gaps(rng, window - sum(idle_gaps), pace)]
    for ig in idle_gaps:
        seq.insert(int(rng.integers(0, len(seq) + 1)), (ig, True))
    t = start
    assignment = 1
    aid = f"{prefix}-a1"
    em.add(sid, t, EventKind.AssignmentStart, aid)
    responses = 0
    open_problem = False
    completion = None
    for gap, _ in seq:
        t += gap
        if completion is not None and assignment == 1:
            assignment = 2
            aid = f"{prefix}-a2"
            responses = 0
            open_problem = False
            em.add(sid, t, EventKind.AssignmentStart, aid)
            continue
        pid = f"{aid}-p{responses + 1}"
        if not open_problem:
            em.add(sid, t, EventKind.ProblemStart, aid, pid)
            open_problem = True
        elif rng.random() < hint_rate:
            em.add(sid, t, EventKind.HintRequest, aid, pid)
        else:
            em.add(sid, t, EventKind.Response, aid, pid)
            open_problem = False
            responses += 1
            if assignment == 1 and responses == size:
                em.add(sid, t, EventKind.AssignmentComplete, aid)
                completion = t
                if not keep_going:
                    break
    return completion


def session_length(cfg: SimConfig, rng) -> int:
    """Seconds, from the normal length distribution truncated below at the minimum."""
    while True:
        length = int(round(rng.normal(cfg.session_mean_min, cfg.session_sd_min) * 60))
        if length >= cfg.session_min_min * 60:
            return length


def _truth_idle(times: list[int], threshold: int) -> int:
    return int(sum(b - a for a, b in zip(times, times[1:]) if b - a > threshold))


def _simulate_class(args):
    cfg, k, class_id, school_tz, student_ids, seed_seq, days = args
    rng = np.random.default_rng(seed_seq)
    zone = ZoneInfo(school_tz)
    em = _Emitter(class_id)
    traits = []
    for sid in student_ids:
        traits.append(
            StudentTraits(
                sid, class_id,
                delay=_beta(rng, cfg.delay_mean, cfg.delay_trait_conc),
                early=_beta(rng, cfg.early_mean, cfg.early_trait_conc),
                idle_rate=float(rng.gamma(2.0, cfg.idle_rate_mean / 2.0)),
                pace=float(np.clip(rng.normal(cfg.pace_mean, cfg.pace_sd), 4.0, cfg.idle_threshold / 2)),
                extra_effort=_beta(rng, cfg.extra_effort_mean, 4.0),
            )
        )
    period = int(rng.integers(0, 6))
    clock = time(8 + (period * 55) // 60, (period * 55) % 60)
    day_idx = np.sort(rng.choice(len(days), size=cfg.sessions_per_class, replace=False))
    truth: list[TruthRecord] = []
    for s_i, di in enumerate(day_idx.tolist()):
        day = days[di]
        start = _instant(day, clock, zone)
        length = session_length(cfg, rng)
        end = start + length
        size = max(1, int(round(rng.normal(cfg.assignment_size_mean, cfg.assignment_size_sd))))
        present = [t for t in traits if rng.random() >= cfg.absence_rate]
        if not present:
            continue
        # the anchor works the whole session so the envelope is the schedule
        anchor = present[int(rng.integers(len(present)))].student_id
        for tr in present:
            if tr.student_id == anchor:
                d = e = 0
            else:
                d = int(round(_beta(rng, tr.delay, cfg.delay_session_conc) * length))
                e = int(round(_beta(rng, tr.early, cfg.early_session_conc) * length))
                if d + e > length - 60:
                    scale = (length - 60) / (d + e)
                    d, e = int(d * scale), int(e * scale)
            window = length - d - e
            n_idle = int(rng.poisson(tr.idle_rate))
            idle_gaps = []
            budget = window // 2
            for _ in range(n_idle):
                g = cfg.idle_threshold + 1 + int(rng.exponential(cfg.idle_extra_mean))
                if sum(idle_gaps) + g <= budget:
                    idle_gaps.append(g)
            keep_going = tr.student_id == anchor or rng.random() < tr.extra_effort
            n_before = len(em.ts)
            prefix = f"{class_id}-s{s_i:03d}"
            completion = _practice(
                em, rng, tr.student_id, start + d, window, idle_gaps, tr.pace, size,
                keep_going, cfg.hint_rate, prefix,
            )
            times = em.ts[n_before:]
            first, last = times[0], times[-1]
            idle = _truth_idle(times, cfg.idle_threshold)
            extra = 0
            if completion is not None:
                after = [t for t in times if t >= completion]
                extra = (after[-1] - completion) - _truth_idle(after, cfg.idle_threshold)
            truth.append(
                TruthRecord(
                    tr.student_id, class_id, s_i, start, end,
                    delayed_start=first - start,
                    idle_time=idle,
                    early_stop=end - last,
                    time_on_task=(last - first) - idle,
                    completed_assignment=completion is not None,
                    extra_effort_time=extra,
                )
            )
        # out-of-class practice: evening homework, lone in-school work on other days
        for tr in traits:
            if rng.random() < cfg.homework_rate:
                hs = _instant(day, time(19, 0), zone) + int(rng.integers(0, 7200))
                _loose_practice(em, rng, tr, hs, f"{class_id}-hw{s_i:03d}")
            if rng.random() < cfg.independent_rate:
                other = days[(di + 1 + int(rng.integers(0, 3))) % len(days)]
                if other.toordinal() not in {days[j].toordinal() for j in day_idx.tolist()}:
                    ws = _instant(other, time(12, 0), zone) + int(rng.integers(0, 3600))
                    _loose_practice(em, rng, tr, ws, f"{class_id}-iw{s_i:03d}")
    return em, traits, truth


def _loose_practice(em, rng, tr, start, prefix):
    n = int(rng.integers(3, 20))
    t = start
    aid = f"{prefix}-a1"
    em.add(tr.student_id, t, EventKind.AssignmentStart, aid)
    for i in range(n):
        t += int(rng.integers(5, 90))
        em.add(tr.student_id, t, EventKind.Response, aid, f"{aid}-p{i + 1}")


def generate(config: SimConfig, seed: int | None = None) -> SimOutput:
    """Deterministic in (config, seed); ``seed`` overrides ``config.seed``."""
    cfg = config
    if seed is not None:
        cfg = SimConfig(**{**asdict(config), "seed": seed})
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    roster_seq, demo_seq, map_seq, class_root = root.spawn(4)
    rng = np.random.default_rng(roster_seq)
    sizes = _class_sizes(cfg, rng)
    n_schools = max(1, math.ceil(cfg.n_classes / cfg.classes_per_school))
    school_tz = [TIMEZONES[int(rng.integers(len(TIMEZONES)))] for _ in range(n_schools)]
    school_urban = [bool(rng.random() < URBAN_RATE) for _ in range(n_schools)]
    roster = []
    members = []
    sid_counter = 0
    for k in range(cfg.n_classes):
        school = k // cfg.classes_per_school
        roster.append(ClassRow(f"c{k + 1:03d}", f"sch{school + 1:02d}", school_tz[school]))
        ids = [f"s{sid_counter + i + 1:05d}" for i in range(sizes[k])]
        sid_counter += sizes[k]
        members.append(ids)
    days = _school_days(cfg)
    class_seeds = class_root.spawn(cfg.n_classes)
    jobs = [
        (cfg, k, roster[k].class_id, roster[k].timezone, members[k], class_seeds[k], days)
        for k in range(cfg.n_classes)
    ]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_simulate_class, jobs))
    else:
        results = [_simulate_class(j) for j in jobs]

    student, klass, ts, kind, assignment, problem = [], [], [], [], [], []
    all_traits: list[StudentTraits] = []
    all_truth: list[TruthRecord] = []
    for em, traits, truth in results:
        student += em.student
        klass += [em.class_id] * len(em.ts)
        ts += em.ts
        kind += em.kind
        assignment += em.assignment
        problem += em.problem
        all_traits += traits
        all_truth += truth
    events = _table(student, klass, ts, kind, assignment, problem)

    drng = np.random.default_rng(demo_seq)
    profiles = {}
    for k, ids in enumerate(members):
        school = k // cfg.classes_per_school
        loc = Locale.Urban if school_urban[school] else Locale.Rural
        for sid in ids:
            profiles[sid] = StudentProfile(
                sid,
                gender=_categorical(drng, GENDER_RATES),
                ethnicity=_categorical(drng, ETHNICITY_RATES),
                frl=_categorical(drng, FRL_RATES),
                iep=_categorical(drng, IEP_RATES),
                ell=_categorical(drng, ELL_RATES),
                locale=loc,
            )
    assessments = _assessments(cfg, members, all_truth, np.random.default_rng(map_seq))
    all_truth.sort(key=lambda r: (r.class_id, r.session_index, r.student_id))
    return SimOutput(events, roster, profiles, assessments, GroundTruth(all_truth, all_traits))


def _table(student, klass, ts, kind, assignment, problem) -> EventTable:
    sids = tuple(sorted(set(student)))
    cids = tuple(sorted(set(klass)))
    aids = tuple(sorted(set(assignment)))
    pids = tuple(sorted({p for p in problem if p is not None}))
    s_ix = {v: i for i, v in enumerate(sids)}
    c_ix = {v: i for i, v in enumerate(cids)}
    a_ix = {v: i for i, v in enumerate(aids)}
    p_ix = {v: i for i, v in enumerate(pids)}
    st = np.array([s_ix[v] for v in student], dtype=np.int64)
    kl = np.array([c_ix[v] for v in klass], dtype=np.int64)
    t = np.array(ts, dtype=np.int64)
    kd = np.array(kind, dtype=np.int64)
    asg = np.array([a_ix[v] for v in assignment], dtype=np.int64)
    pr = np.array([-1 if v is None else p_ix[v] for v in problem], dtype=np.int64)
    order = np.lexsort((pr, asg, kd, t, kl, st))
    return EventTable(sids, cids, aids, pids, st[order], kl[order], t[order], kd[order], asg[order], pr[order])


def _assessments(cfg, members, truth, rng) -> dict[str, AssessmentRecord]:
    """Fall MAP on a RIT-like scale; spring gain driven by classwork proportions."""
    tot = {}
    ee = {}
    n = {}
    for r in truth:
        L = r.session_length
        tot[r.student_id] = tot.get(r.student_id, 0.0) + r.time_on_task / L
        ee[r.student_id] = ee.get(r.student_id, 0.0) + r.extra_effort_time / L
        n[r.student_id] = n.get(r.student_id, 0) + 1
    out = {}
    for ids in members:
        class_eff = rng.normal(0.0, cfg.class_sd)
        for sid in ids:
            z_fall = rng.normal()
            k = n.get(sid, 0)
            tot_p = tot.get(sid, 0.0) / k if k else 0.0
            ee_p = ee.get(sid, 0.0) / k if k else 0.0
            z_spring = (
                cfg.fall_coef * z_fall + cfg.time_on_task_coef * tot_p
                + cfg.extra_effort_coef * ee_p + class_eff + rng.normal(0.0, cfg.noise_sd)
            )
            fall = round(220.0 + 12.0 * z_fall, 1)
            spring = round(226.0 + 12.0 * z_spring, 1)
            if rng.random() < cfg.map_missing_rate:
                fall = None
            if rng.random() < cfg.map_missing_rate:
                spring = None
            out[sid] = AssessmentRecord(sid, fall, spring)
    return out


# ---------------------------------------------------------------- export


def write_outputs(out: SimOutput, directory: str | Path) -> dict[str, Path]:
    """Write the CSV files the ingesters read, plus ground truth."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": d / "events.csv",
        "classes": d / "classes.csv",
        "profiles": d / "profiles.csv",
        "assessments": d / "assessments.csv",
        "truth": d / "truth.csv",
        "traits": d / "traits.csv",
    }
    ev = out.events
    with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "class_id", "timestamp", "event_kind", "assignment_id", "problem_id"])
        kinds = [k.name for k in EventKind]
        for i in range(len(ev)):
            p = int(ev.problem[i])
            w.writerow([
                ev.student_ids[ev.student[i]], ev.class_ids[ev.klass[i]],
                format_timestamp(ev.ts[i]), kinds[ev.kind[i]],
                ev.assignment_ids[ev.assignment[i]], "" if p < 0 else ev.problem_ids[p],
            ])
    with open(paths["classes"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "school_id", "timezone"])
        for r in out.roster:
            w.writerow([r.class_id, r.school_id, r.timezone])
    with open(paths["profiles"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "gender", "ethnicity", "frl", "iep", "ell", "locale"])
        for sid in sorted(out.profiles):
            p = out.profiles[sid]
            w.writerow([sid] + [
                "" if v.value == "Missing" else v.value
                for v in (p.gender, p.ethnicity, p.frl, p.iep, p.ell, p.locale)
            ])
    with open(paths["assessments"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ASSESSMENT_FIELDS))
        for sid in sorted(out.assessments):
            a = out.assessments[sid]
            w.writerow([sid, "" if a.map_fall is None else a.map_fall, "" if a.map_spring is None else a.map_spring])
    with open(paths["truth"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [
            "student_id", "class_id", "session_index", "session_start", "session_end",
            "delayed_start", "idle_time", "early_stop", "time_on_task",
            "completed_assignment", "extra_effort_time",
        ]
        w.writerow(cols)
        for r in out.truth.records:
            d_ = asdict(r)
            d_["session_start"] = format_timestamp(r.session_start)
            d_["session_end"] = format_timestamp(r.session_end)
            d_["completed_assignment"] = int(r.completed_assignment)
            w.writerow([d_[c] for c in cols])
    with open(paths["traits"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "class_id", "delay", "early", "idle_rate", "pace", "extra_effort"])
        for t in sorted(out.truth.traits, key=lambda t: t.student_id):
            w.writerow([t.student_id, t.class_id] + [f"{v:.8f}" for v in (t.delay, t.early, t.idle_rate, t.pace, t.extra_effort)])
    return paths


# ---------------------------------------------------------------- truth check


COMPONENT_FIELDS = ("delayed_start", "idle_time", "early_stop", "time_on_task", "extra_effort_time")


@dataclass
class TruthReport:
    n_truth: int
    n_matched: int
    n_missed: int
    n_spurious: int
    errors: dict[str, np.ndarray]  # per-record absolute errors by component
    flagged: list[tuple[str, str, int]] = field(default_factory=list)

    def quantiles(self, qs=(0.5, 0.9, 0.95, 0.99, 1.0)) -> dict[str, dict[str, float]]:
        out = {}
        for k, v in self.errors.items():
            out[k] = {f"q{int(q * 100)}": float(np.quantile(v, q)) if len(v) else 0.0 for q in qs}
        return out


def truth_check(records, truth: GroundTruth) -> TruthReport:
    """Match pipeline records to truth by (student, class, maximal session overlap)."""
    by_key: dict[tuple[str, str], list[TruthRecord]] = {}
    for t in truth.records:
        by_key.setdefault((t.student_id, t.class_id), []).append(t)
    used = set()
    errs = {f: [] for f in COMPONENT_FIELDS}
    spurious = 0
    flagged = []
    for r in records:
        cands = by_key.get((r.student_id, r.class_id), [])
        lo, hi = r.session_start, r.session_start + r.session_length
        best, best_ov = None, 0
        for t in cands:
            ov = min(hi, t.session_end) - max(lo, t.session_start)
            if ov > best_ov:
                best, best_ov = t, ov
        if best is None or id(best) in used:
            spurious += 1
            continue
        used.add(id(best))
        for f in COMPONENT_FIELDS:
            errs[f].append(abs(getattr(r, f) - getattr(best, f)))
        if (lo, hi) != (best.session_start, best.session_end):
            flagged.append((best.student_id, best.class_id, best.session_index))
    n_truth = len(truth.records)
    matched = len(used)
    return TruthReport(
        n_truth, matched, n_truth - matched, spurious,
        {f: np.asarray(v, dtype=np.int64) for f, v in errs.items()}, flagged,
    )
