"""Run configuration and the stage functions shared by the CLI subcommands.

Every stage is a plain function of its inputs, so a subcommand is just the
prefix of the chain it needs followed by its writers.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from datetime import time
from pathlib import Path

import numpy as np
import pandas as pd

from coasting import lmm
from coasting.measures import (
    IDLE_EXCESS,
    IDLE_FULL,
    CoastingRecord,
    MeasureConfig,
    StudentAggregate,
    aggregate_students,
    derive_idle_threshold,
    measure_all,
)
from coasting.model import (
    ASSESSMENT_FIELDS,
    CLASS_FIELDS,
    EVENT_FIELDS,
    PROFILE_FIELDS,
    AssessmentRecord,
    ClassInfo,
    EventTable,
    IngestError,
    IngestReport,
    SchoolCalendar,
    StudentProfile,
    ingest_assessments,
    ingest_classes,
    ingest_events,
    ingest_profiles,
    load_mapping,
    read_keyvalue,
)
from coasting.sessions import SessionConfig, SessionSet, infer_sessions

TZ_ENV = "COASTING_TZ"
FALLBACK_TZ = "America/New_York"
FAMILIES = ("gender_ethnicity", "frl", "iep", "ell", "locale")
WEIGHTINGS = ("session", "student", "both")


class ConfigError(ValueError):
    """Invalid run configuration."""


def default_timezone() -> str:
    return os.environ.get(TZ_ENV) or FALLBACK_TZ


def _parse_clock(text: str) -> time:
    try:
        hh, mm = text.strip().split(":")
        return time(int(hh), int(mm))
    except ValueError as exc:
        raise ConfigError(f"bad clock time {text!r}; expected HH:MM") from exc


_PATH_KEYS = (
    "events", "classes", "profiles", "assessments",
    "events_mapping", "classes_mapping", "profiles_mapping", "assessments_mapping",
)


@dataclass
class RunConfig:
    events: str | None = None
    classes: str | None = None
    profiles: str | None = None
    assessments: str | None = None
    events_mapping: str | None = None
    classes_mapping: str | None = None
    profiles_mapping: str | None = None
    assessments_mapping: str | None = None
    timezone: str = field(default_factory=default_timezone)
    school_day_start: str = "07:00"
    school_day_end: str = "15:00"
    split_gap: int = 900
    idle_threshold: int | None = 120  # None derives it from the log
    idle_mode: str = IDLE_FULL
    min_classwork_concurrency: int = 5
    trim_quantile: float = 0.0
    weighting: str = "both"
    families: tuple[str, ...] = FAMILIES
    fall_map: str = "standardized"
    missing_policy: str = "DropRow"
    bic_n: str = "students"  # or "classes"
    gstudy_n_months: float | None = None
    gstudy_n_sessions: float | None = None
    seed: int = 2023
    sim_students: int = 1400
    sim_classes: int = 70
    sim_sessions: int = 24

    # ------------------------------------------------------------ parsing

    @classmethod
    def from_mapping(cls, raw: dict[str, str], base: Path | None = None) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kw: dict = {}
        for key, text in raw.items():
            text = str(text).strip()
            try:
                kw[key] = cls._convert(key, text, base)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {text!r}") from exc
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @staticmethod
    def _convert(key: str, text: str, base: Path | None):
        if key in _PATH_KEYS:
            if not text:
                return None
            p = Path(text)
            if base is not None and not p.is_absolute():
                p = base / p
            return str(p)
        if key in ("split_gap", "min_classwork_concurrency", "seed",
                   "sim_students", "sim_classes", "sim_sessions"):
            return int(text)
        if key == "idle_threshold":
            return None if text.lower() == "auto" else int(text)
        if key == "trim_quantile":
            return float(text)
        if key in ("gstudy_n_months", "gstudy_n_sessions"):
            return None if text.lower() in ("", "auto") else float(text)
        if key == "families":
            return tuple(s.strip() for s in text.split(",") if s.strip())
        return text

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_mapping(read_keyvalue(path), base=path.parent)

    def replace(self, **changes) -> RunConfig:
        cfg = RunConfig(**{**asdict(self), **changes})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for key in _PATH_KEYS:
            p = getattr(self, key)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{key}: file not found: {p}")
        try:
            SchoolCalendar(self.timezone, self.day_start, self.day_end)
        except IngestError as exc:
            raise ConfigError(str(exc)) from exc
        if self.split_gap <= 0:
            raise ConfigError("split_gap must be positive")
        if self.idle_threshold is not None:
            if self.idle_threshold <= 0:
                raise ConfigError("idle_threshold must be positive")
            if self.split_gap <= self.idle_threshold:
                raise ConfigError("split_gap must exceed idle_threshold")
        if self.min_classwork_concurrency < 0:
            raise ConfigError("min_classwork_concurrency must be nonnegative")
        if not 0.0 <= self.trim_quantile < 0.5:
            raise ConfigError("trim_quantile must lie in [0, 0.5)")
        if self.idle_mode not in (IDLE_FULL, IDLE_EXCESS):
            raise ConfigError(f"idle_mode must be {IDLE_FULL!r} or {IDLE_EXCESS!r}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {', '.join(WEIGHTINGS)}")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown model families: {', '.join(bad)}")
        if self.fall_map not in ("standardized", "raw"):
            raise ConfigError("fall_map must be 'standardized' or 'raw'")
        if self.bic_n not in ("students", "classes"):
            raise ConfigError("bic_n must be 'students' or 'classes'")
        if self.missing_policy not in ("DropRow", "RetainMissingLevel"):
            raise ConfigError("missing_policy must be 'DropRow' or 'RetainMissingLevel'")
        for key in ("gstudy_n_months", "gstudy_n_sessions"):
            v = getattr(self, key)
            if v is not None and not v > 0:
                raise ConfigError(f"{key} must be positive")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def day_start(self) -> time:
        return _parse_clock(self.school_day_start)

    @property
    def day_end(self) -> time:
        return _parse_clock(self.school_day_end)

    def echo(self) -> dict:
        """Config as written to manifests: plain JSON values, stable order."""
        d = asdict(self)
        d["families"] = list(self.families)
        return dict(sorted(d.items()))


# ---------------------------------------------------------------- stages


@dataclass
class Inputs:
    events: EventTable
    classes: dict[str, ClassInfo]
    profiles: dict[str, StudentProfile] | None
    assessments: dict[str, AssessmentRecord] | None
    reports: dict[str, IngestReport]

    def calendars(self, cfg: RunConfig) -> dict[str, SchoolCalendar]:
        default = SchoolCalendar(cfg.timezone, cfg.day_start, cfg.day_end)
        cals = {c: info.calendar for c, info in self.classes.items()}
        for cid in self.events.class_ids:
            cals.setdefault(cid, default)
        return cals


def load_inputs(cfg: RunConfig) -> Inputs:
    if cfg.events is None:
        raise ConfigError("no event log given (set 'events' or pass --data)")
    reports = {}
    classes: dict[str, ClassInfo] = {}
    if cfg.classes is not None:
        classes, reports["classes"] = ingest_classes(
            cfg.classes, load_mapping(cfg.classes_mapping, CLASS_FIELDS), cfg.day_start, cfg.day_end
        )
    events, reports["events"] = ingest_events(
        cfg.events,
        load_mapping(cfg.events_mapping, EVENT_FIELDS),
        cfg.timezone,
        {c: info.calendar.timezone for c, info in classes.items()},
    )
    profiles = assessments = None
    if cfg.profiles is not None:
        profiles, reports["profiles"] = ingest_profiles(
            cfg.profiles, load_mapping(cfg.profiles_mapping, PROFILE_FIELDS)
        )
    if cfg.assessments is not None:
        assessments, reports["assessments"] = ingest_assessments(
            cfg.assessments, load_mapping(cfg.assessments_mapping, ASSESSMENT_FIELDS)
        )
    return Inputs(events, classes, profiles, assessments, reports)


def run_sessions(inputs: Inputs, cfg: RunConfig) -> SessionSet:
    scfg = SessionConfig(cfg.split_gap, cfg.min_classwork_concurrency, cfg.trim_quantile)
    return infer_sessions(inputs.events, inputs.calendars(cfg), scfg)


def resolve_idle_threshold(inputs: Inputs, cfg: RunConfig) -> int:
    if cfg.idle_threshold is not None:
        return cfg.idle_threshold
    derived = derive_idle_threshold(inputs.events, cfg.split_gap)
    if derived >= cfg.split_gap:
        raise ConfigError(f"derived idle threshold {derived}s is not below split_gap")
    return derived


def run_coasting(sessions: SessionSet, idle_threshold: int, cfg: RunConfig) -> list[CoastingRecord]:
    return measure_all(sessions, MeasureConfig(idle_threshold, cfg.idle_mode))


def zone_lookup(inputs: Inputs, cfg: RunConfig):
    cals = inputs.calendars(cfg)
    zones = {c: cal.zone for c, cal in cals.items()}
    return lambda class_id: zones[class_id]


# ---------------------------------------------------------------- student table


def student_table(
    aggregates: dict[str, StudentAggregate],
    profiles: dict[str, StudentProfile] | None,
    assessments: dict[str, AssessmentRecord] | None,
) -> pd.DataFrame:
    """One row per student with classwork records: outcomes, demographics, MAP."""
    rows = []
    for sid in sorted(aggregates):
        a = aggregates[sid]
        p = (profiles or {}).get(sid) or StudentProfile(sid)
        m = (assessments or {}).get(sid) or AssessmentRecord(sid)
        rows.append(
            {
                "student_id": sid,
                "class_id": a.class_id,
                "n_sessions": a.n_classwork_sessions,
                "coasted": a.coasted,
                "adjusted_coasted": a.adjusted_coasted,
                "time_on_task": a.time_on_task,
                "extra_effort": a.extra_effort,
                "coasted_pct": 100.0 * a.coasted,
                "adjusted_coasted_pct": 100.0 * a.adjusted_coasted,
                "gender": p.gender.value,
                "ethnicity": p.ethnicity.value,
                "frl": p.frl.value,
                "iep": p.iep.value,
                "ell": p.ell.value,
                "locale": p.locale.value,
                "map_fall": np.nan if m.map_fall is None else m.map_fall,
                "map_spring": np.nan if m.map_spring is None else m.map_spring,
            }
        )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------- models

COASTING_RESPONSES = (("Unadjusted", "coasted_pct"), ("Adjusted", "adjusted_coasted_pct"))

_FAMILY_TERMS = {
    "gender_ethnicity": (
        [lmm.Categorical("ethnicity", "White"), lmm.Categorical("gender", "Female")],
        [lmm.Interaction("ethnicity", "gender")],
    ),
    "frl": ([lmm.Categorical("frl", "NotEligible")], []),
    "iep": ([lmm.Categorical("iep", "NotEligible")], []),
    "ell": ([lmm.Categorical("ell", "NotEligible")], []),
    "locale": ([lmm.Categorical("locale", "Rural")], []),
}

TERM_LABELS = {
    "map_fall": "MAP Score (Fall)",
    "time_on_task": "Time on Task Proportion",
    "extra_effort": "Extra Effort Proportion",
    "ethnicity: AfricanAmerican": "African American",
    "ethnicity: Hispanic": "Hispanic",
    "ethnicity: Other": "Other Ethnicity",
    "ethnicity: Missing": "Ethnicity Missing",
    "gender: Male": "Male",
    "gender: Missing": "Gender Missing",
    "frl: Eligible": "FRL Eligible",
    "iep: Eligible": "IEP",
    "ell: Eligible": "ELL",
    "locale: Urban": "Urban",
}


def family_specs(family: str, cfg: RunConfig) -> list[lmm.ModelSpec]:
    cats, inter = _FAMILY_TERMS[family]
    std = ("map_fall",) if cfg.fall_map == "standardized" else ()
    return [
        lmm.ModelSpec(
            response=resp,
            covariates=["map_fall"],
            categoricals=list(cats),
            interactions=list(inter),
            standardize=std,
            missing_policy=cfg.missing_policy,
            name=f"{label}",
        )
        for label, resp in COASTING_RESPONSES
    ]


def achievement_specs() -> list[lmm.ModelSpec]:
    base = dict(response="map_spring", standardize=("map_spring", "map_fall"))
    return [
        lmm.ModelSpec(covariates=["map_fall", "time_on_task"], name="Model 3", **base),
        lmm.ModelSpec(covariates=["map_fall", "time_on_task", "extra_effort"], name="Model 4", **base),
    ]


@dataclass
class ModelResults:
    families: dict[str, list[lmm.LmmFit]]
    achievement: list[lmm.LmmFit]
    delta_bic: float
    designs: dict[str, dict]

    @property
    def evidence(self) -> str:
        return lmm.raftery_band(self.delta_bic)

    def to_dict(self) -> dict:
        return {
            "families": {k: [f.to_dict() for f in v] for k, v in self.families.items()},
            "achievement": {
                "models": [f.to_dict() for f in self.achievement],
                "delta_bic": self.delta_bic,
                "evidence": self.evidence,
            },
            "designs": self.designs,
        }


def _bic_n(design: lmm.Design, cfg: RunConfig) -> int:
    return len(design.group_labels) if cfg.bic_n == "classes" else len(design.y)


def run_models(table: pd.DataFrame, cfg: RunConfig) -> ModelResults:
    """Demographic coasting models per family plus the nested achievement pair."""
    if table.empty:
        raise lmm.DesignError("no students with classwork records")
    fams: dict[str, list[lmm.LmmFit]] = {}
    designs: dict[str, dict] = {}
    for fam in cfg.families:
        fits = []
        for spec in family_specs(fam, cfg):
            d = lmm.build_design(spec, table)
            designs[f"{fam}/{spec.name}"] = d.report
            fits.append(lmm.fit(d, spec.name, _bic_n(d, cfg)))
        fams[fam] = fits
    # both achievement models must see the same rows for BIC to compare
    rows = table.dropna(subset=["map_fall", "map_spring"])
    ach = []
    for spec in achievement_specs():
        d = lmm.build_design(spec, rows)
        designs[f"achievement/{spec.name}"] = d.report
        ach.append(lmm.fit(d, spec.name, _bic_n(d, cfg)))
    delta = ach[0].bic_ml - ach[1].bic_ml
    return ModelResults(fams, ach, float(delta), designs)

