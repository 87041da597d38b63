"""``coasting`` command line.

Subcommands share one lazily evaluated pipeline context. Artifacts are
written to a staging directory next to ``--out`` and moved into place only
after every artifact of the subcommand has been written and checked, so a
failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import shutil
import sys
import tempfile
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from coasting import __version__, kernels, lmm, simulate
from coasting.measures import aggregate_students, write_aggregates_csv, write_records_csv
from coasting.model import IngestError, format_timestamp
from coasting.pipeline import (
    ConfigError,
    RunConfig,
    load_inputs,
    resolve_idle_threshold,
    run_coasting,
    run_models,
    run_sessions,
    student_table,
    zone_lookup,
)
from coasting.reliability import gstudy, reliability_markdown, write_reliability_csv
from coasting.report import (
    achievement_markdown,
    descriptives_markdown,
    family_markdown,
    group_means,
    session_summary_markdown,
    write_group_means_csv,
)
from coasting.sessions import write_sessions_csv

log = logging.getLogger("coasting")

RELIABILITY_MEASURES = {
    "Delayed Start": "delayed_start",
    "Idle Time": "idle_time",
    "Early Stop": "early_stop",
    "Total Coasted Time": "coasted_time",
    "Time on Task": "time_on_task",
}


class Context:
    """Pipeline stages computed on first use."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    @cached_property
    def inputs(self):
        return load_inputs(self.cfg)

    @cached_property
    def sessions(self):
        return run_sessions(self.inputs, self.cfg)

    @cached_property
    def idle_threshold(self) -> int:
        return resolve_idle_threshold(self.inputs, self.cfg)

    @cached_property
    def records(self):
        return run_coasting(self.sessions, self.idle_threshold, self.cfg)

    @cached_property
    def aggregates(self):
        return aggregate_students(self.records)

    @cached_property
    def table(self) -> pd.DataFrame:
        return student_table(self.aggregates, self.inputs.profiles, self.inputs.assessments)

    @cached_property
    def models(self):
        if self.inputs.profiles is None or self.inputs.assessments is None:
            raise ConfigError("models need both 'profiles' and 'assessments' inputs")
        return run_models(self.table, self.cfg)

    @cached_property
    def reliability(self):
        return gstudy(
            self.records,
            RELIABILITY_MEASURES,
            zone_lookup(self.inputs, self.cfg),
            self.cfg.gstudy_n_months,
            self.cfg.gstudy_n_sessions,
        )

    def weightings(self) -> list[str]:
        w = self.cfg.weighting
        return ["session", "student"] if w == "both" else [w]


# ---------------------------------------------------------------- writers


def _text(path: Path, body: str) -> None:
    path.write_text(body, encoding="utf-8", newline="\n")


def _json(path: Path, obj) -> None:
    _text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def w_ingest(ctx: Context, d: Path) -> None:
    ev = ctx.inputs.events
    with open(d / "events.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "class_id", "timestamp", "event_kind", "assignment_id", "problem_id"])
        for e in ev:
            w.writerow([
                e.student_id, e.class_id, format_timestamp(e.timestamp), e.event_kind.name,
                e.assignment_id, e.problem_id or "",
            ])
    _json(d / "ingest_report.json", {k: r.to_dict() for k, r in sorted(ctx.inputs.reports.items())})


def w_sessions(ctx: Context, d: Path) -> None:
    write_sessions_csv(ctx.sessions.sessions, d / "sessions.csv")
    _text(d / "session_summary.md", session_summary_markdown(ctx.sessions.sessions))


def w_coasting(ctx: Context, d: Path) -> None:
    write_records_csv(ctx.records, d / "coasting_records.csv")
    write_aggregates_csv(ctx.aggregates, d / "student_measures.csv")
    for w in ctx.weightings():
        _text(d / f"descriptives_{w}.md", descriptives_markdown(ctx.records, w))


def w_gstudy(ctx: Context, d: Path) -> None:
    write_reliability_csv(ctx.reliability, d / "reliability.csv")
    _text(d / "reliability.md", reliability_markdown(ctx.reliability))


def w_models(ctx: Context, d: Path) -> None:
    res = ctx.models
    ctx.table.to_csv(d / "students.csv", index=False, float_format="%.10g", lineterminator="\n")
    for fam, fits in res.families.items():
        _text(d / f"models_{fam}.md", family_markdown(fam, fits))
    _text(d / "achievement.md", achievement_markdown(res))
    _json(d / "models.json", res.to_dict())


def w_report(ctx: Context, d: Path) -> None:
    parts = ["# Coasting report", ""]
    parts += ["## Inferred sessions", "", session_summary_markdown(ctx.sessions.sessions)]
    parts += [f"Idle threshold: {ctx.idle_threshold} s", ""]
    for w in ctx.weightings():
        parts += [f"## Coasting composition ({w}-weighted)", "", descriptives_markdown(ctx.records, w)]
    parts += ["## Reliability", "", reliability_markdown(ctx.reliability)]
    have_models = ctx.inputs.profiles is not None and ctx.inputs.assessments is not None
    if have_models:
        parts += ["## Coasting by student characteristics", ""]
        for fam, fits in ctx.models.families.items():
            parts += [family_markdown(fam, fits)]
        parts += ["## Achievement models", "", achievement_markdown(ctx.models)]
        write_group_means_csv(group_means(ctx.table), d / "group_means.csv")
    else:
        parts += ["Models and group means skipped: profiles or assessments not supplied.", ""]
    _text(d / "report.md", "\n".join(parts))


def w_simulate(ctx: Context, d: Path) -> None:
    cfg = ctx.cfg
    sim = simulate.SimConfig(
        seed=cfg.seed,
        n_classes=cfg.sim_classes,
        n_students=cfg.sim_students,
        sessions_per_class=cfg.sim_sessions,
    )
    try:
        out = simulate.generate(sim)
    except simulate.ConfigError as exc:
        raise ConfigError(str(exc)) from exc
    simulate.write_outputs(out, d)
    _text(
        d / "run.cfg",
        "# inputs written by `coasting simulate`; paths are relative to this file\n"
        "events = events.csv\nclasses = classes.csv\nprofiles = profiles.csv\n"
        "assessments = assessments.csv\n",
    )


WRITERS = {
    "ingest": [w_ingest],
    "sessions": [w_sessions],
    "coasting": [w_coasting],
    "gstudy": [w_gstudy],
    "models": [w_models],
    "report": [w_report],
    "simulate": [w_simulate],
}


def w_models_if_available(ctx: Context, d: Path) -> None:
    if ctx.inputs.profiles is not None and ctx.inputs.assessments is not None:
        w_models(ctx, d)


WRITERS["all"] = [w_ingest, w_sessions, w_coasting, w_gstudy, w_models_if_available, w_report]


# ---------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    return {
        "coasting": __version__,
        "kernel_backend": kernels.BACKEND,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "python": platform.python_version(),
        "scipy": scipy.__version__,
    }


def manifest(command: str, ctx: Context, staged: Path) -> dict:
    cfg = ctx.cfg
    inputs = {}
    if command != "simulate":
        for key in ("events", "classes", "profiles", "assessments"):
            p = getattr(cfg, key)
            if p is not None:
                inputs[key] = {"path": p, "sha256": _sha256(Path(p))}
    derived = {}
    if "idle_threshold" in ctx.__dict__:
        derived["idle_threshold"] = ctx.idle_threshold
    artifacts = {p.name: _sha256(p) for p in sorted(staged.iterdir()) if p.is_file()}
    return {
        "command": command,
        "config": cfg.echo(),
        "derived": derived,
        "inputs": inputs,
        "artifacts": artifacts,
        "versions": versions(),
    }


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coasting", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("ingest", "sessions", "coasting", "gstudy", "models", "simulate", "report", "all"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--data", help="directory holding events.csv and optional "
                       "classes.csv, profiles.csv, assessments.csv")
        p.add_argument("--seed", type=int)
        p.add_argument("--split-gap", type=int, dest="split_gap")
        p.add_argument("--idle-threshold", dest="idle_threshold", help="seconds, or 'auto'")
        p.add_argument("--idle-mode", dest="idle_mode", choices=("full", "excess"))
        p.add_argument("--min-concurrency", type=int, dest="min_classwork_concurrency")
        p.add_argument("--weighting", choices=("session", "student", "both"))
        p.add_argument("--fall-map", dest="fall_map", choices=("standardized", "raw"))
        if name == "simulate":
            p.add_argument("--students", type=int, dest="sim_students")
            p.add_argument("--classes", type=int, dest="sim_classes")
            p.add_argument("--sessions", type=int, dest="sim_sessions")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


_OVERRIDES = (
    "seed", "split_gap", "idle_threshold", "idle_mode", "min_classwork_concurrency",
    "weighting", "fall_map", "sim_students", "sim_classes", "sim_sessions",
)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, str] = {}
    base = None
    if args.config:
        from coasting.model import read_keyvalue

        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(read_keyvalue(path))
        base = path.parent
    if args.data:
        data = Path(args.data)
        if not data.is_dir():
            raise ConfigError(f"--data is not a directory: {data}")
        for key in ("events", "classes", "profiles", "assessments"):
            if (data / f"{key}.csv").is_file():
                # absolute, so the config file's directory does not apply
                raw[key] = str((data / f"{key}.csv").resolve())
    for key in _OVERRIDES:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = str(v)
    return RunConfig.from_mapping(raw, base)


def run(command: str, cfg: RunConfig, out: Path) -> dict:
    """Write the artifacts of ``command`` into ``out``; returns the manifest."""
    out = out.resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    staged = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        ctx = Context(cfg)
        for writer in WRITERS[command]:
            writer(ctx, staged)
        for p in staged.iterdir():
            if not p.is_file() or p.stat().st_size == 0:
                raise RuntimeError(f"artifact {p.name} was not written")
        man = manifest(command, ctx, staged)
        _json(staged / "manifest.json", man)
        out.mkdir(exist_ok=True)
        for p in sorted(staged.iterdir()):
            shutil.move(str(p), str(out / p.name))
        return man
    finally:
        shutil.rmtree(staged, ignore_errors=True)


def _fail(command: str, kind: str, message: str, code: int) -> int:
    err = {"error": {"command": command, "type": kind, "message": message}}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        man = run(args.command, cfg, Path(args.out))
    except ConfigError as exc:
        return _fail(args.command, "ConfigError", str(exc), 2)
    except (IngestError, lmm.DesignError, ValueError, OSError) as exc:
        return _fail(args.command, type(exc).__name__, str(exc), 1)
    log.info("wrote %d artifacts to %s", len(man["artifacts"]) + 1, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
