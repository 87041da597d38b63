"""Markdown tables and figure-ready CSV built from pipeline results."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from coasting import lmm
from coasting.measures import CoastingRecord, corpus_descriptives
from coasting.pipeline import TERM_LABELS, ModelResults
from coasting.sessions import ClassSession, SessionType

Z95 = 1.96


def _mean_sd(x: Sequence[float]) -> str:
    a = np.asarray(x, dtype=float)
    if len(a) == 0:
        return "n/a"
    sd = a.std(ddof=1) if len(a) > 1 else 0.0
    return f"{a.mean():.2f} ({sd:.2f})"


def session_summary_markdown(sessions: Sequence[ClassSession]) -> str:
    """Session counts, students per session and length, by inferred session type."""
    lines = [
        "| Session Type | Class Sessions | Student-Sessions | Students per Session | Length, min |",
        "|---|---|---|---|---|",
    ]
    for kind in SessionType:
        group = [s for s in sessions if s.session_type is kind]
        lines.append(
            f"| {kind.value} | {len(group)} | {sum(s.n_students for s in group)} | "
            f"{_mean_sd([s.n_students for s in group])} | "
            f"{_mean_sd([s.length / 60.0 for s in group])} |"
        )
    lines.append(
        f"| All | {len(sessions)} | {sum(s.n_students for s in sessions)} | "
        f"{_mean_sd([s.n_students for s in sessions])} | "
        f"{_mean_sd([s.length / 60.0 for s in sessions])} |"
    )
    return "\n".join(lines) + "\n"


def descriptives_markdown(records: Sequence[CoastingRecord], weighting: str) -> str:
    rows = corpus_descriptives(records, weighting)
    unit = "student" if weighting == "student" else "student-session"
    n = rows[0].n if rows else 0
    lines = [
        f"Unit: {unit} (N = {n})",
        "",
        "| Measure | Mean, min | SD | Median | % Available Time | % Coasted Time |",
        "|---|---|---|---|---|---|",
    ]
    for r in rows:
        pc = "" if r.field in ("session_length", "time_on_task", "extra_effort_time") else (
            f"{100 * r.pct_coasted:.2f}%"
        )
        lines.append(
            f"| {r.measure} | {r.mean:.2f} | {r.sd:.2f} | {r.median:.2f} | "
            f"{100 * r.pct_available:.2f}% | {pc} |"
        )
    return "\n".join(lines) + "\n"


def family_markdown(family: str, fits: Sequence[lmm.LmmFit]) -> str:
    return f"### {family}\n\n" + lmm.fits_markdown(fits, TERM_LABELS)


def achievement_markdown(results: ModelResults) -> str:
    m3, m4 = results.achievement
    body = lmm.fits_markdown(results.achievement, TERM_LABELS)
    extra = [
        "",
        f"ΔR² (marginal), Model 4 vs Model 3: {m4.r2_marginal - m3.r2_marginal:.3f}",
        f"ΔBIC (Model 3 minus Model 4): {results.delta_bic:.2f} ({results.evidence} evidence)",
    ]
    return body + "\n".join(extra) + "\n"


# ---------------------------------------------------------------- group means

GROUP_VARIABLES = ("gender", "ethnicity", "frl", "iep", "ell", "locale")
PANELS = (("unadjusted", "coasted_pct"), ("adjusted", "adjusted_coasted_pct"))
GROUP_COLUMNS = ("panel", "variable", "level", "n", "mean", "sd", "se", "ci_low", "ci_high")


@dataclass(frozen=True)
class GroupMean:
    panel: str
    variable: str
    level: str
    n: int
    mean: float
    sd: float
    se: float

    @property
    def ci(self) -> tuple[float, float]:
        return self.mean - Z95 * self.se, self.mean + Z95 * self.se


def group_means(table: pd.DataFrame) -> list[GroupMean]:
    """Coasting percentage by demographic level; Missing rows are left out."""
    out = []
    for panel, col in PANELS:
        for var in GROUP_VARIABLES:
            sub = table[table[var] != "Missing"]
            for level in sorted(sub[var].unique()):
                x = sub.loc[sub[var] == level, col].to_numpy(dtype=float)
                n = len(x)
                sd = float(x.std(ddof=1)) if n > 1 else float("nan")
                se = sd / math.sqrt(n) if n > 1 else float("nan")
                out.append(GroupMean(panel, var, str(level), n, float(x.mean()), sd, se))
    return out


def write_group_means_csv(rows: Sequence[GroupMean], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUP_COLUMNS)
        for r in rows:
            lo, hi = r.ci
            w.writerow(
                [r.panel, r.variable, r.level, r.n]
                + [f"{v:.6f}" for v in (r.mean, r.sd, r.se, lo, hi)]
            )
