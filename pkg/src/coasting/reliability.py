"""Variance components for a crossed students x months design with session
replicates, and the G / phi reliability coefficients built from them.

Model for score ``y`` of student ``j`` in month ``l``, replicate ``k``::

    y = mu + p_j + m_l + pm_jl + e_jlk

with independent zero-mean normal effects of variances ``sigma2_student``,
``sigma2_month``, ``sigma2_interaction`` and ``sigma2_residual``.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize

log = logging.getLogger(__name__)

REML_TOL = 1e-8
REML_MAX_ITER = 500


class Band(str, enum.Enum):
    Strong = "Strong"
    Moderate = "Moderate"
    Low = "Low"


def band(coef: float) -> Band:
    if coef >= 0.80:
        return Band.Strong
    if coef >= 0.60:
        return Band.Moderate
    return Band.Low


@dataclass(frozen=True)
class GDesign:
    """Observations indexed by student and month codes."""

    student: np.ndarray
    month: np.ndarray
    score: np.ndarray
    student_ids: tuple[str, ...]
    month_labels: tuple[str, ...]

    @property
    def n_students(self) -> int:
        return len(self.student_ids)

    @property
    def n_months(self) -> int:
        return len(self.month_labels)

    @property
    def cell(self) -> np.ndarray:
        return self.student * self.n_months + self.month

    def cell_counts(self) -> dict[tuple[int, int], int]:
        cells, counts = np.unique(self.cell, return_counts=True)
        return {(int(c) // self.n_months, int(c) % self.n_months): int(n) for c, n in zip(cells, counts)}

    @property
    def balanced(self) -> bool:
        counts = np.bincount(self.cell, minlength=self.n_students * self.n_months)
        return bool(len(counts) and counts.min() > 0 and counts.min() == counts.max())

    def as_array(self) -> np.ndarray:
        """(students, months, replicates) array; balanced designs only."""
        if not self.balanced:
            raise ValueError("design is not balanced")
        k = len(self.score) // (self.n_students * self.n_months)
        order = np.lexsort((np.arange(len(self.score)), self.month, self.student))
        return self.score[order].reshape(self.n_students, self.n_months, k)

    @classmethod
    def from_arrays(cls, student, month, score) -> GDesign:
        s_labels, s_codes = np.unique(np.asarray(student).astype(str), return_inverse=True)
        m_labels, m_codes = np.unique(np.asarray(month).astype(str), return_inverse=True)
        return cls(
            s_codes.astype(np.int64),
            m_codes.astype(np.int64),
            np.asarray(score, dtype=float),
            tuple(s_labels.tolist()),
            tuple(m_labels.tolist()),
        )

    @classmethod
    def from_cube(cls, y: np.ndarray) -> GDesign:
        J, L, K = y.shape
        j, l, _ = np.meshgrid(np.arange(J), np.arange(L), np.arange(K), indexing="ij")
        return cls(
            j.ravel().astype(np.int64),
            l.ravel().astype(np.int64),
            np.asarray(y, dtype=float).ravel(),
            tuple(f"s{i:05d}" for i in range(J)),
            tuple(f"m{i:03d}" for i in range(L)),
        )


def session_month(instant: int, zone) -> str:
    """Calendar month (``YYYY-MM``) of an instant in school-local time."""
    return datetime.fromtimestamp(instant, tz=timezone.utc).astimezone(zone).strftime("%Y-%m")


def build_design(
    records: Sequence,
    measure: str | Callable,
    zone_of: Callable[[str], object] | None = None,
    scale: float = 1.0 / 60.0,
) -> GDesign:
    """One observation per classwork record; month from the local session start.

    ``measure`` is a record attribute name or a callable on a record;
    ``zone_of`` maps a class id to its school timezone (UTC when omitted).
    """
    get = (lambda r: getattr(r, measure)) if isinstance(measure, str) else measure
    students, months, scores = [], [], []
    for r in records:
        zone = zone_of(r.class_id) if zone_of else timezone.utc
        students.append(r.student_id)
        months.append(session_month(r.session_start, zone))
        scores.append(float(get(r)) * scale)
    if not scores:
        raise ValueError("no records")
    return GDesign.from_arrays(students, months, scores)


@dataclass
class VarianceComponents:
    sigma2_student: float
    sigma2_month: float
    sigma2_interaction: float
    sigma2_residual: float
    method: str
    converged: bool = True
    iterations: int = 0
    loglik: float = float("nan")
    confounded: bool = False
    diagnostics: list[str] = field(default_factory=list)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sigma2_student, self.sigma2_month, self.sigma2_interaction, self.sigma2_residual)


# ---------------------------------------------------------------- balanced ANOVA


def estimate_anova_balanced(design: GDesign) -> VarianceComponents:
    """Expected-mean-squares estimates; negatives are truncated to zero."""
    if not design.balanced:
        raise ValueError("balanced ANOVA requires equal replicates in every cell")
    y = design.as_array()
    J, L, K = y.shape
    if J < 2 or L < 2:
        raise ValueError("need at least 2 students and 2 months")
    grand = y.mean()
    yj = y.mean(axis=(1, 2))
    yl = y.mean(axis=(0, 2))
    yjl = y.mean(axis=2)
    ms_p = L * K * np.sum((yj - grand) ** 2) / (J - 1)
    ms_m = J * K * np.sum((yl - grand) ** 2) / (L - 1)
    ms_pm = K * np.sum((yjl - yj[:, None] - yl[None, :] + grand) ** 2) / ((J - 1) * (L - 1))
    diag = []
    if K > 1:
        ms_e = np.sum((y - yjl[:, :, None]) ** 2) / (J * L * (K - 1))
        raw = {
            "student": (ms_p - ms_pm) / (L * K),
            "month": (ms_m - ms_pm) / (J * K),
            "interaction": (ms_pm - ms_e) / K,
            "residual": ms_e,
        }
        confounded = False
    else:
        raw = {
            "student": (ms_p - ms_pm) / L,
            "month": (ms_m - ms_pm) / J,
            "interaction": 0.0,
            "residual": ms_pm,
        }
        confounded = True
        diag.append("single replicate per cell: interaction confounded with residual")
    out = {}
    for name, v in raw.items():
        if v < 0:
            diag.append(f"negative {name} estimate {v:.6g} truncated to 0")
            v = 0.0
        out[name] = float(v)
    return VarianceComponents(
        out["student"], out["month"], out["interaction"], out["residual"],
        method="anova", confounded=confounded, diagnostics=diag,
    )


# ---------------------------------------------------------------- REML via EM


class _CellStats:
    def __init__(self, design: GDesign):
        cells, inv, n = np.unique(design.cell, return_inverse=True, return_counts=True)
        self.j = cells // design.n_months
        self.l = cells % design.n_months
        self.n = n.astype(float)
        self.sum = np.bincount(inv, weights=design.score)
        self.ybar = self.sum / self.n
        self.yy = float(np.dot(design.score, design.score))
        self.N = len(design.score)
        self.J = design.n_students
        self.L = design.n_months


def _solve(cs: _CellStats, v: np.ndarray, separate: bool):
    """Mixed-model equations with interaction and student blocks absorbed.

    Both absorbed blocks are diagonal, leaving a dense (1 + months) system.
    Returns the EM update and the REML log-likelihood at ``v``.
    """
    vp, vm, vpm, ve = v
    J, L = cs.J, cs.L
    if separate:
        rho = cs.n * vpm / (cs.n * vpm + ve)  # shrinkage of cell means
        w = cs.n * ve / (cs.n * vpm + ve)
    else:
        rho = np.zeros_like(cs.n)
        w = cs.n
    wy = w * cs.ybar
    # student block P (diagonal), coupling C to (intercept, months), small block T
    P = np.bincount(cs.j, weights=w, minlength=J) + ve / vp
    C = np.zeros((J, 1 + L))
    C[:, 0] = np.bincount(cs.j, weights=w, minlength=J)
    C[cs.j, 1 + cs.l] = w
    wl = np.bincount(cs.l, weights=w, minlength=L)
    T = np.empty((1 + L, 1 + L))
    T[0, 0] = w.sum()
    T[0, 1:] = T[1:, 0] = wl
    T[1:, 1:] = np.diag(wl + ve / vm)
    rp = np.bincount(cs.j, weights=wy, minlength=J)
    rs = np.concatenate([[wy.sum()], np.bincount(cs.l, weights=wy, minlength=L)])

    CP = C / P[:, None]
    Q = T - C.T @ CP
    cf = linalg.cho_factor(Q)
    Qi = linalg.cho_solve(cf, np.eye(1 + L))
    theta_s = Qi @ (rs - CP.T @ rp)
    theta_p = (rp - C @ theta_s) / P
    # blocks of the inverse coefficient matrix
    Mps = -CP @ Qi  # students x (intercept, months)
    Mpp_diag = 1.0 / P + np.einsum("ja,ab,jb->j", CP, Qi, CP)

    mu, m_hat = theta_s[0], theta_s[1:]
    fit = mu + theta_p[cs.j] + m_hat[cs.l]
    pm = rho * (cs.ybar - fit)
    # y'y - b'X'y - u'Z'y over all effects
    sum_j = np.bincount(cs.j, weights=cs.sum, minlength=J)
    sum_l = np.bincount(cs.l, weights=cs.sum, minlength=L)
    resid_ss = (
        cs.yy - mu * cs.sum.sum() - theta_p @ sum_j - m_hat @ sum_l - np.dot(pm, cs.sum)
    )
    new_vp = (theta_p @ theta_p + ve * Mpp_diag.sum()) / J
    new_vm = (m_hat @ m_hat + ve * np.trace(Qi[1:, 1:])) / L
    if separate:
        aMa = (
            Qi[0, 0] + Mpp_diag[cs.j] + Qi[1 + cs.l, 1 + cs.l]
            + 2 * (Mps[cs.j, 0] + Qi[0, 1 + cs.l] + Mps[cs.j, 1 + cs.l])
        )
        tr_pm = np.sum(rho / cs.n) + np.sum(rho**2 * aMa)
        new_vpm = (pm @ pm + ve * tr_pm) / len(cs.n)
    else:
        new_vpm = 0.0
    new_ve = resid_ss / (cs.N - 1)
    q = 1 + J + L
    logdet_S = np.sum(np.log(P)) + 2 * np.sum(np.log(np.diag(cf[0])))
    m2ll = (
        cs.N * math.log(ve) + J * math.log(vp) + L * math.log(vm)
        + logdet_S - q * math.log(ve) + resid_ss / ve + (cs.N - 1) * math.log(2 * math.pi)
    )
    if separate:
        m2ll += len(cs.n) * math.log(vpm) + np.sum(np.log(cs.n / ve + 1.0 / vpm))
    return np.array([new_vp, new_vm, new_vpm, new_ve]), -0.5 * m2ll


def reml_loglik(design: GDesign, components: Sequence[float], separate: bool = True) -> float:
    """Restricted log-likelihood at the given (student, month, interaction, residual) variances."""
    _, ll = _solve(_CellStats(design), np.asarray(components, dtype=float), separate)
    return float(ll)


def _polish(cs: _CellStats, v: np.ndarray, ll: float, separate: bool, floor: float, total: float):
    free = [0, 1, 2, 3] if separate else [0, 1, 3]

    def nll(x):
        w = np.zeros(4)
        w[free] = x * total
        return -_solve(cs, w, separate)[1]

    res = optimize.minimize(
        nll, v[free] / total, method="L-BFGS-B",
        bounds=[(floor / total, None)] * len(free),
        options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 1000},
    )
    if -res.fun < ll:
        return v, ll, False
    out = np.zeros(4)
    out[free] = res.x * total
    # KKT: zero gradient on free coordinates, nonnegative where the bound is active
    g = np.asarray(res.jac, dtype=float)
    at_bound = res.x <= floor / total * (1 + 1e-6)
    pg = np.where(at_bound, np.minimum(g, 0.0), g)
    kkt = float(np.max(np.abs(pg))) <= 1e-6 * max(1.0, abs(res.fun))
    return out, float(-res.fun), bool(res.success or kkt)


def estimate_reml(
    design: GDesign,
    separate: bool | None = None,
    tol: float = REML_TOL,
    max_iter: int = REML_MAX_ITER,
) -> VarianceComponents:
    """REML estimates by EM iterations with SQUAREM extrapolation.

    ``separate=None`` separates interaction from residual whenever some cell
    holds more than one observation; with ``separate=False`` (or no
    replicates) the interaction is absorbed into the residual.
    """
    if design.n_students < 2 or design.n_months < 2:
        raise ValueError("need at least 2 students and 2 months")
    cs = _CellStats(design)
    diag = []
    has_reps = bool(np.any(cs.n > 1))
    if separate is None:
        separate = has_reps
    if separate and not has_reps:
        raise ValueError("interaction and residual are not separable without replicates")
    if not separate:
        diag.append("interaction confounded with residual")
    total = float(np.var(design.score))
    if total <= 0.0:
        diag.append("zero total variance")
        return VarianceComponents(0.0, 0.0, 0.0, 0.0, "reml", True, 0, float("nan"), not separate, diag)

    floor = 1e-12 * total
    v = np.array([total / 4] * 4)
    if not separate:
        v[2] = 0.0

    def F(x):
        nxt, ll = _solve(cs, x, separate)
        return np.maximum(nxt, floor) * np.array([1, 1, float(separate), 1]), ll

    converged = False
    it = 0
    ll = float("nan")
    for it in range(1, max_iter + 1):
        v1, ll0 = F(v)
        v2, ll1 = F(v1)
        r = v1 - v
        d = v2 - v1 - r
        nr, nd = np.linalg.norm(r), np.linalg.norm(d)
        if nd > 0:
            alpha = min(-nr / nd, -1.0)
            cand = np.maximum(v - 2 * alpha * r + alpha**2 * d, floor)
            if not separate:
                cand[2] = 0.0
            cand_next, ll_cand = F(cand)
            _, ll2 = F(v2)
            new = cand_next if ll_cand >= ll2 else v2
        else:
            new = v2
        change = np.max(np.abs(new - v) / np.maximum(np.abs(v), floor))
        v = new
        if change < tol:
            converged = True
            break
    _, ll = _solve(cs, v, separate)
    if not converged:
        # EM crawls when a component heads for zero; finish on the likelihood itself
        v, ll, converged = _polish(cs, v, ll, separate, floor, total)
        diag.append(f"EM stalled after {max_iter} iterations; finished by bounded quasi-Newton")
    if not converged:
        diag.append("no convergence")
        log.warning("REML did not converge; returning best iterate")
    for name, val in zip(("student", "month", "interaction"), v[:3]):
        if separate or name != "interaction":
            if val <= 1e3 * floor:
                diag.append(f"{name} variance at boundary")
    return VarianceComponents(
        float(v[0]), float(v[1]), float(v[2]), float(v[3]), "reml",
        converged, it, float(ll), not separate, diag,
    )


# ---------------------------------------------------------------- coefficients


@dataclass(frozen=True)
class GStudyResult:
    g: float
    phi: float
    n_months_effective: float
    n_sessions_effective: float
    interpretation: Band
    diagnostics: tuple[str, ...] = ()


def effective_sizes(design: GDesign) -> tuple[float, float]:
    """Harmonic means of months per student and observations per cell."""
    cells, counts = np.unique(design.cell, return_counts=True)
    months_per_student = np.bincount(cells // design.n_months)
    months_per_student = months_per_student[months_per_student > 0]
    hm = lambda x: len(x) / np.sum(1.0 / np.asarray(x, dtype=float))  # noqa: E731
    return float(hm(months_per_student)), float(hm(counts))


def g_coefficients(
    components: VarianceComponents | Sequence[float],
    n_months_eff: float,
    n_sessions_eff: float,
) -> GStudyResult:
    if isinstance(components, VarianceComponents):
        vp, vm, vpm, ve = components.as_tuple()
    else:
        vp, vm, vpm, ve = (float(x) for x in components)
    if min(vp, vm, vpm, ve) < 0:
        raise ValueError("variance components must be nonnegative")
    if n_months_eff <= 0 or n_sessions_eff <= 0:
        raise ValueError("effective facet sizes must be positive")
    rel = vpm / n_months_eff + ve / (n_months_eff * n_sessions_eff)
    absolute = rel + vm / n_months_eff
    diag = []
    if vp + rel > 0:
        g = vp / (vp + rel)
    else:
        g = 0.0
        diag.append("zero student and error variance: G set to 0")
    if vp + absolute > 0:
        phi = vp / (vp + absolute)
    else:
        phi = 0.0
        diag.append("zero student and error variance: phi set to 0")
    return GStudyResult(g, phi, float(n_months_eff), float(n_sessions_eff), band(g), tuple(diag))


# ---------------------------------------------------------------- reporting


@dataclass(frozen=True)
class ReliabilityRow:
    measure: str
    fit: str  # "separated" or "confounded"
    components: VarianceComponents
    result: GStudyResult


def gstudy(
    records: Sequence,
    measures: dict[str, str],
    zone_of: Callable | None = None,
    n_months: float | None = None,
    n_sessions: float | None = None,
) -> list[ReliabilityRow]:
    """Separated and confounded fits plus G/phi for each named measure."""
    rows = []
    for label, attr in measures.items():
        design = build_design(records, attr, zone_of)
        nm, ns = effective_sizes(design)
        nm = n_months if n_months is not None else nm
        ns = n_sessions if n_sessions is not None else ns
        fits = []
        if np.any(np.bincount(design.cell) > 1):
            fits.append(("separated", estimate_reml(design, separate=True)))
        fits.append(("confounded", estimate_reml(design, separate=False)))
        for name, vc in fits:
            rows.append(ReliabilityRow(label, name, vc, g_coefficients(vc, nm, ns)))
    return rows


RELIABILITY_COLUMNS = (
    "measure", "fit", "sigma2_student", "sigma2_month", "sigma2_interaction",
    "sigma2_residual", "G", "phi", "band", "n_months_eff", "n_sessions_eff", "converged",
)


def write_reliability_csv(rows: Sequence[ReliabilityRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RELIABILITY_COLUMNS)
        for r in rows:
            c, g = r.components, r.result
            w.writerow(
                [r.measure, r.fit]
                + [f"{x:.8f}" for x in c.as_tuple()]
                + [f"{g.g:.6f}", f"{g.phi:.6f}", g.interpretation.value,
                   f"{g.n_months_effective:.4f}", f"{g.n_sessions_effective:.4f}", int(c.converged)]
            )


def reliability_markdown(rows: Sequence[ReliabilityRow]) -> str:
    lines = [
        "| Measure | Fit | σ²_p | σ²_m | σ²_pm | σ²_e | G | φ | Band |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        c, g = r.components, r.result
        lines.append(
            f"| {r.measure} | {r.fit} | {c.sigma2_student:.3f} | {c.sigma2_month:.3f} | "
            f"{c.sigma2_interaction:.3f} | {c.sigma2_residual:.3f} | {g.g:.2f} | {g.phi:.2f} | "
            f"{g.interpretation.value} |"
        )
    return "\n".join(lines) + "\n"
