"""Random-intercept linear mixed models by profiled likelihood.

For groups ``g`` with ``n_g`` rows the marginal covariance is
``sigma2 * (I + lam * 11')`` with ``lam = tau00 / sigma2``. Given ``lam``
the GLS problem has a closed form through the per-group identity

    (I + lam 11')^-1 = I - lam / (1 + n_g lam) 11'

so both REML and ML criteria reduce to a scalar search over ``log(lam)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize, special

LOG_LAM_BOUNDS = (-20.0, 12.0)
XATOL = 1e-10


class DesignError(ValueError):
    """Model design cannot be built (rank deficiency, too few groups)."""


# ---------------------------------------------------------------- specification


@dataclass(frozen=True)
class Categorical:
    column: str
    reference: str
    levels: tuple[str, ...] | None = None  # None: observed levels


@dataclass(frozen=True)
class Interaction:
    left: str  # column names of two Categorical terms
    right: str


@dataclass
class ModelSpec:
    response: str
    covariates: list[str] = field(default_factory=list)
    categoricals: list[Categorical] = field(default_factory=list)
    interactions: list[Interaction] = field(default_factory=list)
    group: str = "class_id"
    standardize: tuple[str, ...] = ()
    missing_policy: str = "DropRow"  # or "RetainMissingLevel"
    name: str = ""


@dataclass
class Design:
    y: np.ndarray
    X: np.ndarray
    groups: np.ndarray  # integer codes
    columns: list[str]
    group_labels: list[str]
    report: dict


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DesignError("cannot standardize a constant column")
    return (x - x.mean()) / sd


def _collinear(X: np.ndarray, names: list[str]) -> list[str]:
    bad = []
    kept = []
    tol = 1e-10 * max(1.0, float(np.abs(X).max(initial=0.0))) * X.shape[0]
    for j in range(X.shape[1]):
        cand = X[:, kept + [j]]
        s = np.linalg.svd(cand, compute_uv=False)
        if s[-1] <= tol:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def build_design(spec: ModelSpec, data: pd.DataFrame) -> Design:
    """Response, fixed-effects matrix, group codes and an encoding report."""
    df = data.copy()
    n_in = len(df)
    report = {"rows_in": n_in, "dropped": {}}
    needed = [spec.response, spec.group, *spec.covariates] + [c.column for c in spec.categoricals]
    for col in needed:
        if col not in df.columns:
            raise DesignError(f"column {col!r} not in data")
    # numeric missingness always drops
    for col in [spec.response, *spec.covariates]:
        bad = df[col].isna()
        if bad.any():
            report["dropped"][col] = int(bad.sum())
            df = df[~bad]
    if spec.missing_policy == "DropRow":
        for c in spec.categoricals:
            bad = df[c.column].astype(str).eq("Missing") | df[c.column].isna()
            if bad.any():
                report["dropped"][c.column] = int(bad.sum())
                df = df[~bad]
    elif spec.missing_policy != "RetainMissingLevel":
        raise DesignError(f"unknown missing policy {spec.missing_policy!r}")
    df = df.reset_index(drop=True)

    cols: list[np.ndarray] = [np.ones(len(df))]
    names = ["Intercept"]
    for cov in spec.covariates:
        x = df[cov].to_numpy(dtype=float)
        if cov in spec.standardize:
            x = _zscore(x)
        cols.append(x)
        names.append(cov)
    dummies: dict[str, list[tuple[str, np.ndarray]]] = {}
    for c in spec.categoricals:
        values = df[c.column].astype(str).to_numpy()
        levels = list(c.levels) if c.levels is not None else sorted(set(values))
        if spec.missing_policy == "DropRow":
            levels = [lv for lv in levels if lv != "Missing"]
        if c.reference not in levels:
            raise DesignError(f"reference level {c.reference!r} absent from {c.column}")
        dummies[c.column] = []
        for lv in levels:
            if lv == c.reference:
                continue
            x = (values == lv).astype(float)
            dummies[c.column].append((lv, x))
            cols.append(x)
            names.append(f"{c.column}: {lv}")
    for it in spec.interactions:
        for lv_a, xa in dummies[it.left]:
            for lv_b, xb in dummies[it.right]:
                cols.append(xa * xb)
                names.append(f"{lv_a} x {lv_b}")
    X = np.column_stack(cols)
    y = df[spec.response].to_numpy(dtype=float)
    if spec.response in spec.standardize:
        y = _zscore(y)
    glabels, gcodes = np.unique(df[spec.group].astype(str).to_numpy(), return_inverse=True)
    if len(glabels) < 2:
        raise DesignError("grouping factor needs at least 2 levels")
    bad = _collinear(X, names)
    if bad:
        raise DesignError(f"rank-deficient design; collinear columns: {', '.join(bad)}")
    report["rows_used"] = len(df)
    report["columns"] = names
    return Design(y, X, gcodes.astype(np.int64), names, glabels.tolist(), report)


# ---------------------------------------------------------------- profiled fit


class _Groups:
    def __init__(self, design: Design):
        g = design.groups
        self.n = np.bincount(g).astype(float)
        self.XtX = design.X.T @ design.X
        self.Xty = design.X.T @ design.y
        self.yty = float(design.y @ design.y)
        G = len(self.n)
        self.sx = np.zeros((G, design.X.shape[1]))
        np.add.at(self.sx, g, design.X)
        self.sy = np.bincount(g, weights=design.y, minlength=G)
        self.N = len(design.y)
        self.p = design.X.shape[1]


def _profile(gs: _Groups, lam: float):
    """GLS at ``lam``: beta, RSS, log|V/sigma2| and log|X'V^-1 X * sigma2|."""
    c = lam / (1.0 + gs.n * lam)
    A = gs.XtX - (gs.sx * c[:, None]).T @ gs.sx
    b = gs.Xty - (gs.sx * c[:, None]).T @ gs.sy
    cf = np.linalg.cholesky(A)
    beta = np.linalg.solve(A, b)
    rss = gs.yty - float(np.sum(c * gs.sy**2)) - float(beta @ b)
    logdet_v = float(np.sum(np.log1p(gs.n * lam)))
    logdet_a = 2.0 * float(np.sum(np.log(np.diag(cf))))
    return beta, rss, logdet_v, logdet_a, A


def neg2_loglik(gs: _Groups, lam: float, reml: bool) -> float:
    _, rss, ldv, lda, _ = _profile(gs, lam)
    if reml:
        df = gs.N - gs.p
        return df * math.log(rss / df) + ldv + lda + df * (1.0 + math.log(2 * math.pi))
    return gs.N * math.log(rss / gs.N) + ldv + gs.N * (1.0 + math.log(2 * math.pi))


def _optimize(gs: _Groups, reml: bool) -> float:
    f = lambda t: neg2_loglik(gs, math.exp(t), reml)  # noqa: E731
    res = optimize.minimize_scalar(
        f, bounds=LOG_LAM_BOUNDS, method="bounded", options={"xatol": XATOL, "maxiter": 1000}
    )
    if not np.isfinite(res.fun):
        raise FloatingPointError("non-finite likelihood at optimum")
    lam = math.exp(res.x)
    # boundary lam = 0 is admissible
    if neg2_loglik(gs, 0.0, reml) <= res.fun:
        lam = 0.0
    return lam


STARS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


def stars(p: float) -> str:
    for cut, s in STARS:
        if p < cut:
            return s
    return ""


def wald_tests(beta: np.ndarray, se: np.ndarray):
    """z, two-sided normal p-values and star codes (strict ``<`` thresholds)."""
    beta = np.asarray(beta, dtype=float)
    se = np.asarray(se, dtype=float)
    z = np.divide(beta, se, out=np.zeros_like(beta), where=se > 0)
    p = special.erfc(np.abs(z) / math.sqrt(2.0))
    return z, p, [stars(v) for v in p]


@dataclass
class LmmFit:
    name: str
    columns: list[str]
    beta: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    stars: list[str]
    sigma2: float
    tau00: float
    lam: float
    icc: float
    r2_marginal: float
    r2_conditional: float
    loglik_reml: float
    loglik_ml: float
    bic_ml: float
    n_students: int
    n_classes: int
    k_params: int

    def coef(self, name: str) -> float:
        return float(self.beta[self.columns.index(name)])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "coefficients": [
                {"term": c, "beta": float(b), "se": float(s), "z": float(z), "p": float(p), "stars": st}
                for c, b, s, z, p, st in zip(self.columns, self.beta, self.se, self.z, self.p, self.stars)
            ],
            "sigma2": self.sigma2,
            "tau00": self.tau00,
            "icc": self.icc,
            "r2_marginal": self.r2_marginal,
            "r2_conditional": self.r2_conditional,
            "loglik_reml": self.loglik_reml,
            "loglik_ml": self.loglik_ml,
            "bic_ml": self.bic_ml,
            "n_students": self.n_students,
            "n_classes": self.n_classes,
        }


def icc(tau00: float, sigma2: float) -> float:
    return tau00 / (tau00 + sigma2)


def r2_nakagawa(X: np.ndarray, beta: np.ndarray, tau00: float, sigma2: float) -> tuple[float, float]:
    """Marginal and conditional R² for a random-intercept model."""
    # the intercept column adds only a constant, so leave it out of the variance
    pred = X[:, 1:] @ beta[1:]
    var_f = float(np.var(pred, ddof=1)) if len(pred) > 1 and X.shape[1] > 1 else 0.0
    total = var_f + tau00 + sigma2
    return var_f / total, (var_f + tau00) / total


def fit_reml(design: Design, name: str = "") -> tuple[LmmFit, _Groups]:
    """Variance part and fixed effects at the REML optimum (ML fields unset)."""
    gs = _Groups(design)
    if gs.N <= gs.p:
        raise DesignError("more fixed effects than observations")
    lam = _optimize(gs, reml=True)
    beta, rss, *_, A = _profile(gs, lam)
    sigma2 = rss / (gs.N - gs.p)
    tau00 = lam * sigma2
    se = np.sqrt(np.diag(np.linalg.inv(A)) * sigma2)
    z, p, st = wald_tests(beta, se)
    r2m, r2c = r2_nakagawa(design.X, beta, tau00, sigma2)
    fit = LmmFit(
        name=name, columns=list(design.columns), beta=beta, se=se, z=z, p=p, stars=st,
        sigma2=float(sigma2), tau00=float(tau00), lam=float(lam), icc=icc(tau00, sigma2),
        r2_marginal=r2m, r2_conditional=r2c,
        loglik_reml=-0.5 * neg2_loglik(gs, lam, True),
        loglik_ml=float("nan"), bic_ml=float("nan"),
        n_students=gs.N, n_classes=len(gs.n), k_params=gs.p + 2,
    )
    return fit, gs


def fit_ml(design: Design, bic_n: int | None = None) -> tuple[float, float, float]:
    """ML log-likelihood, BIC and the ML variance ratio.

    ``k`` counts fixed effects plus the two variance parameters; ``n``
    defaults to the number of rows (students).
    """
    gs = _Groups(design)
    lam = _optimize(gs, reml=False)
    ll = -0.5 * neg2_loglik(gs, lam, False)
    k = gs.p + 2
    n = gs.N if bic_n is None else bic_n
    return ll, -2.0 * ll + k * math.log(n), lam


def fit(design: Design, name: str = "", bic_n: int | None = None) -> LmmFit:
    out, _ = fit_reml(design, name)
    ll, bic, _ = fit_ml(design, bic_n)
    out.loglik_ml = ll
    out.bic_ml = bic
    return out


def raftery_band(delta_bic: float) -> str:
    """Evidence label for an absolute BIC difference."""
    d = abs(delta_bic)
    if d <= 2:
        return "weak"
    if d <= 6:
        return "positive"
    if d <= 10:
        return "strong"
    return "very strong"


# ---------------------------------------------------------------- output


def _fmt(b: float, s: str) -> str:
    return f"{b:.2f} {s}".strip()


def fits_markdown(fits: Sequence[LmmFit], labels: dict[str, str] | None = None) -> str:
    """Side-by-side table: coefficients with stars, random effects, N, R², BIC."""
    labels = labels or {}
    terms: list[str] = []
    for f in fits:
        for c in f.columns:
            if c not in terms:
                terms.append(c)
    head = "| Predictor | " + " | ".join(f.name or f"Model {i + 1}" for i, f in enumerate(fits)) + " |"
    lines = [head, "|---" * (len(fits) + 1) + "|"]
    for t in terms:
        cells = []
        for f in fits:
            if t in f.columns:
                i = f.columns.index(t)
                cells.append(_fmt(f.beta[i], f.stars[i]))
            else:
                cells.append("")
        lines.append(f"| {labels.get(t, t)} | " + " | ".join(cells) + " |")
    lines.append("| *Random Effects* |" + " |" * len(fits))
    lines.append("| σ² | " + " | ".join(f"{f.sigma2:.2f}" for f in fits) + " |")
    lines.append("| τ00 | " + " | ".join(f"{f.tau00:.2f}" for f in fits) + " |")
    lines.append("| ICC | " + " | ".join(f"{f.icc:.2f}" for f in fits) + " |")
    lines.append("| N (Classes) | " + " | ".join(str(f.n_classes) for f in fits) + " |")
    lines.append("| N (Students) | " + " | ".join(str(f.n_students) for f in fits) + " |")
    lines.append(
        "| Marginal R² / Conditional R² | "
        + " | ".join(f"{f.r2_marginal:.3f} / {f.r2_conditional:.3f}" for f in fits) + " |"
    )
    lines.append("| BIC | " + " | ".join(f"{f.bic_ml:.0f}" for f in fits) + " |")
    lines.append("")
    lines.append("*p < .05, **p < .01, ***p < .001 (Wald z-tests)")
    return "\n".join(lines) + "\n"


def fits_json(fits: Sequence[LmmFit]) -> str:
    return json.dumps([f.to_dict() for f in fits], indent=2, sort_keys=True) + "\n"
