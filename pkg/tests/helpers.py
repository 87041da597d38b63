"""Small builders shared by the test modules."""

from __future__ import annotations

import math
from datetime import datetime
from zoneinfo import ZoneInfo

import numpy as np

from coasting.model import EventKind, EventTable, TransactionEvent


def table(rows) -> EventTable:
    """Rows of (student, class, ts, kind[, assignment[, problem]])."""
    evs = []
    for r in rows:
        sid, cid, ts, kind = r[:4]
        aid = r[4] if len(r) > 4 else "a1"
        pid = r[5] if len(r) > 5 else None
        k = EventKind[kind] if isinstance(kind, str) else EventKind(kind)
        evs.append(TransactionEvent(sid, cid, int(ts), k, aid, pid))
    return EventTable.from_events(evs)


def local(y, mo, d, h, mi, tz="America/New_York", s=0) -> int:
    return int(datetime(y, mo, d, h, mi, s, tzinfo=ZoneInfo(tz)).timestamp())


def dense(sid, cid, start, end, step=30, kind="Response"):
    """Evenly spaced events from start to end inclusive."""
    out = []
    t = start
    while t < end:
        out.append((sid, cid, t, kind))
        t += step
    out.append((sid, cid, end, kind))
    return out


def write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def dense_neg2_reml(design, lams):
    """-2 REML log-likelihood profiled over sigma2, built from explicit group covariance matrices."""
    X, y, g = design.X, design.y, design.groups
    N, p = X.shape
    K = len(lams)
    XtHX = np.zeros((K, p, p))
    XtHy = np.zeros((K, p))
    ytHy = np.zeros(K)
    logdet = np.zeros(K)
    for grp in np.unique(g):
        m = g == grp
        n = int(m.sum())
        H = np.eye(n)[None] + lams[:, None, None] * np.ones((n, n))[None]
        Hi = np.linalg.inv(H)
        Xg, yg = X[m], y[m]
        XtHX += np.einsum("ia,kij,jb->kab", Xg, Hi, Xg)
        XtHy += np.einsum("ia,kij,j->ka", Xg, Hi, yg)
        ytHy += np.einsum("i,kij,j->k", yg, Hi, yg)
        logdet += np.linalg.slogdet(H)[1]
    beta = np.linalg.solve(XtHX, XtHy[..., None])[..., 0]
    rss = ytHy - np.einsum("ka,ka->k", beta, XtHy)
    df = N - p
    return df * np.log(rss / df) + logdet + np.linalg.slogdet(XtHX)[1] + df * (1 + math.log(2 * math.pi))
