"""Pure-Python implementations of the hot loops.

Each function mirrors the compiled version in ``_ckernels.pyx`` exactly;
inputs are int64 numpy arrays, outputs are int64 numpy arrays.
"""

import numpy as np


def split_bursts(ts, group, split_gap):
    n = len(ts)
    out = np.empty(n, dtype=np.int64)
    t = ts.tolist()
    g = group.tolist()
    bid = -1
    for i in range(n):
        if i == 0 or g[i] != g[i - 1] or t[i] - t[i - 1] > split_gap:
            bid += 1
        out[i] = bid
    return out


def label_overlaps(starts, ends, offsets):
    """Component labels for runs of start-sorted intervals that overlap or touch."""
    n = len(starts)
    out = np.empty(n, dtype=np.int64)
    s = starts.tolist()
    e = ends.tolist()
    off = offsets.tolist()
    label = -1
    for k in range(len(off) - 1):
        reach = None
        for i in range(off[k], off[k + 1]):
            if reach is None or s[i] > reach:
                label += 1
                reach = e[i]
            elif e[i] > reach:
                reach = e[i]
            out[i] = label
    return out


def peak_concurrency(starts, ends, offsets):
    """Max number of simultaneously open closed intervals per slice.

    Within each slice ``starts`` and ``ends`` must each be sorted ascending.
    """
    nseg = len(offsets) - 1
    out = np.zeros(nseg, dtype=np.int64)
    s = starts.tolist()
    e = ends.tolist()
    off = offsets.tolist()
    for k in range(nseg):
        lo, hi = off[k], off[k + 1]
        j = lo
        best = 0
        for i in range(lo, hi):
            while j < hi and e[j] < s[i]:
                j += 1
            active = (i - lo + 1) - (j - lo)
            if active > best:
                best = active
        out[k] = best
    return out


def measure_windows(ts, complete, offsets, sess_start, sess_end, idle_threshold, excess):
    """Per-segment first/last/idle/extra-effort/completion.

    Timestamps are clamped into [sess_start, sess_end] of their segment.
    """
    nseg = len(offsets) - 1
    first = np.zeros(nseg, dtype=np.int64)
    last = np.zeros(nseg, dtype=np.int64)
    idle = np.zeros(nseg, dtype=np.int64)
    extra = np.zeros(nseg, dtype=np.int64)
    done = np.zeros(nseg, dtype=np.int64)
    t = ts.tolist()
    c = complete.tolist()
    off = offsets.tolist()
    ss = sess_start.tolist()
    se = sess_end.tolist()
    for k in range(nseg):
        lo, hi = off[k], off[k + 1]
        if hi <= lo:
            continue
        a, b = ss[k], se[k]
        prev = min(max(t[lo], a), b)
        first[k] = prev
        tc = prev if c[lo] else None
        tot = 0
        after = 0
        for i in range(lo + 1, hi):
            cur = min(max(t[i], a), b)
            gap = cur - prev
            if gap > idle_threshold:
                lost = gap - idle_threshold if excess else gap
                tot += lost
                if tc is not None:
                    after += lost
            if tc is None and c[i]:
                tc = cur
            prev = cur
        last[k] = prev
        idle[k] = tot
        if tc is not None:
            done[k] = 1
            extra[k] = (prev - tc) - after
    return first, last, idle, extra, done
