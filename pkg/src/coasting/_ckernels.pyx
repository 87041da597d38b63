# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; see ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


def split_bursts(const i64[::1] ts, const i64[::1] group, i64 split_gap):
    cdef Py_ssize_t n = ts.shape[0], i
    out_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] out = out_arr
    cdef i64 bid = -1
    for i in range(n):
        if i == 0 or group[i] != group[i - 1] or ts[i] - ts[i - 1] > split_gap:
            bid += 1
        out[i] = bid
    return out_arr


def label_overlaps(const i64[::1] starts, const i64[::1] ends, const i64[::1] offsets):
    cdef Py_ssize_t n = starts.shape[0], k, i
    out_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] out = out_arr
    cdef i64 label = -1, reach = 0
    cdef bint fresh
    for k in range(offsets.shape[0] - 1):
        fresh = True
        for i in range(offsets[k], offsets[k + 1]):
            if fresh or starts[i] > reach:
                label += 1
                reach = ends[i]
                fresh = False
            elif ends[i] > reach:
                reach = ends[i]
            out[i] = label
    return out_arr


def peak_concurrency(const i64[::1] starts, const i64[::1] ends, const i64[::1] offsets):
    cdef Py_ssize_t nseg = offsets.shape[0] - 1, k, i, j, lo, hi
    out_arr = np.zeros(nseg, dtype=np.int64)
    cdef i64[::1] out = out_arr
    cdef i64 best, active
    for k in range(nseg):
        lo = offsets[k]
        hi = offsets[k + 1]
        j = lo
        best = 0
        for i in range(lo, hi):
            while j < hi and ends[j] < starts[i]:
                j += 1
            active = (i - lo + 1) - (j - lo)
            if active > best:
                best = active
        out[k] = best
    return out_arr


cdef inline i64 _clamp(i64 x, i64 a, i64 b) nogil:
    if x < a:
        return a
    if x > b:
        return b
    return x


def measure_windows(const i64[::1] ts, const i64[::1] complete, const i64[::1] offsets,
                    const i64[::1] sess_start, const i64[::1] sess_end,
                    i64 idle_threshold, bint excess):
    cdef Py_ssize_t nseg = offsets.shape[0] - 1, k, i, lo, hi
    first_arr = np.zeros(nseg, dtype=np.int64)
    last_arr = np.zeros(nseg, dtype=np.int64)
    idle_arr = np.zeros(nseg, dtype=np.int64)
    extra_arr = np.zeros(nseg, dtype=np.int64)
    done_arr = np.zeros(nseg, dtype=np.int64)
    cdef i64[::1] first = first_arr, last = last_arr, idle = idle_arr
    cdef i64[::1] extra = extra_arr, done = done_arr
    cdef i64 a, b, prev, cur, gap, lost, tot, after, tc
    cdef bint has_tc
    for k in range(nseg):
        lo = offsets[k]
        hi = offsets[k + 1]
        if hi <= lo:
            continue
        a = sess_start[k]
        b = sess_end[k]
        prev = _clamp(ts[lo], a, b)
        first[k] = prev
        has_tc = complete[lo] != 0
        tc = prev
        tot = 0
        after = 0
        for i in range(lo + 1, hi):
            cur = _clamp(ts[i], a, b)
            gap = cur - prev
            if gap > idle_threshold:
                lost = gap - idle_threshold if excess else gap
                tot += lost
                if has_tc:
                    after += lost
            if not has_tc and complete[i] != 0:
                has_tc = True
                tc = cur
            prev = cur
        last[k] = prev
        idle[k] = tot
        if has_tc:
            done[k] = 1
            extra[k] = (prev - tc) - after
    return first_arr, last_arr, idle_arr, extra_arr, done_arr
