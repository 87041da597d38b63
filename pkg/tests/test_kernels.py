import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coasting import _pykernels, kernels

try:
    from coasting import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
I64 = np.int64


def _segments(draw, max_segments=6, max_len=25, max_gap=2000):
    sizes = draw(st.lists(st.integers(0, max_len), min_size=1, max_size=max_segments))
    group, ts = [], []
    for g, n in enumerate(sizes):
        t = draw(st.integers(0, 10**6))
        for _ in range(n):
            t += draw(st.integers(0, max_gap))
            group.append(g)
            ts.append(t)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(I64)
    return np.array(ts, I64), np.array(group, I64), offsets


@st.composite
def grouped_times(draw):
    return _segments(draw)


@st.composite
def interval_slices(draw):
    ts, _, offsets = _segments(draw, max_gap=600)
    lens = np.array([draw(st.integers(0, 900)) for _ in range(len(ts))], I64)
    starts = ts.copy()
    ends = ts + lens
    return starts, ends, offsets


@needs_ext
@settings(max_examples=150, deadline=None)
@given(grouped_times(), st.integers(1, 1500))
def test_split_bursts_parity(data, gap):
    ts, group, _ = data
    np.testing.assert_array_equal(
        _ckernels.split_bursts(ts, group, gap), _pykernels.split_bursts(ts, group, gap)
    )


@needs_ext
@settings(max_examples=150, deadline=None)
@given(interval_slices())
def test_label_overlaps_parity(data):
    starts, ends, offsets = data
    np.testing.assert_array_equal(
        _ckernels.label_overlaps(starts, ends, offsets),
        _pykernels.label_overlaps(starts, ends, offsets),
    )


@needs_ext
@settings(max_examples=150, deadline=None)
@given(interval_slices())
def test_peak_concurrency_parity(data):
    starts, ends, offsets = data
    s = starts.copy()
    e = ends.copy()
    for a, b in zip(offsets[:-1], offsets[1:]):
        s[a:b].sort()
        e[a:b].sort()
    np.testing.assert_array_equal(
        _ckernels.peak_concurrency(s, e, offsets), _pykernels.peak_concurrency(s, e, offsets)
    )


@needs_ext
@settings(max_examples=150, deadline=None)
@given(grouped_times(), st.integers(1, 400), st.booleans(), st.data())
def test_measure_windows_parity(data, threshold, excess, extra):
    ts, _, offsets = data
    complete = np.array([extra.draw(st.integers(0, 5)) == 0 for _ in ts], I64)
    nseg = len(offsets) - 1
    lo = np.array([ts[a] if b > a else 0 for a, b in zip(offsets[:-1], offsets[1:])], I64)
    hi = np.array([ts[b - 1] if b > a else 0 for a, b in zip(offsets[:-1], offsets[1:])], I64)
    # session bounds sometimes narrower than the events to exercise clamping
    shrink = np.array([extra.draw(st.integers(0, 300)) for _ in range(nseg)], I64)
    s_start = lo - 100 + shrink
    s_end = np.maximum(hi + 100 - shrink, s_start)
    out_c = _ckernels.measure_windows(ts, complete, offsets, s_start, s_end, threshold, excess)
    out_p = _pykernels.measure_windows(ts, complete, offsets, s_start, s_end, threshold, excess)
    for a, b in zip(out_c, out_p):
        np.testing.assert_array_equal(np.asarray(a), b)


def test_empty_inputs_all_backends():
    empty = np.zeros(0, I64)
    one = np.zeros(1, I64)
    for mod in filter(None, (_pykernels, _ckernels)):
        assert len(mod.split_bursts(empty, empty, 900)) == 0
        assert len(mod.label_overlaps(empty, empty, one)) == 0
        assert len(mod.peak_concurrency(empty, empty, one)) == 0
        assert mod.peak_concurrency(empty, empty, np.zeros(2, I64)).tolist() == [0]


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    if _ckernels is not None and os.environ.get("COASTING_PURE_PYTHON", "") in ("", "0"):
        assert kernels.BACKEND == "cython"


def test_env_forces_python_backend():
    env = dict(os.environ, COASTING_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from coasting import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"
