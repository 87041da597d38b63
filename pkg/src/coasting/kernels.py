"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the
pure-Python versions are loaded. Set ``COASTING_PURE_PYTHON=1`` to force
the fallback.
"""

import os

from coasting import _pykernels

if os.environ.get("COASTING_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from coasting import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

split_bursts = _impl.split_bursts
label_overlaps = _impl.label_overlaps
peak_concurrency = _impl.peak_concurrency
measure_windows = _impl.measure_windows

__all__ = [
    "BACKEND",
    "split_bursts",
    "label_overlaps",
    "peak_concurrency",
    "measure_windows",
]
