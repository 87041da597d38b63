"""Compare the compiled and pure-Python kernel backends.

Times each kernel on synthetic arrays, then the sessionization and
measurement stages end to end on a simulated corpus with each backend
swapped in. Usage::

    python3 benchmarks/bench_kernels.py [--events 1000000] [--students 1400] [--repeat 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from coasting import _pykernels, kernels, simulate
from coasting.measures import measure_all
from coasting.model import SchoolCalendar
from coasting.sessions import infer_sessions

try:
    from coasting import _ckernels
except ImportError:
    _ckernels = None

NAMES = ("split_bursts", "label_overlaps", "peak_concurrency", "measure_windows")


def synthetic(n_events: int, seg_len: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    n_seg = max(1, n_events // seg_len)
    sizes = rng.integers(1, 2 * seg_len, n_seg)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    n = int(offsets[-1])
    group = np.repeat(np.arange(n_seg, dtype=np.int64), sizes)
    gaps = rng.exponential(40.0, n).astype(np.int64)
    gaps[rng.random(n) < 0.01] += 2000
    ts = np.cumsum(gaps).astype(np.int64)
    lens = rng.integers(0, 1800, n).astype(np.int64)
    starts = ts.copy()
    ends = ts + lens
    s_sorted, e_sorted = starts.copy(), ends.copy()
    for a, b in zip(offsets[:-1], offsets[1:]):
        e_sorted[a:b].sort()
    complete = (rng.random(n) < 0.02).astype(np.int64)
    lo = ts[offsets[:-1]] - 60
    hi = ts[offsets[1:] - 1] + 60
    return {
        "split_bursts": (ts, group, 900),
        "label_overlaps": (starts, ends, offsets),
        "peak_concurrency": (s_sorted, e_sorted, offsets),
        "measure_windows": (ts, complete, offsets, lo, hi, 120, False),
    }


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def use_backend(mod) -> None:
    for name in NAMES:
        setattr(kernels, name, getattr(mod, name))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=1_000_000)
    ap.add_argument("--students", type=int, default=1400)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    backends = [("python", _pykernels)]
    if _ckernels is not None:
        backends.insert(0, ("cython", _ckernels))
    else:
        print("compiled kernels not built; timing the Python fallback only")

    data = synthetic(args.events, seg_len=40)
    print(f"kernels on {args.events:,} synthetic events (best of {args.repeat}, seconds)")
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b, _ in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name in NAMES:
        row = [best_of(lambda m=mod: getattr(m, name)(*data[name]), args.repeat) for _, mod in backends]
        line = f"{name:<18}" + "".join(f"{t:>12.4f}" for t in row)
        if len(row) > 1:
            line += f"{row[1] / row[0]:>9.1f}x"
        print(line)

    sim = simulate.generate(simulate.SimConfig(seed=2023, n_students=args.students))
    cals = {r.class_id: SchoolCalendar(r.timezone) for r in sim.roster}
    print(f"\nsessions + measures on a simulated corpus of {len(sim.events):,} events")
    totals = []
    for label, mod in backends:
        use_backend(mod)
        t = best_of(lambda: measure_all(infer_sessions(sim.events, cals)), args.repeat)
        totals.append(t)
        print(f"{label:<18}{t:>12.4f}")
    use_backend(_ckernels or _pykernels)
    if len(totals) > 1:
        print(f"{'speedup':<18}{totals[1] / totals[0]:>11.1f}x")


if __name__ == "__main__":
    main()
