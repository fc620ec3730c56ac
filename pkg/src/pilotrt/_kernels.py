"""Hot numeric kernels: numba-compiled with a pure-numpy fallback.

Set ``PILOTRT_NUMBA=0`` to force the numpy path. Both paths are always
importable through :data:`IMPLS` so tests and the benchmark can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_enabled() -> bool:
    return os.environ.get("PILOTRT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_enabled()


# -- numpy --------------------------------------------------------------------

def busy_area_np(start, end, weight, lo, hi):
    s = np.maximum(start, lo)
    e = np.minimum(end, hi)
    return float(np.sum(weight * np.clip(e - s, 0.0, None)))


def step_series_np(times, deltas):
    """Running sum of ``deltas`` sampled once per distinct time.

    Input must be sorted by (time, delta) so decrements precede increments at
    equal times.
    """
    if times.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    running = np.cumsum(deltas)
    last = np.flatnonzero(np.r_[times[1:] != times[:-1], True])
    return times[last], running[last]


def bucket_counts_np(starts, origin, width, nbuckets):
    idx = np.floor((starts - origin) / width).astype(np.int64)
    idx = np.clip(idx, 0, nbuckets - 1)
    return np.bincount(idx, minlength=nbuckets).astype(np.int64)


def first_fit_np(free_c, free_g, cores, gpus):
    hit = np.flatnonzero((free_c >= cores) & (free_g >= gpus))
    return int(hit[0]) if hit.size else -1


# -- numba --------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def busy_area_nb(start, end, weight, lo, hi):
        total = 0.0
        for i in range(start.shape[0]):
            s = start[i] if start[i] > lo else lo
            e = end[i] if end[i] < hi else hi
            if e > s:
                total += weight[i] * (e - s)
        return total

    @njit(cache=True)
    def _step_series_nb(times, deltas):
        n = times.shape[0]
        out_t = np.empty(n, dtype=np.float64)
        out_r = np.empty(n, dtype=np.int64)
        k = 0
        running = 0
        for i in range(n):
            running += deltas[i]
            if i == n - 1 or times[i + 1] != times[i]:
                out_t[k] = times[i]
                out_r[k] = running
                k += 1
        return out_t[:k], out_r[:k]

    def step_series_nb(times, deltas):
        if times.size == 0:
            return np.empty(0), np.empty(0, dtype=np.int64)
        return _step_series_nb(times.astype(np.float64), deltas.astype(np.int64))

    @njit(cache=True)
    def _bucket_counts_nb(starts, origin, width, nbuckets):
        out = np.zeros(nbuckets, dtype=np.int64)
        for i in range(starts.shape[0]):
            j = int(np.floor((starts[i] - origin) / width))
            if j < 0:
                j = 0
            elif j >= nbuckets:
                j = nbuckets - 1
            out[j] += 1
        return out

    def bucket_counts_nb(starts, origin, width, nbuckets):
        return _bucket_counts_nb(starts.astype(np.float64), float(origin), float(width), int(nbuckets))

    @njit(cache=True)
    def first_fit_nb(free_c, free_g, cores, gpus):
        for i in range(free_c.shape[0]):
            if free_c[i] >= cores and free_g[i] >= gpus:
                return i
        return -1

    def busy_area_nb_py(start, end, weight, lo, hi):
        return float(busy_area_nb(start.astype(np.float64), end.astype(np.float64),
                                  weight.astype(np.float64), float(lo), float(hi)))


IMPLS: dict[str, dict] = {
    "numpy": {
        "busy_area": busy_area_np,
        "step_series": step_series_np,
        "bucket_counts": bucket_counts_np,
        "first_fit": first_fit_np,
    }
}
if HAVE_NUMBA:
    IMPLS["numba"] = {
        "busy_area": busy_area_nb_py,
        "step_series": step_series_nb,
        "bucket_counts": bucket_counts_nb,
        "first_fit": first_fit_nb,
    }

ACTIVE = "numba" if USE_NUMBA else "numpy"

busy_area = IMPLS[ACTIVE]["busy_area"]
step_series = IMPLS[ACTIVE]["step_series"]
bucket_counts = IMPLS[ACTIVE]["bucket_counts"]
first_fit = IMPLS[ACTIVE]["first_fit"]


def sort_changes(times: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((deltas, times))
    return times[order], deltas[order]
