# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event kernels. Must stay bit-identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, INFINITY

cnp.import_array()


def voxel_deposit(const cnp.int64_t[::1] x, const cnp.int64_t[::1] y,
                  const cnp.int64_t[::1] t, const cnp.int8_t[::1] p,
                  cnp.int64_t t_start, cnp.int64_t duration,
                  Py_ssize_t K, Py_ssize_t H, Py_ssize_t W):
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.zeros((2, K, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] grid = out
    cdef double dt = <double>duration / <double>K
    cdef double rel, w
    cdef Py_ssize_t i, k, k0, ch
    cdef Py_ssize_t n = t.shape[0]
    for i in range(n):
        rel = <double>(t[i] - t_start)
        k0 = <Py_ssize_t>floor(rel / dt - 0.5)
        ch = 0 if p[i] > 0 else 1
        for k in range(k0, k0 + 2):
            if k < 0 or k >= K:
                continue
            w = 1.0 - fabs(rel - (k + 0.5) * dt) / dt
            if w > 0.0:
                grid[ch, k, y[i], x[i]] += w
    return out


cdef Py_ssize_t _pixel_crossings(const double[:, :, ::1] logv, const double[::1] times,
                                 Py_ssize_t yy, Py_ssize_t xx, double c, double refractory,
                                 double[::1] t_out, cnp.int8_t[::1] p_out,
                                 Py_ssize_t start, bint write) noexcept nogil:
    cdef Py_ssize_t n, count = 0
    cdef Py_ssize_t N = logv.shape[0]
    cdef double base = logv[0, yy, xx]
    cdef long m = 0
    cdef double last_t = -INFINITY
    cdef double l0, l1, t0, t1, lvl, tc
    for n in range(1, N):
        l0 = logv[n - 1, yy, xx]
        l1 = logv[n, yy, xx]
        t0 = times[n - 1]
        t1 = times[n]
        if l1 > l0:
            while True:
                lvl = base + (m + 1) * c
                if l1 < lvl:
                    break
                tc = t0 + (lvl - l0) / (l1 - l0) * (t1 - t0)
                m += 1
                if tc - last_t >= refractory:
                    if write:
                        t_out[start + count] = tc
                        p_out[start + count] = 1
                    count += 1
                    last_t = tc
        elif l1 < l0:
            while True:
                lvl = base + (m - 1) * c
                if l1 > lvl:
                    break
                tc = t0 + (lvl - l0) / (l1 - l0) * (t1 - t0)
                m -= 1
                if tc - last_t >= refractory:
                    if write:
                        t_out[start + count] = tc
                        p_out[start + count] = -1
                    count += 1
                    last_t = tc
    return count


def threshold_crossings(const double[:, :, ::1] logv, const double[::1] times,
                        double c, double refractory):
    """Return (x, y, t, p) of all crossings, pixel-major (row, column) order."""
    cdef Py_ssize_t H = logv.shape[1], W = logv.shape[2]
    cdef Py_ssize_t yy, xx, total = 0, pos = 0, cnt
    cdef double[::1] dummy_t = np.empty(0, dtype=np.float64)
    cdef cnp.int8_t[::1] dummy_p = np.empty(0, dtype=np.int8)
    cdef cnp.int64_t[:, ::1] counts = np.zeros((H, W), dtype=np.int64)
    with nogil:
        for yy in range(H):
            for xx in range(W):
                cnt = _pixel_crossings(logv, times, yy, xx, c, refractory,
                                       dummy_t, dummy_p, 0, False)
                counts[yy, xx] = cnt
                total += cnt
    xs = np.empty(total, dtype=np.int64)
    ys = np.empty(total, dtype=np.int64)
    ts = np.empty(total, dtype=np.float64)
    ps = np.empty(total, dtype=np.int8)
    cdef cnp.int64_t[::1] xv = xs, yv = ys
    cdef double[::1] tv = ts
    cdef cnp.int8_t[::1] pv = ps
    cdef Py_ssize_t j
    with nogil:
        for yy in range(H):
            for xx in range(W):
                cnt = counts[yy, xx]
                if cnt == 0:
                    continue
                _pixel_crossings(logv, times, yy, xx, c, refractory, tv, pv, pos, True)
                for j in range(pos, pos + cnt):
                    xv[j] = xx
                    yv[j] = yy
                pos += cnt
    return xs, ys, ts, ps
