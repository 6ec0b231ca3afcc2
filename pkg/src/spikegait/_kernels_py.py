"""Pure-Python/numpy versions of the event kernels.

Arithmetic is written to match ``_kernels_cy`` operation for operation so the
two backends produce bit-identical output.
"""

import math

import numpy as np


def voxel_deposit(x, y, t, p, t_start, duration, K, H, W):
    grid = np.zeros((2, K, H, W), dtype=np.float64)
    if len(t) == 0:
        return grid
    dt = float(duration) / float(K)
    rel = (t - t_start).astype(np.float64)
    k0 = np.floor(rel / dt - 0.5).astype(np.int64)
    # (event, bin) pairs in event-major order; np.add.at accumulates sequentially
    ks = np.stack([k0, k0 + 1], axis=1)
    w = 1.0 - np.abs(rel[:, None] - (ks + 0.5) * dt) / dt
    ch = np.where(p > 0, 0, 1)
    keep = (ks >= 0) & (ks < K) & (w > 0.0)
    rows = np.broadcast_to(np.arange(len(t))[:, None], ks.shape)[keep]
    flat = ((ch[rows] * K + ks[keep]) * H + y[rows]) * W + x[rows]
    np.add.at(grid.reshape(-1), flat, w[keep])
    return grid


def _pixel_crossings(col, times, c, refractory):
    """Crossings of one pixel's log trace; returns lists of (t, p)."""
    out_t, out_p = [], []
    base = col[0]
    m = 0
    last_t = -math.inf
    for n in range(1, len(col)):
        l0 = col[n - 1]
        l1 = col[n]
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
                    out_t.append(tc)
                    out_p.append(1)
                    last_t = tc
        elif l1 < l0:
            while True:
                lvl = base + (m - 1) * c
                if l1 > lvl:
                    break
                tc = t0 + (lvl - l0) / (l1 - l0) * (t1 - t0)
                m -= 1
                if tc - last_t >= refractory:
                    out_t.append(tc)
                    out_p.append(-1)
                    last_t = tc
    return out_t, out_p


def threshold_crossings(logv, times, c, refractory):
    N, H, W = logv.shape
    times_l = [float(v) for v in times]
    span = logv.max(axis=0) - logv.min(axis=0)
    # a pixel whose whole excursion stays below c cannot fire; margin guards rounding
    active = span >= c * (1.0 - 1e-9)
    xs, ys, ts, ps = [], [], [], []
    for yy, xx in zip(*np.nonzero(active)):
        col = logv[:, yy, xx].tolist()
        pt, pp = _pixel_crossings(col, times_l, c, refractory)
        if pt:
            xs.extend([int(xx)] * len(pt))
            ys.extend([int(yy)] * len(pt))
            ts.extend(pt)
            ps.extend(pp)
    return (
        np.asarray(xs, dtype=np.int64),
        np.asarray(ys, dtype=np.int64),
        np.asarray(ts, dtype=np.float64),
        np.asarray(ps, dtype=np.int8),
    )
