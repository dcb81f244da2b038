"""Numba-compiled inner loops.

Everything here is deliberately free of Python objects: plain ndarrays in,
plain ndarrays out, so the JIT cache stays warm across processes.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

_BIG = 1e30


@njit(cache=True)
def gdt_1d(f, w, offset, out_d, out_arg):
    """Lower envelope of parabolas rooted at integer positions.

    out_d[j] = min_i f[i] + w*(j + offset - i)^2, out_arg[j] = minimizing i.
    Infinite inputs must be pre-clamped to <= 1e30 by the caller.
    """
    n = f.shape[0]
    if w <= 0.0:
        best = f[0]
        arg = 0
        for i in range(1, n):
            if f[i] < best:
                best = f[i]
                arg = i
        for j in range(n):
            out_d[j] = best
            out_arg[j] = arg
        return
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    k = 0
    v[0] = 0
    z[0] = -_BIG
    z[1] = _BIG
    for q in range(1, n):
        fq = f[q] + w * q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + w * p * p)) / (2.0 * w * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -_BIG
                    z[1] = _BIG
                    break
            else:
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = _BIG
                break
    k = 0
    for j in range(n):
        x = j + offset
        while z[k + 1] < x:
            k += 1
        p = v[k]
        out_d[j] = f[p] + w * (x - p) * (x - p)
        out_arg[j] = p


@njit(cache=True)
def gdt_2d(cost, wy, wx, dy, dx):
    """Separable quadratic lower envelope over a 2D grid.

    Returns (dist, argy, argx) with
    dist[i, j] = min_{y,x} cost[y, x] + wy*(i+dy-y)^2 + wx*(j+dx-x)^2
    and (argy, argx) the minimizing source pixel.
    """
    h, w = cost.shape
    d1 = np.empty((h, w), np.float64)
    a1 = np.empty((h, w), np.int64)
    row_d = np.empty(w, np.float64)
    row_a = np.empty(w, np.int64)
    for y in range(h):
        gdt_1d(cost[y], wx, dx, row_d, row_a)
        for j in range(w):
            d1[y, j] = row_d[j]
            a1[y, j] = row_a[j]
    dist = np.empty((h, w), np.float64)
    argy = np.empty((h, w), np.int64)
    argx = np.empty((h, w), np.int64)
    col = np.empty(h, np.float64)
    col_d = np.empty(h, np.float64)
    col_a = np.empty(h, np.int64)
    for j in range(w):
        for y in range(h):
            col[y] = d1[y, j]
        gdt_1d(col, wy, dy, col_d, col_a)
        for i in range(h):
            dist[i, j] = col_d[i]
            ys = col_a[i]
            argy[i, j] = ys
            argx[i, j] = a1[ys, j]
    return dist, argy, argx


@njit(cache=True, parallel=True)
def chamfer_cost_map(dt_trunc, near_orient, offy, offx, phis, lambda_o, max_pen, norm):
    """Mean truncated-distance + orientation penalty of a point template.

    dt_trunc: per-pixel min(distance-to-edge, dmax); near_orient: orientation
    of the nearest edge pixel (radians mod pi).  offy/offx are integer
    template-point offsets, phis the point orientations after state rotation.
    Points landing outside the image contribute max_pen.
    """
    h, w = dt_trunc.shape
    n = offy.shape[0]
    out = np.empty((h, w), np.float64)
    half_pi = math.pi / 2.0
    for y in prange(h):
        for x in range(w):
            acc = 0.0
            for k in range(n):
                yy = y + offy[k]
                xx = x + offx[k]
                if 0 <= yy < h and 0 <= xx < w:
                    d = near_orient[yy, xx] - phis[k]
                    d = d - math.floor(d / math.pi) * math.pi
                    if d > half_pi:
                        d = math.pi - d
                    acc += dt_trunc[yy, xx] + lambda_o * d
                else:
                    acc += max_pen
            out[y, x] = acc / (n * norm)
    return out


@njit(cache=True, parallel=True)
def point_sum_map(values, offy, offx, fill):
    """out[y, x] = sum_k values[y+offy[k], x+offx[k]], `fill` when outside."""
    h, w = values.shape
    n = offy.shape[0]
    out = np.empty((h, w), np.float64)
    for y in prange(h):
        for x in range(w):
            acc = 0.0
            for k in range(n):
                yy = y + offy[k]
                xx = x + offx[k]
                if 0 <= yy < h and 0 <= xx < w:
                    acc += values[yy, xx]
                else:
                    acc += fill
            out[y, x] = acc
    return out


@njit(cache=True)
def shifted_min_update(best, candidate, shift_y, shift_x, add, best_idx, idx):
    """best[y,x] = min(best[y,x], candidate[y+shift_y, x+shift_x] + add).

    Out-of-range source cells are treated as +inf.  best_idx records which
    `idx` produced the current minimum (back-pointer bookkeeping).
    """
    h, w = best.shape
    for y in range(h):
        yy = y + shift_y
        if yy < 0 or yy >= h:
            continue
        for x in range(w):
            xx = x + shift_x
            if xx < 0 or xx >= w:
                continue
            v = candidate[yy, xx] + add
            if v < best[y, x]:
                best[y, x] = v
                best_idx[y, x] = idx


@njit(cache=True, parallel=True)
def windowed_hist_correlation(ha_idx, hb_idx, valid, half, nbins):
    """Pearson correlation of two windowed bin-index images.

    For each pixel, histogram the bin indices of both images over a
    (2*half+1)^2 window restricted to `valid` pixels and correlate the two
    histograms.  Invalid center pixels yield -1.
    """
    h, w = ha_idx.shape
    out = np.full((h, w), -1.0)
    for y in prange(h):
        hist_a = np.zeros(nbins, np.float64)
        hist_b = np.zeros(nbins, np.float64)
        for x in range(w):
            if not valid[y, x]:
                continue
            for i in range(nbins):
                hist_a[i] = 0.0
                hist_b[i] = 0.0
            count = 0
            for dy in range(-half, half + 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in range(-half, half + 1):
                    xx = x + dx
                    if xx < 0 or xx >= w or not valid[yy, xx]:
                        continue
                    hist_a[ha_idx[yy, xx]] += 1.0
                    hist_b[hb_idx[yy, xx]] += 1.0
                    count += 1
            if count == 0:
                continue
            mean = count / nbins
            num = 0.0
            da = 0.0
            db = 0.0
            for i in range(nbins):
                a = hist_a[i] - mean
                b = hist_b[i] - mean
                num += a * b
                da += a * a
                db += b * b
            if da > 0.0 and db > 0.0:
                out[y, x] = num / math.sqrt(da * db)
            else:
                out[y, x] = 1.0 if da == db else 0.0
    return out
