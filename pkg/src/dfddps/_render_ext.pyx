# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled spatially varying scatter kernels.  Same contract as ``_render_py``.

The reference kernel is zero-padded by one pixel on every side and stored
channel-last, so taps falling outside it read zeros and the inner loops need
no bounds tests.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef void _taps(double s, int h, int k, long* p0, long* p1, double* w0, double* w1,
                double* dw0, double* dw1) noexcept nogil:
    """Bilinear taps as indices into the padded reference; out-of-range rows map to row 0."""
    cdef double center = (k - 1) / 2.0
    cdef double src, fr, dsrc, u
    cdef long lo
    cdef int a
    for a in range(2 * h + 1):
        u = a - h
        src = center + u / s
        lo = <long>floor(src)
        fr = src - lo
        dsrc = -u / (s * s)
        w0[a] = 1.0 - fr
        w1[a] = fr
        if fr > 0:
            dw0[a] = -dsrc
            dw1[a] = dsrc
        else:
            dw0[a] = 0.0
            dw1[a] = 0.0
        p0[a] = lo + 1 if 0 <= lo < k else 0
        p1[a] = lo + 2 if 0 <= lo + 1 < k else 0


cdef struct Scratch:
    long* p0
    long* p1
    double* w0
    double* w1
    double* dw0
    double* dw1
    double* tmp      # (n, k+2, C) rows resampled
    double* dtmp
    double* colw     # (k+2,) total column weight per padded column
    double* dcolw
    double* ssum     # (C,) raw kernel sums
    double* dsum


cdef void _rows(const double* refp, int k, int C, double s, int h, bint need_grad, Scratch sc) noexcept nogil:
    """First (row) resampling pass plus the raw kernel sums and their scale derivatives.

    The raw kernel is ``K[a, b] = w0[b] tmp[a, p0[b]] + w1[b] tmp[a, p1[b]]``; its
    sum only needs the per-column weight totals, so it never has to be formed here.
    """
    cdef int kp = k + 2
    cdef int n = 2 * h + 1
    cdef int a, b, j, c
    cdef long r0, r1, ia
    cdef double a0, a1, da0, da1, colsum, dcolsum
    _taps(s, h, k, sc.p0, sc.p1, sc.w0, sc.w1, sc.dw0, sc.dw1)
    for a in range(n):
        r0 = sc.p0[a] * kp * C
        r1 = sc.p1[a] * kp * C
        a0 = sc.w0[a]
        a1 = sc.w1[a]
        ia = a * kp * C
        for j in range(kp * C):
            sc.tmp[ia + j] = a0 * refp[r0 + j] + a1 * refp[r1 + j]
        if need_grad:
            da0 = sc.dw0[a]
            da1 = sc.dw1[a]
            for j in range(kp * C):
                sc.dtmp[ia + j] = da0 * refp[r0 + j] + da1 * refp[r1 + j]
    for j in range(kp):
        sc.colw[j] = 0.0
        sc.dcolw[j] = 0.0
    for b in range(n):
        sc.colw[sc.p0[b]] += sc.w0[b]
        sc.colw[sc.p1[b]] += sc.w1[b]
        sc.dcolw[sc.p0[b]] += sc.dw0[b]
        sc.dcolw[sc.p1[b]] += sc.dw1[b]
    for c in range(C):
        sc.ssum[c] = 0.0
        sc.dsum[c] = 0.0
    for j in range(kp):
        for c in range(C):
            colsum = 0.0
            dcolsum = 0.0
            for a in range(n):
                colsum += sc.tmp[(a * kp + j) * C + c]
                if need_grad:
                    dcolsum += sc.dtmp[(a * kp + j) * C + c]
            sc.ssum[c] += sc.colw[j] * colsum
            if need_grad:
                sc.dsum[c] += sc.dcolw[j] * colsum + sc.colw[j] * dcolsum


def _prepare(ref, half):
    C, k = ref.shape[0], ref.shape[1]
    refp = np.ascontiguousarray(np.pad(np.asarray(ref, dtype=np.float64), ((0, 0), (1, 1), (1, 1))).transpose(1, 2, 0))
    n = 2 * int(np.max(half)) + 1
    ints = np.zeros((2, n), dtype=np.int64)
    flts = np.zeros(4 * n + 2 * n * (k + 2) * C + 2 * (k + 2) + 2 * C)
    return refp, ints, flts


cdef Scratch _scratch(long[:, ::1] ints, double[::1] flts, int n, int k, int C) noexcept:
    cdef Scratch sc
    cdef double* f = &flts[0]
    sc.p0 = &ints[0, 0]
    sc.p1 = &ints[1, 0]
    sc.w0 = f
    sc.w1 = f + n
    sc.dw0 = f + 2 * n
    sc.dw1 = f + 3 * n
    f += 4 * n
    sc.tmp = f
    sc.dtmp = f + n * (k + 2) * C
    f += 2 * n * (k + 2) * C
    sc.colw = f
    sc.dcolw = f + (k + 2)
    f += 2 * (k + 2)
    sc.ssum = f
    sc.dsum = f + C
    return sc


cdef inline int _clip_lo(int o0) noexcept nogil:
    return -o0 if o0 < 0 else 0


cdef inline int _clip_hi(int o0, int size, int m) noexcept nogil:
    return size - o0 if size - o0 < m else m


def render_core(const double[:, :, ::1] rgb_pad, const double[:, ::1] scale_pad,
                const long[:, ::1] half, ref, int out_h, int out_w, int pad):
    cdef int hp = rgb_pad.shape[0]
    cdef int wp = rgb_pad.shape[1]
    cdef int C = rgb_pad.shape[2]
    if C > 8:
        raise ValueError("at most 8 channels supported")
    refp_a, ints, flts = _prepare(ref, half)
    cdef const double[:, :, ::1] refp = refp_a
    cdef int k = ref.shape[1]
    cdef int kp = k + 2
    cdef int n = ints.shape[1]
    cdef Scratch sc = _scratch(ints, flts, n, k, C)
    out_arr = np.zeros((out_h, out_w, C))
    cdef double[:, :, ::1] out = out_arr
    cdef int i, j, h, m, a, b, c, y0, x0, a_lo, a_hi, b_lo, b_hi
    cdef long q0, q1, ia
    cdef double b0, b1
    cdef double src[8]
    cdef double* orow
    with nogil:
        for i in range(hp):
            for j in range(wp):
                h = half[i, j]
                m = 2 * h + 1
                # output rows/cols covered by this source, clipped to the image
                y0 = i - pad - h
                x0 = j - pad - h
                a_lo = _clip_lo(y0)
                a_hi = _clip_hi(y0, out_h, m)
                b_lo = _clip_lo(x0)
                b_hi = _clip_hi(x0, out_w, m)
                if a_lo >= a_hi or b_lo >= b_hi:
                    continue
                if h == 0:
                    for c in range(C):
                        out[y0, x0, c] += rgb_pad[i, j, c]
                    continue
                _rows(&refp[0, 0, 0], k, C, scale_pad[i, j], h, False, sc)
                for c in range(C):
                    if sc.ssum[c] > 0.0:
                        src[c] = rgb_pad[i, j, c] / sc.ssum[c]
                    else:
                        # degenerate channel: point kernel
                        src[c] = 0.0
                        if a_lo <= h < a_hi and b_lo <= h < b_hi:
                            out[y0 + h, x0 + h, c] += rgb_pad[i, j, c]
                for a in range(a_lo, a_hi):
                    orow = &out[y0 + a, x0, 0]
                    ia = a * kp * C
                    for b in range(b_lo, b_hi):
                        q0 = ia + sc.p0[b] * C
                        q1 = ia + sc.p1[b] * C
                        b0 = sc.w0[b]
                        b1 = sc.w1[b]
                        for c in range(C):
                            orow[b * C + c] += (b0 * sc.tmp[q0 + c] + b1 * sc.tmp[q1 + c]) * src[c]
    return out_arr


def render_vjp_core(const double[:, :, ::1] rgb_pad, const double[:, ::1] scale_pad,
                    const long[:, ::1] half, ref, const double[:, :, ::1] cot, int pad):
    cdef int hp = rgb_pad.shape[0]
    cdef int wp = rgb_pad.shape[1]
    cdef int C = rgb_pad.shape[2]
    cdef int out_h = cot.shape[0]
    cdef int out_w = cot.shape[1]
    if C > 8:
        raise ValueError("at most 8 channels supported")
    refp_a, ints, flts = _prepare(ref, half)
    cdef const double[:, :, ::1] refp = refp_a
    cdef int k = ref.shape[1]
    cdef int kp = k + 2
    cdef int n = ints.shape[1]
    cdef Scratch sc = _scratch(ints, flts, n, k, C)
    g_rgb_arr = np.zeros((hp, wp, C))
    g_s_arr = np.zeros((hp, wp))
    cdef double[:, :, ::1] g_rgb = g_rgb_arr
    cdef double[:, ::1] g_s = g_s_arr
    cdef int i, j, h, m, a, b, c, y0, x0, a_lo, a_hi, b_lo, b_hi
    cdef long q0, q1, ia
    cdef double b0, b1, db0, db1, t0, t1, ct, gs
    cdef double g[8]
    cdef double d[8]
    cdef const double* crow
    with nogil:
        for i in range(hp):
            for j in range(wp):
                h = half[i, j]
                m = 2 * h + 1
                y0 = i - pad - h
                x0 = j - pad - h
                a_lo = _clip_lo(y0)
                a_hi = _clip_hi(y0, out_h, m)
                b_lo = _clip_lo(x0)
                b_hi = _clip_hi(x0, out_w, m)
                if a_lo >= a_hi or b_lo >= b_hi:
                    continue
                if h == 0:
                    for c in range(C):
                        g_rgb[i, j, c] = cot[y0, x0, c]
                    continue
                _rows(&refp[0, 0, 0], k, C, scale_pad[i, j], h, True, sc)
                # raw sums: g = sum K cot, d = sum dK/ds cot
                for c in range(C):
                    g[c] = 0.0
                    d[c] = 0.0
                for a in range(a_lo, a_hi):
                    crow = &cot[y0 + a, x0, 0]
                    ia = a * kp * C
                    for b in range(b_lo, b_hi):
                        q0 = ia + sc.p0[b] * C
                        q1 = ia + sc.p1[b] * C
                        b0 = sc.w0[b]
                        b1 = sc.w1[b]
                        db0 = sc.dw0[b]
                        db1 = sc.dw1[b]
                        for c in range(C):
                            ct = crow[b * C + c]
                            t0 = sc.tmp[q0 + c]
                            t1 = sc.tmp[q1 + c]
                            g[c] += (b0 * t0 + b1 * t1) * ct
                            d[c] += (db0 * t0 + db1 * t1 + b0 * sc.dtmp[q0 + c] + b1 * sc.dtmp[q1 + c]) * ct
                gs = 0.0
                for c in range(C):
                    if sc.ssum[c] > 0.0:
                        # quotient rule for the normalized kernel
                        g_rgb[i, j, c] = g[c] / sc.ssum[c]
                        gs += (d[c] - g[c] * sc.dsum[c] / sc.ssum[c]) / sc.ssum[c] * rgb_pad[i, j, c]
                    elif a_lo <= h < a_hi and b_lo <= h < b_hi:
                        g_rgb[i, j, c] = cot[y0 + h, x0 + h, c]
                g_s[i, j] = gs
    return g_rgb_arr, g_s_arr
