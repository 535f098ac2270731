"""Pure-numpy spatially varying scatter kernels (fallback for ``_render_ext``).

Both backends share one contract.  Inputs are already padded: ``rgb_pad`` is
(Hp, Wp, C), ``scale_pad`` is (Hp, Wp) holding the signed per-pixel scale, and
``half`` is (Hp, Wp) int holding each pixel's kernel half-width.  Source pixel
``(i, j)`` of the padded grid lands on output pixel ``(i - pad + a, j - pad + b)``
with weight ``K_ij[c, a + h, b + h]``.
"""

import numpy as np


def _axis_taps(u, scale, k):
    """Bilinear taps for one axis: (i0, i1, w0, w1, dw0, dw1) for offsets u."""
    center = (k - 1) / 2.0
    src = center + u / scale
    i0 = np.floor(src)
    fr = src - i0
    i0 = i0.astype(np.int64)
    i1 = i0 + 1
    w0 = 1.0 - fr
    w1 = fr.copy()
    moving = fr > 0
    dsrc = -u / (scale * scale)
    dw0 = np.where(moving, -dsrc, 0.0)
    dw1 = np.where(moving, dsrc, 0.0)
    for w, dw, idx in ((w0, dw0, i0), (w1, dw1, i1)):
        out = (idx < 0) | (idx >= k)
        w[out] = 0.0
        dw[out] = 0.0
    np.clip(i0, 0, k - 1, out=i0)
    np.clip(i1, 0, k - 1, out=i1)
    return i0, i1, w0, w1, dw0, dw1


def _row_pass(ref, taps):
    i0, i1, w0, w1, dw0, dw1 = taps
    # ref (C, k, k) -> (N, C, k)
    r0 = ref[:, i0, :].transpose(1, 0, 2)
    r1 = ref[:, i1, :].transpose(1, 0, 2)
    tmp = w0[:, None, None] * r0 + w1[:, None, None] * r1
    dtmp = dw0[:, None, None] * r0 + dw1[:, None, None] * r1
    return tmp, dtmp


def _col_pass(tmp, dtmp, taps):
    i0, i1, w0, w1, dw0, dw1 = taps
    n = np.arange(tmp.shape[0])
    t0 = tmp[n, :, i0]
    t1 = tmp[n, :, i1]
    val = w0[:, None] * t0 + w1[:, None] * t1
    dval = (w0[:, None] * dtmp[n, :, i0] + w1[:, None] * dtmp[n, :, i1]
            + dw0[:, None] * t0 + dw1[:, None] * t1)
    return val, dval


def _offsets(half):
    hmax = int(half.max())
    for a in range(-hmax, hmax + 1):
        for b in range(-hmax, hmax + 1):
            yield a, b


def _kernel_sums(ref, s, half, need_grad):
    """Per-pixel channel sums of the unnormalized kernels (and d/dscale)."""
    n, c = s.shape[0], ref.shape[0]
    k = ref.shape[1]
    sums = np.zeros((n, c))
    dsums = np.zeros((n, c))
    hmax = int(half.max())
    for a in range(-hmax, hmax + 1):
        rows = np.abs(a) <= half
        if not rows.any():
            continue
        idx = np.flatnonzero(rows)
        ty = _axis_taps(np.full(idx.size, float(a)), s[idx], k)
        tmp, dtmp = _row_pass(ref, ty)
        for b in range(-hmax, hmax + 1):
            sel = np.abs(b) <= half[idx]
            if not sel.any():
                continue
            sub = idx[sel]
            tx = _axis_taps(np.full(sub.size, float(b)), s[sub], k)
            val, dval = _col_pass(tmp[sel], dtmp[sel], tx)
            sums[sub] += val
            if need_grad:
                dsums[sub] += dval
    return sums, dsums


def _iterate_kernels(ref, s, half, need_grad):
    """Yield (a, b, pixel indices, K values (n, C), dK values or None)."""
    k = ref.shape[1]
    sums, dsums = _kernel_sums(ref, s, half, need_grad)
    degenerate = (sums <= 0) | (half[:, None] == 0)
    safe = np.where(degenerate, 1.0, sums)
    hmax = int(half.max())
    for a in range(-hmax, hmax + 1):
        idx = np.flatnonzero(np.abs(a) <= half)
        if idx.size == 0:
            continue
        ty = _axis_taps(np.full(idx.size, float(a)), s[idx], k)
        tmp, dtmp = _row_pass(ref, ty)
        for b in range(-hmax, hmax + 1):
            sel = np.abs(b) <= half[idx]
            if not sel.any():
                continue
            sub = idx[sel]
            tx = _axis_taps(np.full(sub.size, float(b)), s[sub], k)
            val, dval = _col_pass(tmp[sel], dtmp[sel], tx)
            kval = val / safe[sub]
            dk = None
            if need_grad:
                dk = (dval - kval * dsums[sub]) / safe[sub]
            deg = degenerate[sub]
            if deg.any():
                point = 1.0 if (a == 0 and b == 0) else 0.0
                kval = np.where(deg, point, kval)
                if need_grad:
                    dk = np.where(deg, 0.0, dk)
            yield a, b, sub, kval, dk


def render_core(rgb_pad, scale_pad, half, ref, out_h, out_w, pad):
    hp, wp, c = rgb_pad.shape
    out = np.zeros((out_h + 2 * pad, out_w + 2 * pad, c))
    s = scale_pad.reshape(-1)
    hf = half.reshape(-1)
    src = rgb_pad.reshape(-1, c)
    ii, jj = np.divmod(np.arange(hp * wp), wp)
    for a, b, sub, kval, _ in _iterate_kernels(ref, s, hf, False):
        di = ii[sub] + a
        dj = jj[sub] + b
        inb = (di >= 0) & (di < out.shape[0]) & (dj >= 0) & (dj < out.shape[1])
        # (a, b) is fixed, so destinations within one offset are distinct
        out[di[inb], dj[inb]] += kval[inb] * src[sub[inb]]
    return out[pad:pad + out_h, pad:pad + out_w]


def render_vjp_core(rgb_pad, scale_pad, half, ref, cot, pad):
    hp, wp, c = rgb_pad.shape
    out_h, out_w = cot.shape[:2]
    cot_pad = np.zeros((out_h + 2 * pad, out_w + 2 * pad, c))
    cot_pad[pad:pad + out_h, pad:pad + out_w] = cot
    s = scale_pad.reshape(-1)
    hf = half.reshape(-1)
    src = rgb_pad.reshape(-1, c)
    ii, jj = np.divmod(np.arange(hp * wp), wp)
    g_rgb = np.zeros((hp * wp, c))
    g_s = np.zeros(hp * wp)
    for a, b, sub, kval, dk in _iterate_kernels(ref, s, hf, True):
        di = ii[sub] + a
        dj = jj[sub] + b
        inb = (di >= 0) & (di < cot_pad.shape[0]) & (dj >= 0) & (dj < cot_pad.shape[1])
        ct = np.zeros((sub.size, c))
        ct[inb] = cot_pad[di[inb], dj[inb]]
        g_rgb[sub] += kval * ct
        g_s[sub] += np.sum(dk * ct * src[sub], axis=1)
    return g_rgb.reshape(hp, wp, c), g_s.reshape(hp, wp)
