"""Compiled gather/scatter loops for the codebook hot path.

Every lookup representation is reduced to a flat feature table of shape
(R, C) plus, per query point, M row indices and M interpolation weights.
The loops run sequentially, so results do not depend on thread count.
"""
import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def gather(table, idx, w):
    P, M = idx.shape
    C = table.shape[1]
    out = np.zeros((P, C), dtype=table.dtype)
    for p in range(P):
        for m in range(M):
            wm = w[p, m]
            if wm == 0:
                continue
            r = idx[p, m]
            for c in range(C):
                out[p, c] += wm * table[r, c]
    return out


@numba.njit(cache=True, nogil=True)
def scatter_add(grad_table, idx, w, grad_out):
    P, M = idx.shape
    C = grad_table.shape[1]
    for p in range(P):
        for m in range(M):
            wm = w[p, m]
            if wm == 0:
                continue
            r = idx[p, m]
            for c in range(C):
                grad_table[r, c] += wm * grad_out[p, c]


@numba.njit(cache=True, nogil=True)
def gather_dot(table, idx, grad_out):
    """Per corner, the inner product of its texel with the output gradient."""
    P, M = idx.shape
    C = table.shape[1]
    out = np.zeros((P, M), dtype=table.dtype)
    for p in range(P):
        for m in range(M):
            r = idx[p, m]
            acc = 0.0
            for c in range(C):
                acc += table[r, c] * grad_out[p, c]
            out[p, m] = acc
    return out


@numba.njit(cache=True, inline="always")
def _grid_axis(c, N):
    inside = c >= -1.0 and c <= 1.0
    if c < -1.0:
        c = -1.0
    elif c > 1.0:
        c = 1.0
    s = (c + 1.0) * (0.5 * (N - 1))
    i0 = int(np.floor(s))
    if i0 > N - 2:
        i0 = N - 2
    if i0 < 0:
        i0 = 0
    df = 0.5 * (N - 1) if inside else 0.0
    return i0, s - i0, df


@numba.njit(cache=True, inline="always")
def _anchor_axis(c, anchors):
    K = anchors.shape[0]
    if K == 1:
        return 0, 0, 0.0, 0.0
    inside = c >= -1.0 and c <= 1.0
    if c < -1.0:
        c = -1.0
    elif c > 1.0:
        c = 1.0
    k0 = 0
    while k0 < K - 2 and anchors[k0 + 1] <= c:
        k0 += 1
    lo = anchors[k0]
    hi = anchors[k0 + 1]
    t = (c - lo) / (hi - lo)
    dt = 1.0 / (hi - lo) if inside else 0.0
    if t < 0.0:
        t = 0.0
        dt = 0.0
    elif t > 1.0:
        t = 1.0
        dt = 0.0
    return k0, k0 + 1, t, dt


@numba.njit(cache=True, nogil=True)
def plane_corners(x, anchors, N, derivs):
    """Corners for plane groups: anchors has shape (3, K); K = 1 is a tri-plane.

    Each group contributes 8 corners (two planes x bilinear), or 4 when K = 1.
    """
    P = x.shape[0]
    K = anchors.shape[1]
    nk = 2 if K > 1 else 1
    M = 12 * nk
    idx = np.empty((P, M), dtype=np.int64)
    w = np.empty((P, M))
    dw = np.zeros((P, M, 3) if derivs else (0, M, 3))
    for p in range(P):
        for g in range(3):
            a = (g + 1) % 3
            b = (g + 2) % 3
            k0, k1, t, dt = _anchor_axis(x[p, g], anchors[g])
            i0, fa, dfa = _grid_axis(x[p, a], N)
            j0, fb, dfb = _grid_axis(x[p, b], N)
            base = g * K * N * N
            m = g * 4 * nk
            for kk in range(nk):
                k = k1 if kk else k0
                wk = t if kk else 1.0 - t
                dk = dt if kk else -dt
                for ii in range(2):
                    wi = fa if ii else 1.0 - fa
                    di = dfa if ii else -dfa
                    for jj in range(2):
                        wj = fb if jj else 1.0 - fb
                        dj = dfb if jj else -dfb
                        idx[p, m] = base + (k * N + i0 + ii) * N + j0 + jj
                        w[p, m] = wk * wi * wj
                        if derivs:
                            dw[p, m, g] = dk * wi * wj
                            dw[p, m, a] = wk * di * wj
                            dw[p, m, b] = wk * wi * dj
                        m += 1
    return idx, w, dw


@numba.njit(cache=True, nogil=True)
def voxel_corners(x, N, derivs):
    P = x.shape[0]
    idx = np.empty((P, 8), dtype=np.int64)
    w = np.empty((P, 8))
    dw = np.zeros((P, 8, 3) if derivs else (0, 8, 3))
    for p in range(P):
        i0, fx, dfx = _grid_axis(x[p, 0], N)
        j0, fy, dfy = _grid_axis(x[p, 1], N)
        k0, fz, dfz = _grid_axis(x[p, 2], N)
        m = 0
        for ii in range(2):
            wi = fx if ii else 1.0 - fx
            di = dfx if ii else -dfx
            for jj in range(2):
                wj = fy if jj else 1.0 - fy
                dj = dfy if jj else -dfy
                for kk in range(2):
                    wk = fz if kk else 1.0 - fz
                    dk = dfz if kk else -dfz
                    idx[p, m] = ((i0 + ii) * N + j0 + jj) * N + k0 + kk
                    w[p, m] = wi * wj * wk
                    if derivs:
                        dw[p, m, 0] = di * wj * wk
                        dw[p, m, 1] = wi * dj * wk
                        dw[p, m, 2] = wi * wj * dk
                    m += 1
    return idx, w, dw
