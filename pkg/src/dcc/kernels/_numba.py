"""numba-compiled twins of the kernels in :mod:`dcc.kernels._numpy`."""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _im2col(x, k, pad):
    N, C, H, W = x.shape
    Ho = H + 2 * pad - k + 1
    Wo = W + 2 * pad - k + 1
    out = np.zeros((N, Ho, Wo, C, k, k), dtype=x.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(k):
                h0, h1 = max(0, pad - i), min(Ho, H + pad - i)
                for j in range(k):
                    w0, w1 = max(0, pad - j), min(Wo, W + pad - j)
                    for h in range(h0, h1):
                        for w in range(w0, w1):
                            out[n, h, w, c, i, j] = x[n, c, h + i - pad, w + j - pad]
    return out


@njit(cache=True, nogil=True)
def _col2im(cols, H, W, pad):
    N, Ho, Wo, C, k, _ = cols.shape
    out = np.zeros((N, C, H, W), dtype=cols.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(k):
                h0, h1 = max(0, pad - i), min(Ho, H + pad - i)
                for j in range(k):
                    w0, w1 = max(0, pad - j), min(Wo, W + pad - j)
                    for h in range(h0, h1):
                        for w in range(w0, w1):
                            out[n, c, h + i - pad, w + j - pad] += cols[n, h, w, c, i, j]
    return out


def im2col(x, k, pad):
    return _im2col(np.ascontiguousarray(x), k, pad)


def col2im(cols, H, W, pad):
    return _col2im(np.ascontiguousarray(cols), H, W, pad)


@njit(cache=True, nogil=True)
def _ball_pgd(R, C, lam, s0, radius, lr, steps, tol):
    G, D = R.shape
    K = s0.shape[0]
    s = s0.copy()
    g = np.zeros_like(s)
    res = np.zeros(D)
    moved = np.inf
    n = 0
    for n in range(1, steps + 1):
        g[:, :] = 0.0
        for gi in range(G):
            for d in range(D):
                acc = R[gi, d]
                for kk in range(K):
                    acc -= C[gi, kk] * s[kk, d]
                res[d] = acc
            rn = math.sqrt((res * res).sum())
            if rn > 0.0:
                for kk in range(K):
                    for d in range(D):
                        g[kk, d] -= C[gi, kk] * res[d] / rn
        for kk in range(K):
            sn = math.sqrt((s[kk] * s[kk]).sum())
            if sn > 0.0:
                for d in range(D):
                    g[kk, d] += lam[kk] * s[kk, d] / sn
        step2 = 0.0
        for kk in range(K):
            cn = 0.0
            for d in range(D):
                cn += (s[kk, d] - lr * g[kk, d]) ** 2
            cn = math.sqrt(cn)
            scale = radius / cn if cn > radius else 1.0
            for d in range(D):
                v = (s[kk, d] - lr * g[kk, d]) * scale
                step2 += (v - s[kk, d]) ** 2
                s[kk, d] = v
        moved = math.sqrt(step2) / lr
        if moved < tol:
            break
    return s, n, moved


def ball_pgd(R, C, lam, s0, radius, lr, steps, tol):
    return _ball_pgd(
        np.ascontiguousarray(R, dtype=np.float64),
        np.ascontiguousarray(C, dtype=np.float64),
        np.ascontiguousarray(lam, dtype=np.float64),
        np.ascontiguousarray(s0, dtype=np.float64),
        float(radius), float(lr), int(steps), float(tol),
    )
