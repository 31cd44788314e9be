"""Reference kernels written against plain numpy."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, pad):
    """Return sliding k-by-k windows of a zero-padded NCHW batch.

    Output layout is ``(N, Ho, Wo, C, k, k)`` and is always a fresh
    contiguous array.
    """
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols, H, W, pad):
    """Adjoint of :func:`im2col`: scatter-add windows back onto the image."""
    N, Ho, Wo, C, k, _ = cols.shape
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    c = cols.transpose(0, 3, 1, 2, 4, 5)  # N, C, Ho, Wo, k, k
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + Ho, j:j + Wo] += c[:, :, :, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def _norm_grad_loss(R, C, lam, s):
    res = R - C @ s
    rn = np.sqrt((res * res).sum(axis=1))
    sn = np.sqrt((s * s).sum(axis=1))
    g = np.zeros_like(s)
    live = rn > 0
    if live.any():
        u = res[live] / rn[live, None]
        g -= C[live].T @ u
    nz = sn > 0
    g[nz] += lam[nz, None] * s[nz] / sn[nz, None]
    return g


def ball_pgd(R, C, lam, s0, radius, lr, steps, tol):
    """Projected subgradient descent for sums of Euclidean norms.

    Minimises ``sum_g ||R[g] - (C @ s)[g]|| + sum_k lam[k] ||s[k]||`` over
    rows ``s[k]`` each constrained to the ball of ``radius``. Stops once the
    projected step length divided by ``lr`` falls below ``tol``.
    Returns ``(s, n_steps, last_step_over_lr)``.
    """
    s = np.array(s0, dtype=np.float64)
    moved = np.inf
    n = 0
    for n in range(1, steps + 1):
        cand = s - lr * _norm_grad_loss(R, C, lam, s)
        norms = np.sqrt((cand * cand).sum(axis=1))
        over = norms > radius
        cand[over] *= (radius / norms[over])[:, None]
        moved = np.sqrt(((cand - s) ** 2).sum()) / lr
        s = cand
        if moved < tol:
            break
    return s, n, moved
