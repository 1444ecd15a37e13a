"""Independent reference implementations used by several test modules."""

import numpy as np


def haar_analysis_matrix(n, levels):
    """Orthonormal multi-level periodized Haar analysis on length-n vectors."""
    W = np.eye(n)
    m = n
    for _ in range(levels):
        T = np.eye(n)
        T[:m, :m] = 0
        for k in range(m // 2):
            T[k, 2 * k:2 * k + 2] = 1 / np.sqrt(2)
            T[m // 2 + k, 2 * k] = 1 / np.sqrt(2)
            T[m // 2 + k, 2 * k + 1] = -1 / np.sqrt(2)
        W = T @ W
        m //= 2
    return W


def haar_dwt2(x, levels):
    """Separable multi-level Haar transform in the Mallat layout, square planes."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    out = x.copy()
    m, n = H, W
    for _ in range(levels):
        Th = haar_analysis_matrix(m, 1)
        Tw = haar_analysis_matrix(n, 1)
        out[..., :m, :n] = Th @ out[..., :m, :n] @ Tw.T
        m, n = m // 2, n // 2
    return out


def haar_idwt2(c, levels):
    c = np.asarray(c, dtype=np.float64)
    H, W = c.shape[-2:]
    out = c.copy()
    for lev in reversed(range(levels)):
        m, n = H >> lev, W >> lev
        Th = haar_analysis_matrix(m, 1)
        Tw = haar_analysis_matrix(n, 1)
        out[..., :m, :n] = Th.T @ out[..., :m, :n] @ Tw
    return out


def group_shrink_prox_haar(X, t, levels):
    """Analytic group soft threshold of Haar coefficients, mapped back."""
    C = haar_dwt2(X, levels)
    norm = np.sqrt((C**2).sum(axis=0))
    scale = np.maximum(0.0, 1.0 - t / np.maximum(norm, 1e-300))
    return haar_idwt2(C * scale, levels)


def jtv_prox_cvxpy(B, t):
    """Prox of t * JTV by a conic solver; forward differences, zero at the far edge."""
    import cvxpy as cp

    B = np.asarray(B, dtype=np.float64)
    L, H, W = B.shape
    X = [cp.Variable((H, W)) for _ in range(L)]
    rows = []
    for x in X:
        d1 = cp.hstack([x[:, 1:] - x[:, :-1], np.zeros((H, 1))])
        d2 = cp.vstack([x[1:, :] - x[:-1, :], np.zeros((1, W))])
        rows += [cp.vec(d1, order="C"), cp.vec(d2, order="C")]
    G = cp.vstack(rows)
    obj = 0.5 * sum(cp.sum_squares(x - b) for x, b in zip(X, B)) + t * cp.sum(cp.norm(G, 2, axis=0))
    cp.Problem(cp.Minimize(obj)).solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10,
                                       tol_feas=1e-10)
    return np.stack([x.value for x in X])


def ssim_brute_force(x, y, peak=1.0, win=11, sigma=1.5):
    """Mean SSIM from an explicit loop over every fully contained window."""
    r = np.arange(win) - (win - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            a = x[i:i + win, j:j + win]
            b = y[i:i + win, j:j + win]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * (a - ma) ** 2)
            vb = np.sum(w * (b - mb) ** 2)
            cov = np.sum(w * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
