"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Used when the extension is not built, or when ``STENSEMBLE_PURE_PYTHON=1``.
"""

import numpy as np


def jacobi_eigh(a_in, tol=1e-15, max_sweeps=100):
    A = np.array(a_in, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    fro2 = float(np.sum(A * A))
    iu = np.triu_indices(n, 1)
    sweep = 0
    while sweep < max_sweeps:
        off = float(np.sum(A[iu] ** 2))
        if off <= tol * tol * fro2 or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                colp = A[:, p].copy()
                colq = A[:, q].copy()
                A[:, p] = c * colp - s * colq
                A[:, q] = s * colp + c * colq
                rowp = A[p, :].copy()
                rowq = A[q, :].copy()
                A[p, :] = c * rowp - s * rowq
                A[q, :] = s * rowp + c * rowq
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        sweep += 1
    return np.diagonal(A).copy(), V, sweep


def linkage_cut(dist, k, ward):
    D = np.array(dist, dtype=np.float64, copy=True)
    n = D.shape[0]
    lab = np.arange(n, dtype=np.int64)
    size = np.ones(n)
    act = np.ones(n, dtype=bool)
    lower = np.tril(np.ones((n, n), dtype=bool))
    n_clusters = n
    while n_clusters > k:
        masked = np.where(lower | ~act[:, None] | ~act[None, :], np.inf, D)
        flat = int(np.argmin(masked))
        bi, bj = divmod(flat, n)
        if masked[bi, bj] == np.inf:
            break
        ni, nj = size[bi], size[bj]
        others = act.copy()
        others[[bi, bj]] = False
        m = np.flatnonzero(others)
        if ward:
            nm = size[m]
            val = ((ni + nm) * D[bi, m] + (nj + nm) * D[bj, m] - nm * D[bi, bj]) / (ni + nj + nm)
        else:
            val = (ni * D[bi, m] + nj * D[bj, m]) / (ni + nj)
        D[bi, m] = val
        D[m, bi] = val
        size[bi] = ni + nj
        act[bj] = False
        lab[lab == bj] = bi
        n_clusters -= 1
    return lab


def _edge_rows(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def gat_forward(L, R, a, indptr, indices, slope):
    rows = _edge_rows(indptr)
    U = L[rows] + R[indices]
    S = np.where(U > 0, U, slope * U)
    score = S @ a
    n = L.shape[0]
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, rows, score)
    ex = np.exp(score - mx[rows])
    tot = np.zeros(n)
    np.add.at(tot, rows, ex)
    alpha = ex / tot[rows]
    out = np.zeros_like(L)
    np.add.at(out, rows, alpha[:, None] * R[indices])
    return out, alpha


def gat_backward(L, R, a, indptr, indices, slope, alpha, G):
    rows = _edge_rows(indptr)
    n, d = L.shape
    dR = np.zeros((n, d))
    np.add.at(dR, indices, alpha[:, None] * G[rows])
    dalpha = np.einsum("ec,ec->e", G[rows], R[indices])
    acc = np.zeros(n)
    np.add.at(acc, rows, alpha * dalpha)
    de = alpha * (dalpha - acc[rows])
    U = L[rows] + R[indices]
    pos = U > 0
    S = np.where(pos, U, slope * U)
    da = de @ S
    dU = de[:, None] * a[None, :] * np.where(pos, 1.0, slope)
    dL = np.zeros((n, d))
    np.add.at(dL, rows, dU)
    np.add.at(dR, indices, dU)
    return dL, dR, da


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def lstm_forward(XW, U):
    T, h4 = XW.shape
    h = h4 // 4
    H = np.zeros((T, h))
    C = np.zeros((T, h))
    A = np.zeros((T, h4))
    for t in range(T):
        z = XW[t] + (U @ H[t - 1] if t > 0 else 0.0)
        ig = _sigmoid(z[:h])
        fg = _sigmoid(z[h:2 * h])
        gg = np.tanh(z[2 * h:3 * h])
        og = _sigmoid(z[3 * h:])
        cprev = C[t - 1] if t > 0 else 0.0
        C[t] = fg * cprev + ig * gg
        H[t] = og * np.tanh(C[t])
        A[t] = np.concatenate([ig, fg, gg, og])
    return H, C, A


def lstm_backward(U, H, C, A, dH):
    T, h = H.shape
    dZ = np.zeros((T, 4 * h))
    dU = np.zeros((4 * h, h))
    dh_next = np.zeros(h)
    dc_next = np.zeros(h)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + dh_next
        tc = np.tanh(C[t])
        ig, fg, gg, og = A[t, :h], A[t, h:2 * h], A[t, 2 * h:3 * h], A[t, 3 * h:]
        cprev = C[t - 1] if t > 0 else 0.0
        dc = dh * og * (1.0 - tc * tc) + dc_next
        dZ[t, :h] = dc * gg * ig * (1.0 - ig)
        dZ[t, h:2 * h] = dc * cprev * fg * (1.0 - fg)
        dZ[t, 2 * h:3 * h] = dc * ig * (1.0 - gg * gg)
        dZ[t, 3 * h:] = dh * tc * og * (1.0 - og)
        dc_next = dc * fg
        if t > 0:
            dU += np.outer(dZ[t], H[t - 1])
        dh_next = U.T @ dZ[t]
    return dZ, dU
