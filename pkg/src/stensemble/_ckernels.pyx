# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every function here has a numpy twin in ``_pykernels`` with the same
signature and the same floating-point operation order, so the two backends
agree to the last bit on the linkage and Jacobi paths.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, exp, tanh, INFINITY

cnp.import_array()


def jacobi_eigh(double[:, ::1] a_in, double tol=1e-15, int max_sweeps=100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns ``(w, V, sweeps)`` with eigenvalues unsorted and eigenvectors in
    the columns of ``V``.
    """
    cdef Py_ssize_t n = a_in.shape[0]
    A_np = np.array(a_in, dtype=np.float64, copy=True)
    V_np = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] A = A_np
    cdef double[:, ::1] V = V_np
    cdef Py_ssize_t p, q, k
    cdef double fro2 = 0.0, off, apq, app, aqq, theta, t, c, s, akp, akq
    cdef int sweep = 0

    for p in range(n):
        for q in range(n):
            fro2 += A[p, q] * A[p, q]

    while sweep < max_sweeps:
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        if off <= tol * tol * fro2 or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                app = A[p, p]
                aqq = A[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    akp = A[p, k]
                    akq = A[q, k]
                    A[p, k] = c * akp - s * akq
                    A[q, k] = s * akp + c * akq
                A[p, q] = 0.0
                A[q, p] = 0.0
                for k in range(n):
                    akp = V[k, p]
                    akq = V[k, q]
                    V[k, p] = c * akp - s * akq
                    V[k, q] = s * akp + c * akq
        sweep += 1

    return np.diagonal(A_np).copy(), V_np, sweep


def linkage_cut(double[:, ::1] dist, Py_ssize_t k, int ward):
    """Naive agglomerative merge loop stopped at ``k`` clusters.

    ``dist`` holds Euclidean distances for average linkage, squared Euclidean
    distances for Ward.  Ties go to the lexicographically smallest ``(i, j)``.
    Returns the representative (smallest original index) of each point's
    cluster.
    """
    cdef Py_ssize_t n = dist.shape[0]
    D_np = np.array(dist, dtype=np.float64, copy=True)
    lab_np = np.arange(n, dtype=np.int64)
    size_np = np.ones(n, dtype=np.float64)
    act_np = np.ones(n, dtype=np.uint8)
    cdef double[:, ::1] D = D_np
    cdef long long[::1] lab = lab_np
    cdef double[::1] size = size_np
    cdef unsigned char[::1] act = act_np
    cdef Py_ssize_t n_clusters = n, i, j, bi, bj, m
    cdef double best, d, ni, nj, nm, val

    while n_clusters > k:
        best = INFINITY
        bi = -1
        bj = -1
        for i in range(n - 1):
            if not act[i]:
                continue
            for j in range(i + 1, n):
                if not act[j]:
                    continue
                d = D[i, j]
                if d < best:
                    best = d
                    bi = i
                    bj = j
        if bi < 0:
            break
        ni = size[bi]
        nj = size[bj]
        for m in range(n):
            if not act[m] or m == bi or m == bj:
                continue
            if ward:
                nm = size[m]
                val = ((ni + nm) * D[bi, m] + (nj + nm) * D[bj, m] - nm * D[bi, bj]) / (ni + nj + nm)
            else:
                val = (ni * D[bi, m] + nj * D[bj, m]) / (ni + nj)
            D[bi, m] = val
            D[m, bi] = val
        size[bi] = ni + nj
        act[bj] = 0
        for m in range(n):
            if lab[m] == bj:
                lab[m] = bi
        n_clusters -= 1
    return lab_np


cdef inline double _leaky(double x, double slope) nogil:
    return x if x > 0.0 else slope * x


def gat_forward(double[:, ::1] L, double[:, ::1] R, double[::1] a,
                long long[::1] indptr, long long[::1] indices, double slope):
    """GATv2 attention over a CSR neighbour list.

    ``L = H W_l^T`` and ``R = H W_r^T`` are precomputed.  Returns the
    aggregated rows and the per-edge attention weights.
    """
    cdef Py_ssize_t n = L.shape[0], d = L.shape[1], E = indices.shape[0]
    out_np = np.zeros((n, d), dtype=np.float64)
    alpha_np = np.zeros(E, dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef double[::1] alpha = alpha_np
    cdef Py_ssize_t i, e, j, c
    cdef double score, mx, tot, w
    for i in range(n):
        mx = -INFINITY
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            score = 0.0
            for c in range(d):
                score += a[c] * _leaky(L[i, c] + R[j, c], slope)
            alpha[e] = score
            if score > mx:
                mx = score
        tot = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            alpha[e] = exp(alpha[e] - mx)
            tot += alpha[e]
        for e in range(indptr[i], indptr[i + 1]):
            w = alpha[e] / tot
            alpha[e] = w
            j = indices[e]
            for c in range(d):
                out[i, c] += w * R[j, c]
    return out_np, alpha_np


def gat_backward(double[:, ::1] L, double[:, ::1] R, double[::1] a,
                 long long[::1] indptr, long long[::1] indices, double slope,
                 double[::1] alpha, double[:, ::1] G):
    """Reverse pass of :func:`gat_forward` given ``G = dLoss/dout``."""
    cdef Py_ssize_t n = L.shape[0], d = L.shape[1]
    dL_np = np.zeros((n, d), dtype=np.float64)
    dR_np = np.zeros((n, d), dtype=np.float64)
    da_np = np.zeros(d, dtype=np.float64)
    dalpha_np = np.zeros(indices.shape[0], dtype=np.float64)
    cdef double[:, ::1] dL = dL_np
    cdef double[:, ::1] dR = dR_np
    cdef double[::1] da = da_np
    cdef double[::1] dalpha = dalpha_np
    cdef Py_ssize_t i, e, j, c
    cdef double acc, de, u, s, g
    for i in range(n):
        acc = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            g = 0.0
            for c in range(d):
                g += G[i, c] * R[j, c]
                dR[j, c] += alpha[e] * G[i, c]
            dalpha[e] = g
            acc += alpha[e] * g
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            de = alpha[e] * (dalpha[e] - acc)
            for c in range(d):
                u = L[i, c] + R[j, c]
                if u > 0.0:
                    s = u
                    g = de * a[c]
                else:
                    s = slope * u
                    g = de * a[c] * slope
                da[c] += de * s
                dL[i, c] += g
                dR[j, c] += g
    return dL_np, dR_np, da_np


cdef inline double _sigmoid(double x) nogil:
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    cdef double z = exp(x)
    return z / (1.0 + z)


def lstm_forward(double[:, ::1] XW, double[:, ::1] U):
    """Recurrence of a single LSTM layer with zero initial state.

    ``XW`` is the input projection plus bias, shape ``(T, 4h)`` with gate
    blocks ordered input, forget, cell, output.  Returns hidden states,
    cell states and activated gates.
    """
    cdef Py_ssize_t T = XW.shape[0], h4 = XW.shape[1], h = h4 // 4
    H_np = np.zeros((T, h), dtype=np.float64)
    C_np = np.zeros((T, h), dtype=np.float64)
    A_np = np.zeros((T, h4), dtype=np.float64)
    z_np = np.zeros(h4, dtype=np.float64)
    cdef double[:, ::1] H = H_np
    cdef double[:, ::1] C = C_np
    cdef double[:, ::1] A = A_np
    cdef double[::1] z = z_np
    cdef Py_ssize_t t, r, c
    cdef double acc, cprev, ig, fg, gg, og
    for t in range(T):
        for r in range(h4):
            acc = XW[t, r]
            if t > 0:
                for c in range(h):
                    acc += U[r, c] * H[t - 1, c]
            z[r] = acc
        for c in range(h):
            ig = _sigmoid(z[c])
            fg = _sigmoid(z[h + c])
            gg = tanh(z[2 * h + c])
            og = _sigmoid(z[3 * h + c])
            cprev = C[t - 1, c] if t > 0 else 0.0
            C[t, c] = fg * cprev + ig * gg
            H[t, c] = og * tanh(C[t, c])
            A[t, c] = ig
            A[t, h + c] = fg
            A[t, 2 * h + c] = gg
            A[t, 3 * h + c] = og
    return H_np, C_np, A_np


def lstm_backward(double[:, ::1] U, double[:, ::1] H, double[:, ::1] C,
                  double[:, ::1] A, double[:, ::1] dH):
    """Back-propagation through time for :func:`lstm_forward`.

    Returns gradients with respect to the pre-activations ``XW`` and the
    recurrent matrix ``U``.
    """
    cdef Py_ssize_t T = H.shape[0], h = H.shape[1], h4 = 4 * h
    dZ_np = np.zeros((T, h4), dtype=np.float64)
    dU_np = np.zeros((h4, h), dtype=np.float64)
    dh_next_np = np.zeros(h, dtype=np.float64)
    dc_next_np = np.zeros(h, dtype=np.float64)
    cdef double[:, ::1] dZ = dZ_np
    cdef double[:, ::1] dU = dU_np
    cdef double[::1] dh_next = dh_next_np
    cdef double[::1] dc_next = dc_next_np
    cdef Py_ssize_t t, c, r
    cdef double dh, tc, dc, ig, fg, gg, og, cprev, acc
    for t in range(T - 1, -1, -1):
        for c in range(h):
            dh = dH[t, c] + dh_next[c]
            tc = tanh(C[t, c])
            ig = A[t, c]
            fg = A[t, h + c]
            gg = A[t, 2 * h + c]
            og = A[t, 3 * h + c]
            cprev = C[t - 1, c] if t > 0 else 0.0
            dc = dh * og * (1.0 - tc * tc) + dc_next[c]
            dZ[t, c] = dc * gg * ig * (1.0 - ig)
            dZ[t, h + c] = dc * cprev * fg * (1.0 - fg)
            dZ[t, 2 * h + c] = dc * ig * (1.0 - gg * gg)
            dZ[t, 3 * h + c] = dh * tc * og * (1.0 - og)
            dc_next[c] = dc * fg
        if t > 0:
            for r in range(h4):
                for c in range(h):
                    dU[r, c] += dZ[t, r] * H[t - 1, c]
        for c in range(h):
            acc = 0.0
            for r in range(h4):
                acc += U[r, c] * dZ[t, r]
            dh_next[c] = acc
    return dZ_np, dU_np
