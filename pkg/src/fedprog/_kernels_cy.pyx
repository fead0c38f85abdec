# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ISVD kernels.

Drop-in replacement for ``_kernels_py``. The least-squares projection takes a
Gram/Jacobi-eigen fast path when the observed rows are well conditioned and
falls back to LAPACK ``dgelsd`` (same rcond semantics as ``numpy.linalg.lstsq``)
otherwise. The basis update uses the closed-form SVD of the bordered middle
matrix, see ``_kernels_py.rotation``.
"""

import numpy as np

from libc.math cimport atan2, cos, fabs, sin, sqrt
from scipy.linalg.cython_blas cimport dgemv, dger, dsyrk
from scipy.linalg.cython_lapack cimport dgelsd, dgeqrf, dorgqr

BACKEND = "cython"

# smallest Gram eigenvalue ratio for the normal-equation path (cond(U_obs) <= 100)
cdef double FAST_RATIO = 1e-4


cdef class _Work:
    cdef int N, K, max_m
    cdef double[::1] G, V, evals, b, w, t, uw, r, gath
    cdef double[::1] lsA, lsB, ls_s, ls_work, qr_tau, qr_work, qrA
    cdef int[::1] ls_iwork
    cdef int ls_lwork, qr_lwork

    def __init__(self, int N, int K, int max_m):
        cdef int info = 0, m, n, nrhs = 1, lda, ldb, rank = 0, lwork = -1
        cdef double rcond = -1.0
        cdef double query = 0.0
        cdef int iquery = 0
        self.N = N
        self.K = K
        self.max_m = max_m if max_m > 1 else 1
        self.G = np.zeros(K * K)
        self.V = np.zeros(K * K)
        self.gath = np.zeros(K * max(max_m, 1))
        self.evals = np.zeros(K)
        self.b = np.zeros(K)
        self.w = np.zeros(K)
        self.t = np.zeros(K)
        self.uw = np.zeros(N)
        self.r = np.zeros(self.max_m)
        # dgelsd workspace sized for the tallest observed block
        m = self.max_m if self.max_m > K else K
        n = K
        lda = m
        ldb = m
        self.lsA = np.zeros(lda * K)
        self.lsB = np.zeros(ldb)
        self.ls_s = np.zeros(K)
        dgelsd(&m, &n, &nrhs, &self.lsA[0], &lda, &self.lsB[0], &ldb, &self.ls_s[0],
               &rcond, &rank, &query, &lwork, &iquery, &info)
        self.ls_lwork = <int>(2 * query) + 1024
        self.ls_work = np.zeros(self.ls_lwork)
        self.ls_iwork = np.zeros(2 * iquery + 1024, dtype=np.intc)
        self.qr_lwork = 64 * K + 64
        self.qr_tau = np.zeros(K)
        self.qr_work = np.zeros(self.qr_lwork)
        self.qrA = np.zeros(N * K)


cdef int _jacobi_eig(double *A, double *V, double *ev, int K) noexcept nogil:
    """Cyclic Jacobi on a full symmetric K x K matrix (column-major, overwritten).

    Eigenvectors go to the columns of V, eigenvalues (unsorted) to ev.
    """
    cdef int p, q, k, sweep
    cdef double off, diag, app, aqq, apq, theta, t, c, s, akp, akq, vkp, vkq
    for p in range(K):
        for q in range(K):
            V[p + q * K] = 1.0 if p == q else 0.0
    for sweep in range(60):
        off = 0.0
        diag = 0.0
        for p in range(K):
            diag += A[p + p * K] * A[p + p * K]
            for q in range(p + 1, K):
                off += A[p + q * K] * A[p + q * K]
        if off <= 1e-32 * diag or off == 0.0:
            break
        for p in range(K - 1):
            for q in range(p + 1, K):
                apq = A[p + q * K]
                if apq == 0.0:
                    continue
                app = A[p + p * K]
                aqq = A[q + q * K]
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(K):
                    akp = A[k + p * K]
                    akq = A[k + q * K]
                    A[k + p * K] = c * akp - s * akq
                    A[k + q * K] = s * akp + c * akq
                for k in range(K):
                    akp = A[p + k * K]
                    akq = A[q + k * K]
                    A[p + k * K] = c * akp - s * akq
                    A[q + k * K] = s * akp + c * akq
                for k in range(K):
                    vkp = V[k + p * K]
                    vkq = V[k + q * K]
                    V[k + p * K] = c * vkp - s * vkq
                    V[k + q * K] = s * vkp + c * vkq
    for p in range(K):
        ev[p] = A[p + p * K]
    return 0


cdef int _solve(_Work ws, double[:, ::1] U, const long long[::1] idx,
                const double[::1] vals, Py_ssize_t lo, Py_ssize_t hi, double rcond) except -1:
    cdef int K = ws.K
    cdef Py_ssize_t i, n
    cdef int a, c, info = 0, m, lda, ldb, nrhs = 1, rank = 0
    cdef double acc, lmax, lmin
    cdef double *G = &ws.G[0]
    cdef double *V = &ws.V[0]
    cdef double *b = &ws.b[0]
    cdef double *w = &ws.w[0]
    cdef double *t = &ws.t[0]
    cdef double *ev = &ws.evals[0]
    cdef double *row
    cdef double *X = &ws.gath[0]
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    cdef char lo_c = b'L', no_c = b'N'
    m = <int>(hi - lo)
    # gather observed rows: column-major K x m
    for i in range(lo, hi):
        row = &U[idx[i], 0]
        for a in range(K):
            X[(i - lo) * K + a] = row[a]
    dsyrk(&lo_c, &no_c, &K, &m, &one, X, &K, &zero, G, &K)
    dgemv(&no_c, &K, &m, &one, X, &K, <double *>&vals[lo], &inc, &zero, b, &inc)
    for a in range(K):
        for c in range(a + 1, K):
            G[a + c * K] = G[c + a * K]
    _jacobi_eig(G, V, ev, K)
    lmax = ev[0]
    lmin = ev[0]
    for a in range(1, K):
        if ev[a] > lmax:
            lmax = ev[a]
        if ev[a] < lmin:
            lmin = ev[a]
    if lmax > 0.0 and lmin > FAST_RATIO * lmax:
        for c in range(K):
            acc = 0.0
            for a in range(K):
                acc += V[a + c * K] * b[a]
            t[c] = acc / ev[c]
        for a in range(K):
            acc = 0.0
            for c in range(K):
                acc += V[a + c * K] * t[c]
            w[a] = acc
        return 0
    if lmax <= 0.0:
        for a in range(K):
            w[a] = 0.0
        return 0
    lda = m if m > 1 else 1
    ldb = m if m > K else K
    for a in range(K):
        for i in range(m):
            ws.lsA[i + a * lda] = U[idx[lo + i], a]
    for i in range(ldb):
        ws.lsB[i] = vals[lo + i] if i < m else 0.0
    dgelsd(&m, &K, &nrhs, &ws.lsA[0], &lda, &ws.lsB[0], &ldb, &ws.ls_s[0], &rcond, &rank,
           &ws.ls_work[0], &ws.ls_lwork, &ws.ls_iwork[0], &info)
    if info != 0:
        raise np.linalg.LinAlgError(f"dgelsd failed with info={info}")
    for a in range(K):
        w[a] = ws.lsB[a]
    return 0


cdef int _reorth(_Work ws, double[:, ::1] U) except -1:
    cdef int N = ws.N, K = ws.K, info = 0, n, a
    cdef double *A = &ws.qrA[0]
    cdef double d
    for a in range(K):
        for n in range(N):
            A[n + a * N] = U[n, a]
    dgeqrf(&N, &K, A, &N, &ws.qr_tau[0], &ws.qr_work[0], &ws.qr_lwork, &info)
    if info != 0:
        raise np.linalg.LinAlgError(f"dgeqrf failed with info={info}")
    # store sign(diag R) in t before R is overwritten
    for a in range(K):
        ws.t[a] = -1.0 if A[a + a * N] < 0.0 else 1.0
    dorgqr(&N, &K, &K, A, &N, &ws.qr_tau[0], &ws.qr_work[0], &ws.qr_lwork, &info)
    if info != 0:
        raise np.linalg.LinAlgError(f"dorgqr failed with info={info}")
    for n in range(N):
        for a in range(K):
            U[n, a] = A[n + a * N] * ws.t[a]
    return 0


def solve_weights(double[:, ::1] U, const long long[::1] idx, const double[::1] vals, double rcond):
    ws = _Work(U.shape[0], U.shape[1], idx.shape[0])
    _solve(ws, U, idx, vals, 0, idx.shape[0], rcond)
    return np.asarray(ws.w).copy()


def batch_weights(double[:, ::1] U, const long long[::1] indptr, const long long[::1] indices,
                  const double[::1] values, double rcond):
    cdef Py_ssize_t s, nsig = indptr.shape[0] - 1, max_m = 1
    cdef int a, K = U.shape[1]
    for s in range(nsig):
        if indptr[s + 1] - indptr[s] > max_m:
            max_m = indptr[s + 1] - indptr[s]
    out = np.empty((nsig, K))
    cdef double[:, ::1] W = out
    cdef _Work ws = _Work(U.shape[0], K, max_m)
    for s in range(nsig):
        _solve(ws, U, indices, values, indptr[s], indptr[s + 1], rcond)
        for a in range(K):
            W[s, a] = ws.w[a]
    return out


def reorthonormalize(double[:, ::1] U):
    cdef _Work ws = _Work(U.shape[0], U.shape[1], 1)
    _reorth(ws, U)


def sweep(double[:, ::1] U, const long long[::1] indptr, const long long[::1] indices,
          const double[::1] values, long long updates, int reorth_every, double skip_rtol,
          double rcond):
    cdef int N = U.shape[0], K = U.shape[1]
    cdef Py_ssize_t s, i, n, lo, hi, nsig = indptr.shape[0] - 1, max_m = 1
    cdef int a
    cdef double acc, x, rr, xs2, r2, obs_uw2, tot_uw2, rn, xt2, wn, phi, c, d
    for s in range(nsig):
        if indptr[s + 1] - indptr[s] > max_m:
            max_m = indptr[s + 1] - indptr[s]
    res_a = np.empty(nsig)
    sig_a = np.empty(nsig)
    W_a = np.empty((nsig, K))
    skip_a = np.zeros(nsig, dtype=np.uint8)
    cdef double[::1] res = res_a
    cdef double[::1] sig = sig_a
    cdef double[:, ::1] W = W_a
    cdef unsigned char[::1] skipped = skip_a
    cdef _Work ws = _Work(N, K, max_m)
    cdef double *w = &ws.w[0]
    cdef double *wdir = &ws.b[0]
    cdef double *uw = &ws.uw[0]
    cdef double *r = &ws.r[0]
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    cdef char tr_c = b'T'
    for s in range(nsig):
        lo = indptr[s]
        hi = indptr[s + 1]
        _solve(ws, U, indices, values, lo, hi, rcond)
        dgemv(&tr_c, &K, &N, &one, &U[0, 0], &K, w, &inc, &zero, uw, &inc)
        tot_uw2 = 0.0
        for n in range(N):
            tot_uw2 += uw[n] * uw[n]
        xs2 = 0.0
        r2 = 0.0
        obs_uw2 = 0.0
        for i in range(lo, hi):
            n = indices[i]
            x = values[i]
            xs2 += x * x
            rr = x - uw[n]
            r[i - lo] = rr
            r2 += rr * rr
            obs_uw2 += uw[n] * uw[n]
        if xs2 == 0.0:
            raise ValueError(f"signal {s} has an all-zero observed part")
        rn = sqrt(r2)
        xt2 = xs2 + (tot_uw2 - obs_uw2 if tot_uw2 > obs_uw2 else 0.0)
        res[s] = rn
        sig[s] = sqrt(xs2)
        for a in range(K):
            W[s, a] = w[a]
        if rn > 0.0 and rn > skip_rtol * sqrt(xt2):
            # closed-form SVD of [[I, w], [0, rn]]: rotate inside span(U w_dir, r/rn)
            acc = 0.0
            for a in range(K):
                acc += w[a] * w[a]
            wn = sqrt(acc)
            phi = 0.5 * atan2(2.0 * rn * wn, 1.0 + wn * wn - rn * rn)
            c = cos(phi)
            d = sin(phi)
            if wn > 0.0:
                for a in range(K):
                    wdir[a] = w[a] / wn
                for n in range(N):
                    uw[n] = (c - 1.0) * (uw[n] / wn)
            else:
                for a in range(K):
                    wdir[a] = 0.0
                wdir[K - 1] = 1.0
                for n in range(N):
                    uw[n] = (c - 1.0) * U[n, K - 1]
            for i in range(lo, hi):
                uw[indices[i]] += d * (r[i - lo] / rn)
            dger(&K, &N, &one, wdir, &inc, uw, &inc, &U[0, 0], &K)
            updates += 1
            if reorth_every > 0 and updates % reorth_every == 0:
                _reorth(ws, U)
        else:
            skipped[s] = 1
    return updates, res_a, sig_a, W_a, skip_a
