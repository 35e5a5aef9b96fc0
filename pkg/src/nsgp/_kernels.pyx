# cython: language_level=3
"""Compiled inner loops.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``nsgp._backend`` picks one at import time.

Field arrays follow one convention throughout:

X     (n, d)    coordinates
sig   (n,)      process standard deviation
S     (n, d, d) anisotropy matrices (ignored when ``iso_mode``)
iso   (n,)      scalar anisotropy (used only when ``iso_mode``)
root4 (n,)      |S_i|**(1/4), or iso_i**(d/4) in isotropic mode
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, log, pow, lgamma, isfinite
from scipy.special.cython_special cimport k0, k1, kv

cnp.import_array()

DEF MAXD = 16


cdef inline int _matern_code(double nu) noexcept nogil:
    if nu == 0.5:
        return 0
    if nu == 1.5:
        return 1
    if nu == 2.5:
        return 2
    if nu == <int>nu and 1.0 <= nu <= 30.0:
        return 4
    return 3


cdef inline double _kv_int(int n, double t) noexcept nogil:
    # upward recurrence K_{m+1} = K_{m-1} + (2m / t) K_m is stable for K
    cdef double km = k0(t), kc = k1(t), kn
    cdef int m
    if n == 0:
        return km
    for m in range(1, n):
        kn = km + (2.0 * m / t) * kc
        km = kc
        kc = kn
    return kc


cdef inline double _matern(double t, double nu, int code, double lnorm) noexcept nogil:
    cdef double val
    if t <= 0.0:
        return 1.0
    if code == 0:
        return exp(-t)
    if code == 1:
        return (1.0 + t) * exp(-t)
    if code == 2:
        return (1.0 + t + t * t / 3.0) * exp(-t)
    if code == 4:
        val = _kv_int(<int>nu, t)
    else:
        val = kv(nu, t)
    if val == 0.0:
        return 0.0
    if not isfinite(val):
        return 1.0
    return exp(lnorm + nu * log(t) + log(val))


def matern(double[::1] t, double nu):
    cdef Py_ssize_t i, n = t.shape[0]
    cdef int code = _matern_code(nu)
    cdef double lnorm = (1.0 - nu) * log(2.0) - lgamma(nu)
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _matern(t[i], nu, code, lnorm)
    return out


cdef inline double _chol_quad(double* A, double* h, int d, double* det) noexcept nogil:
    # in-place Cholesky of a small SPD matrix; returns h^T A^{-1} h
    cdef int i, j, k
    cdef double s
    cdef double q = 0.0
    cdef double v[MAXD]
    det[0] = 1.0
    for j in range(d):
        s = A[j * d + j]
        for k in range(j):
            s -= A[j * d + k] * A[j * d + k]
        if s <= 0.0:
            det[0] = 0.0
            return 0.0
        s = sqrt(s)
        A[j * d + j] = s
        det[0] *= s * s
        for i in range(j + 1, d):
            A[i * d + j] = A[i * d + j]
            for k in range(j):
                A[i * d + j] -= A[i * d + k] * A[j * d + k]
            A[i * d + j] /= s
    for i in range(d):
        s = h[i]
        for k in range(i):
            s -= A[i * d + k] * v[k]
        v[i] = s / A[i * d + i]
        q += v[i] * v[i]
    return q


cdef inline double _pair(
    double[:, ::1] X1, double[::1] sig1, double[:, :, ::1] S1, double[::1] iso1, double[::1] r1,
    double[:, ::1] X2, double[::1] sig2, double[:, :, ::1] S2, double[::1] iso2, double[::1] r2,
    Py_ssize_t i, Py_ssize_t j, int d, bint iso_mode,
    double nu, int code, double lnorm,
) noexcept nogil:
    cdef double h0, h1, h2, a, a00, a01, a11, a02, a12, a22, det, q, hh
    cdef double A[MAXD * MAXD]
    cdef double hv[MAXD]
    cdef int u, w
    if iso_mode:
        hh = 0.0
        for u in range(d):
            h0 = X1[i, u] - X2[j, u]
            hh += h0 * h0
        a = 0.5 * (iso1[i] + iso2[j])
        q = hh / a
        return sig1[i] * sig2[j] * r1[i] * r2[j] / pow(a, 0.5 * d) * _matern(sqrt(q), nu, code, lnorm)
    if d == 2:
        h0 = X1[i, 0] - X2[j, 0]
        h1 = X1[i, 1] - X2[j, 1]
        a00 = 0.5 * (S1[i, 0, 0] + S2[j, 0, 0])
        a01 = 0.5 * (S1[i, 0, 1] + S2[j, 0, 1])
        a11 = 0.5 * (S1[i, 1, 1] + S2[j, 1, 1])
        det = a00 * a11 - a01 * a01
        q = (a11 * h0 * h0 - 2.0 * a01 * h0 * h1 + a00 * h1 * h1) / det
    elif d == 1:
        h0 = X1[i, 0] - X2[j, 0]
        det = 0.5 * (S1[i, 0, 0] + S2[j, 0, 0])
        q = h0 * h0 / det
    elif d == 3:
        h0 = X1[i, 0] - X2[j, 0]
        h1 = X1[i, 1] - X2[j, 1]
        h2 = X1[i, 2] - X2[j, 2]
        a00 = 0.5 * (S1[i, 0, 0] + S2[j, 0, 0])
        a01 = 0.5 * (S1[i, 0, 1] + S2[j, 0, 1])
        a02 = 0.5 * (S1[i, 0, 2] + S2[j, 0, 2])
        a11 = 0.5 * (S1[i, 1, 1] + S2[j, 1, 1])
        a12 = 0.5 * (S1[i, 1, 2] + S2[j, 1, 2])
        a22 = 0.5 * (S1[i, 2, 2] + S2[j, 2, 2])
        det = (a00 * (a11 * a22 - a12 * a12)
               - a01 * (a01 * a22 - a12 * a02)
               + a02 * (a01 * a12 - a11 * a02))
        q = ((a11 * a22 - a12 * a12) * h0 * h0
             + (a00 * a22 - a02 * a02) * h1 * h1
             + (a00 * a11 - a01 * a01) * h2 * h2
             + 2.0 * (a02 * a12 - a01 * a22) * h0 * h1
             + 2.0 * (a01 * a12 - a02 * a11) * h0 * h2
             + 2.0 * (a01 * a02 - a00 * a12) * h1 * h2) / det
    else:
        for u in range(d):
            hv[u] = X1[i, u] - X2[j, u]
            for w in range(d):
                A[u * d + w] = 0.5 * (S1[i, u, w] + S2[j, u, w])
        q = _chol_quad(A, hv, d, &det)
    if q < 0.0:
        q = 0.0
    return sig1[i] * sig2[j] * r1[i] * r2[j] / sqrt(det) * _matern(sqrt(q), nu, code, lnorm)


def cov_block(
    double[:, ::1] X1, double[::1] sig1, double[:, :, ::1] S1, double[::1] iso1, double[::1] r1,
    double[:, ::1] X2, double[::1] sig2, double[:, :, ::1] S2, double[::1] iso2, double[::1] r2,
    double nu, bint iso_mode, bint symmetric,
):
    """Dense (n1, n2) covariance between two location sets."""
    cdef Py_ssize_t n1 = X1.shape[0], n2 = X2.shape[0], i, j, j0
    cdef int d = X1.shape[1]
    cdef int code = _matern_code(nu)
    cdef double lnorm = (1.0 - nu) * log(2.0) - lgamma(nu)
    if d > MAXD and not iso_mode:
        raise ValueError(f"full anisotropy supports d <= {MAXD}")
    out = np.empty((n1, n2))
    cdef double[:, ::1] C = out
    with nogil:
        for i in range(n1):
            j0 = i if symmetric else 0
            for j in range(j0, n2):
                C[i, j] = _pair(X1, sig1, S1, iso1, r1, X2, sig2, S2, iso2, r2,
                                i, j, d, iso_mode, nu, code, lnorm)
                if symmetric:
                    C[j, i] = C[i, j]
    return out


cdef int _local_solve(double* C, double* c, double cii, int m, double* b, double* dvar) noexcept nogil:
    # C (m x m, row-major, overwritten) b = C^{-1} c ; dvar = cii - c^T b
    cdef int i, j, k
    cdef double s, q = 0.0
    for j in range(m):
        s = C[j * m + j]
        for k in range(j):
            s -= C[j * m + k] * C[j * m + k]
        if s <= 0.0:
            return -1
        s = sqrt(s)
        C[j * m + j] = s
        for i in range(j + 1, m):
            for k in range(j):
                C[i * m + j] -= C[i * m + k] * C[j * m + k]
            C[i * m + j] /= s
    for i in range(m):
        s = c[i]
        for k in range(i):
            s -= C[i * m + k] * b[k]
        b[i] = s / C[i * m + i]
        q += b[i] * b[i]
    for i in range(m - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, m):
            s -= C[k * m + i] * b[k]
        b[i] = s / C[i * m + i]
    dvar[0] = cii - q
    if dvar[0] <= 0.0:
        return -2
    return 0


def local_regressions(
    double[:, ::1] X, double[::1] sig, double[:, :, ::1] S, double[::1] iso, double[::1] r,
    double[::1] tau2, cnp.intp_t[:, ::1] nbr, cnp.uint8_t[:, ::1] latent,
    double nu, bint iso_mode,
):
    """Regression of each y_i on its conditioning vector.

    Row ``i`` of ``nbr`` lists conditioning locations (-1 padded). Entries
    with ``latent == 0`` are observed responses and carry ``tau2`` on the
    diagonal. Returns ``(B, dvar, failed)`` where ``failed`` is the first
    row whose local factorization failed after jitter, or -1.
    """
    cdef Py_ssize_t n = X.shape[0], kmax = nbr.shape[1], i, a, bb
    cdef int d = X.shape[1], m, att, st
    cdef int code = _matern_code(nu)
    cdef double lnorm = (1.0 - nu) * log(2.0) - lgamma(nu)
    cdef double cii, meand, jit
    cdef Py_ssize_t failed = -1
    B = np.zeros((n, kmax))
    dv = np.empty(n)
    cdef double[:, ::1] Bv = B
    cdef double[::1] dvv = dv
    cdef double[::1] Cbuf = np.empty((kmax + 1) * (kmax + 1))
    cdef double[::1] Craw = np.empty((kmax + 1) * (kmax + 1))
    cdef double[::1] cvec = np.empty(kmax + 1)
    cdef double[::1] bvec = np.empty(kmax + 1)
    if d > MAXD and not iso_mode:
        raise ValueError(f"full anisotropy supports d <= {MAXD}")
    with nogil:
        for i in range(n):
            m = 0
            while m < kmax and nbr[i, m] >= 0:
                m += 1
            cii = _pair(X, sig, S, iso, r, X, sig, S, iso, r, i, i, d, iso_mode, nu, code, lnorm)
            if m == 0:
                dvv[i] = cii
                if cii <= 0.0 and failed < 0:
                    failed = i
                continue
            meand = 0.0
            for a in range(m):
                cvec[a] = _pair(X, sig, S, iso, r, X, sig, S, iso, r,
                                nbr[i, a], i, d, iso_mode, nu, code, lnorm)
                for bb in range(a, m):
                    Craw[a * m + bb] = _pair(X, sig, S, iso, r, X, sig, S, iso, r,
                                             nbr[i, a], nbr[i, bb], d, iso_mode, nu, code, lnorm)
                    Craw[bb * m + a] = Craw[a * m + bb]
                if latent[i, a] == 0:
                    Craw[a * m + a] += tau2[nbr[i, a]]
                meand += Craw[a * m + a]
            meand = (meand + cii) / (m + 1)
            st = -1
            jit = 0.0
            for att in range(4):
                if att > 0:
                    jit = 1e-8 * meand * pow(10.0, att - 1)
                for a in range(m * m):
                    Cbuf[a] = Craw[a]
                for a in range(m):
                    Cbuf[a * m + a] += jit
                st = _local_solve(&Cbuf[0], &cvec[0], cii + jit, m, &bvec[0], &dvv[i])
                if st == 0:
                    break
            if st != 0:
                if failed < 0:
                    failed = i
                dvv[i] = cii
                continue
            for a in range(m):
                Bv[i, a] = bvec[a]
    return B, dv, failed


def sparse_cholesky(
    cnp.intp_t[::1] Ap, cnp.intp_t[::1] Ai, double[::1] Ax,
    cnp.intp_t[::1] Lp, cnp.intp_t[::1] Li,
):
    """Left-looking numeric Cholesky on a precomputed lower pattern.

    ``A`` is the lower triangle (CSC, sorted rows, diagonal first) of an SPD
    matrix; ``Lp``/``Li`` hold the symbolic pattern of its factor. Returns
    ``(Lx, failed_column)``.
    """
    cdef Py_ssize_t n = Lp.shape[0] - 1, j, p, k, kn, r
    cdef double ljk, dj
    cdef Py_ssize_t failed = -1
    Lx = np.zeros(Li.shape[0])
    cdef double[::1] L = Lx
    cdef double[::1] x = np.zeros(n)
    cdef cnp.intp_t[::1] head = np.full(n, -1, dtype=np.intp)
    cdef cnp.intp_t[::1] nxt = np.full(n, -1, dtype=np.intp)
    cdef cnp.intp_t[::1] ptr = np.zeros(n, dtype=np.intp)
    with nogil:
        for j in range(n):
            for p in range(Ap[j], Ap[j + 1]):
                x[Ai[p]] = Ax[p]
            k = head[j]
            while k >= 0:
                kn = nxt[k]
                ljk = L[ptr[k]]
                for p in range(ptr[k], Lp[k + 1]):
                    x[Li[p]] -= L[p] * ljk
                ptr[k] += 1
                if ptr[k] < Lp[k + 1]:
                    r = Li[ptr[k]]
                    nxt[k] = head[r]
                    head[r] = k
                k = kn
            dj = x[j]
            if dj <= 0.0:
                failed = j
                break
            dj = sqrt(dj)
            L[Lp[j]] = dj
            x[j] = 0.0
            for p in range(Lp[j] + 1, Lp[j + 1]):
                L[p] = x[Li[p]] / dj
                x[Li[p]] = 0.0
            ptr[j] = Lp[j] + 1
            if ptr[j] < Lp[j + 1]:
                r = Li[ptr[j]]
                nxt[j] = head[r]
                head[r] = j
    return Lx, failed


def lsolve(cnp.intp_t[::1] Lp, cnp.intp_t[::1] Li, double[::1] Lx, double[::1] b):
    """Solve L x = b (L lower CSC, diagonal first); returns x."""
    cdef Py_ssize_t n = Lp.shape[0] - 1, j, p
    out = np.array(b, copy=True)
    cdef double[::1] x = out
    with nogil:
        for j in range(n):
            x[j] /= Lx[Lp[j]]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p]] -= Lx[p] * x[j]
    return out


def ltsolve(cnp.intp_t[::1] Lp, cnp.intp_t[::1] Li, double[::1] Lx, double[::1] b):
    """Solve L^T x = b; returns x."""
    cdef Py_ssize_t n = Lp.shape[0] - 1, j, p
    out = np.array(b, copy=True)
    cdef double[::1] x = out
    with nogil:
        for j in range(n - 1, -1, -1):
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[j] -= Lx[p] * x[Li[p]]
            x[j] /= Lx[Lp[j]]
    return out
