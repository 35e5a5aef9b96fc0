"""Pure numpy implementations of the compiled kernels.

Same signatures and results as ``_kernels``; selected when the extension
is unavailable or ``NSGP_BACKEND=python`` is set.
"""
import numpy as np
from scipy.special import gammaln, kv

_ROW_CHUNK = 256


def matern(t, nu):
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    pos = t > 0
    tp = t[pos]
    if nu == 0.5:
        out[pos] = np.exp(-tp)
    elif nu == 1.5:
        out[pos] = (1.0 + tp) * np.exp(-tp)
    elif nu == 2.5:
        out[pos] = (1.0 + tp + tp * tp / 3.0) * np.exp(-tp)
    else:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            k = kv(nu, tp)
            val = np.exp((1.0 - nu) * np.log(2.0) - gammaln(nu) + nu * np.log(tp) + np.log(k))
        val = np.where(k == 0.0, 0.0, val)
        val = np.where(np.isfinite(k), val, 1.0)
        out[pos] = val
    return out


def _pair_vec(Xa, sa, Sa, ia, ra, Xb, sb, Sb, ib, rb, nu, iso_mode):
    """Covariance for aligned (broadcastable) arrays of location pairs."""
    d = Xa.shape[-1]
    h = Xa - Xb
    if iso_mode:
        a = 0.5 * (ia + ib)
        q = np.sum(h * h, axis=-1) / a
        pref = ra * rb / a ** (0.5 * d)
    else:
        A = 0.5 * (Sa + Sb)
        if d == 1:
            det = A[..., 0, 0]
            q = h[..., 0] ** 2 / det
        elif d == 2:
            a00, a01, a11 = A[..., 0, 0], A[..., 0, 1], A[..., 1, 1]
            det = a00 * a11 - a01 * a01
            h0, h1 = h[..., 0], h[..., 1]
            q = (a11 * h0 * h0 - 2.0 * a01 * h0 * h1 + a00 * h1 * h1) / det
        else:
            L = np.linalg.cholesky(A)
            det = np.prod(np.diagonal(L, axis1=-2, axis2=-1), axis=-1) ** 2
            v = np.linalg.solve(L, h[..., None])[..., 0]
            q = np.sum(v * v, axis=-1)
        pref = ra * rb / np.sqrt(det)
    q = np.maximum(q, 0.0)
    shape = q.shape
    return sa * sb * pref * matern(np.sqrt(q).ravel(), nu).reshape(shape)


def cov_block(X1, sig1, S1, iso1, r1, X2, sig2, S2, iso2, r2, nu, iso_mode, symmetric):
    n1, n2 = X1.shape[0], X2.shape[0]
    out = np.empty((n1, n2))
    for lo in range(0, n1, _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, n1)
        sl = slice(lo, hi)
        out[sl] = _pair_vec(
            X1[sl, None, :], sig1[sl, None], S1[sl, None] if not iso_mode else None,
            iso1[sl, None] if iso_mode else None, r1[sl, None],
            X2[None, :, :], sig2[None, :], S2[None] if not iso_mode else None,
            iso2[None, :] if iso_mode else None, r2[None, :],
            nu, iso_mode,
        )
    if symmetric:
        iu = np.triu_indices(n1, 1)
        out[iu[1], iu[0]] = out[iu]
    return out


def _gather(arr, idx):
    return None if arr is None else arr[idx]


def local_regressions(X, sig, S, iso, r, tau2, nbr, latent, nu, iso_mode):
    n, kmax = nbr.shape
    B = np.zeros((n, kmax))
    dvar = np.empty(n)
    failed = -1
    Sx = None if iso_mode else S
    ix = iso if iso_mode else None

    def pairs(a, b):
        return _pair_vec(X[a], sig[a], _gather(Sx, a), _gather(ix, a), r[a],
                         X[b], sig[b], _gather(Sx, b), _gather(ix, b), r[b], nu, iso_mode)

    all_i = np.arange(n)
    cii = pairs(all_i, all_i)
    counts = np.sum(nbr >= 0, axis=1)
    dvar[counts == 0] = cii[counts == 0]
    # group rows by conditioning-set size so each group is a dense batch
    for m in np.unique(counts):
        if m == 0:
            continue
        rows = np.flatnonzero(counts == m)
        g = nbr[rows, :m]
        C = pairs(g[:, :, None], g[:, None, :])
        obs = latent[rows, :m] == 0
        diag = np.arange(m)
        C[:, diag, diag] += np.where(obs, tau2[g], 0.0)
        c = pairs(g, rows[:, None])
        ci = cii[rows]
        meand = (np.trace(C, axis1=1, axis2=2) + ci) / (m + 1)
        b_out = np.zeros((rows.size, m))
        d_out = np.array(ci, copy=True)
        todo = np.ones(rows.size, dtype=bool)
        for att in range(4):
            jit = 0.0 if att == 0 else 1e-8 * 10.0 ** (att - 1)
            sel = np.flatnonzero(todo)
            if sel.size == 0:
                break
            Cj = C[sel] + (jit * meand[sel])[:, None, None] * np.eye(m)
            ok = np.ones(sel.size, dtype=bool)
            Lc = np.empty_like(Cj)
            try:
                Lc[:] = np.linalg.cholesky(Cj)
            except np.linalg.LinAlgError:
                for t in range(sel.size):
                    try:
                        Lc[t] = np.linalg.cholesky(Cj[t])
                    except np.linalg.LinAlgError:
                        ok[t] = False
                        Lc[t] = np.eye(m)
            v = np.linalg.solve(Lc, c[sel][:, :, None])[:, :, 0]
            dd = ci[sel] + jit * meand[sel] - np.sum(v * v, axis=1)
            ok &= dd > 0.0
            bb = np.linalg.solve(np.swapaxes(Lc, 1, 2), v[:, :, None])[:, :, 0]
            good = sel[ok]
            b_out[good] = bb[ok]
            d_out[good] = dd[ok]
            todo[good] = False
        if np.any(todo):
            bad = rows[np.flatnonzero(todo)]
            if failed < 0 or bad.min() < failed:
                failed = int(bad.min())
        B[rows, :m] = b_out
        dvar[rows] = d_out
    return B, dvar, failed


def sparse_cholesky(Ap, Ai, Ax, Lp, Li):
    n = Lp.shape[0] - 1
    L = np.zeros(Li.shape[0])
    x = np.zeros(n)
    head = [-1] * n
    nxt = [-1] * n
    ptr = [0] * n
    Lp = Lp.tolist()
    Li_l = Li.tolist()
    Ap_l = Ap.tolist()
    for j in range(n):
        a0, a1 = Ap_l[j], Ap_l[j + 1]
        x[Ai[a0:a1]] = Ax[a0:a1]
        k = head[j]
        while k >= 0:
            kn = nxt[k]
            p0, p1 = ptr[k], Lp[k + 1]
            x[Li[p0:p1]] -= L[p0:p1] * L[p0]
            ptr[k] = p0 + 1
            if p0 + 1 < p1:
                r = Li_l[p0 + 1]
                nxt[k] = head[r]
                head[r] = k
            k = kn
        dj = x[j]
        if dj <= 0.0:
            return L, j
        dj = np.sqrt(dj)
        c0, c1 = Lp[j], Lp[j + 1]
        L[c0] = dj
        x[j] = 0.0
        rows = Li[c0 + 1:c1]
        L[c0 + 1:c1] = x[rows] / dj
        x[rows] = 0.0
        ptr[j] = c0 + 1
        if c0 + 1 < c1:
            r = Li_l[c0 + 1]
            nxt[j] = head[r]
            head[r] = j
    return L, -1


def lsolve(Lp, Li, Lx, b):
    x = np.array(b, dtype=float, copy=True)
    n = Lp.shape[0] - 1
    for j in range(n):
        p0, p1 = Lp[j], Lp[j + 1]
        x[j] /= Lx[p0]
        x[Li[p0 + 1:p1]] -= Lx[p0 + 1:p1] * x[j]
    return x


def ltsolve(Lp, Li, Lx, b):
    x = np.array(b, dtype=float, copy=True)
    n = Lp.shape[0] - 1
    for j in range(n - 1, -1, -1):
        p0, p1 = Lp[j], Lp[j + 1]
        x[j] = (x[j] - np.dot(Lx[p0 + 1:p1], x[Li[p0 + 1:p1]])) / Lx[p0]
    return x
