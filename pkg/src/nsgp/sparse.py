"""Sparse structures for the SGV latent precision.

The joint Vecchia density of the interleaved vector ``(y_1, z_1, y_2, z_2,
...)`` has an upper-triangular factor ``U`` whose columns come from local
regressions. The latent block of ``U U^T`` is assembled from per-node
outer products and factorized in reverse node order. Everything that does
not depend on parameter values (patterns, scatter maps, symbolic factor)
is computed once in :class:`LatentPrecisionPlan`.
"""
from __future__ import annotations

import numpy as np

from . import _backend


def symbolic_cholesky(n, Ap, Ai):
    """Pattern of the lower Cholesky factor of a lower-CSC pattern.

    Column ``j`` of the factor is the union of column ``j`` of the matrix and
    the factor columns of its elimination-tree children (minus the child's
    own row). Returns ``(Lp, Li)`` with sorted rows, diagonal first.
    """
    children = [[] for _ in range(n)]
    cols = [None] * n
    for j in range(n):
        rows = set(Ai[Ap[j]:Ap[j + 1]].tolist())
        rows.add(j)
        for c in children[j]:
            rows.update(cols[c])
        rows.discard(j)
        below = sorted(r for r in rows if r > j)
        cols[j] = below
        if below:
            children[below[0]].append(j)
    counts = np.fromiter((1 + len(c) for c in cols), dtype=np.intp, count=n)
    Lp = np.zeros(n + 1, dtype=np.intp)
    np.cumsum(counts, out=Lp[1:])
    Li = np.empty(Lp[-1], dtype=np.intp)
    for j in range(n):
        Li[Lp[j]] = j
        Li[Lp[j] + 1:Lp[j + 1]] = cols[j]
    for j in range(n):
        cols[j] = None
    return Lp, Li


class LatentPrecisionPlan:
    """Reusable structure for factorizing the latent precision.

    Parameters
    ----------
    nbr : (n, k) int array
        Conditioning locations per node, -1 padded.
    latent : (n, k) uint8 array
        1 where the conditioning variable is the latent ``y_j``, 0 where it
        is the response ``z_j``.
    n_obs : int
        Nodes ``0..n_obs-1`` carry a response; later nodes are latent only.
    """

    def __init__(self, nbr, latent, n_obs=None):
        nbr = np.ascontiguousarray(nbr, dtype=np.intp)
        latent = np.ascontiguousarray(latent, dtype=np.uint8)
        n, k = nbr.shape
        self.n = n
        self.n_obs = n if n_obs is None else int(n_obs)
        self.nbr = nbr
        self.latent = latent
        lat = (latent == 1) & (nbr >= 0)
        obs = (latent == 0) & (nbr >= 0)
        if np.any(nbr[obs] >= self.n_obs):
            raise ValueError("observed-type conditioning on a node without a response")
        self.obs_mask = obs
        # members of each node's outer product: slot 0 is the node itself
        members = np.full((n, k + 1), -1, dtype=np.intp)
        members[:, 0] = np.arange(n)
        members[:, 1:] = np.where(lat, nbr, -1)
        self.members = members
        node, sa, sb = [], [], []
        for a in range(k + 1):
            for b in range(a, k + 1):
                ok = (members[:, a] >= 0) & (members[:, b] >= 0)
                idx = np.flatnonzero(ok)
                node.append(idx)
                sa.append(np.full(idx.size, a, dtype=np.intp))
                sb.append(np.full(idx.size, b, dtype=np.intp))
        self.pair_node = np.concatenate(node)
        self.pair_a = np.concatenate(sa)
        self.pair_b = np.concatenate(sb)
        ga = members[self.pair_node, self.pair_a]
        gb = members[self.pair_node, self.pair_b]
        lo, hi = np.minimum(ga, gb), np.maximum(ga, gb)
        # reverse order: node j -> position n-1-j; lower triangle row >= col
        row = n - 1 - lo
        col = n - 1 - hi
        diag = n - 1 - np.arange(n)  # diag_pos is indexed by node
        row = np.concatenate([row, diag])
        col = np.concatenate([col, diag])
        key = col.astype(np.int64) * n + row
        ukey, inv = np.unique(key, return_inverse=True)
        self.pair_pos = inv[: self.pair_node.size]
        self.diag_pos = inv[self.pair_node.size:]
        acol = ukey // n
        self.Ai = (ukey % n).astype(np.intp)
        self.Ap = np.zeros(n + 1, dtype=np.intp)
        np.add.at(self.Ap, acol + 1, 1)
        np.cumsum(self.Ap, out=self.Ap)
        self.nnz = ukey.size
        self.Lp, self.Li = symbolic_cholesky(n, self.Ap, self.Ai)

    @property
    def fill(self):
        """Entries of the factor pattern not present in the matrix pattern."""
        return int(self.Li.size - self.nnz)

    def column_values(self, B, dvar):
        """Latent outer-product vectors ``u_i`` on the member slots."""
        s = 1.0 / np.sqrt(dvar)
        V = np.zeros(self.members.shape)
        V[:, 0] = s
        V[:, 1:] = np.where(self.members[:, 1:] >= 0, -B * s[:, None], 0.0)
        return V

    def assemble(self, V, inv_tau2):
        """Lower-CSC values of the reverse-ordered latent precision."""
        prod = V[self.pair_node, self.pair_a] * V[self.pair_node, self.pair_b]
        Ax = np.bincount(self.pair_pos, weights=prod, minlength=self.nnz)
        extra = np.zeros(self.n)
        extra[: self.n_obs] = inv_tau2
        Ax += np.bincount(self.diag_pos, weights=extra, minlength=self.nnz)
        return Ax

    def factorize(self, Ax):
        Lx, failed = _backend.kernels.sparse_cholesky(self.Ap, self.Ai, Ax, self.Lp, self.Li)
        return Lx, int(failed)

    def lsolve(self, Lx, b):
        return _backend.kernels.lsolve(self.Lp, self.Li, Lx, np.ascontiguousarray(b, dtype=float))

    def ltsolve(self, Lx, b):
        return _backend.kernels.ltsolve(self.Lp, self.Li, Lx, np.ascontiguousarray(b, dtype=float))

    def log_diag(self, Lx):
        return np.log(Lx[self.Lp[:-1]])

    def scatter_members(self, V, t):
        """``sum_i u_i t_i`` as a vector over nodes."""
        vals = V * t[:, None]
        ok = self.members >= 0
        return np.bincount(self.members[ok], weights=vals[ok], minlength=self.n)

    def dense_lower(self, Ax):
        """Dense reverse-ordered matrix from CSC values (testing aid)."""
        A = np.zeros((self.n, self.n))
        for j in range(self.n):
            rows = self.Ai[self.Ap[j]:self.Ap[j + 1]]
            A[rows, j] = Ax[self.Ap[j]:self.Ap[j + 1]]
        return A + np.tril(A, -1).T
