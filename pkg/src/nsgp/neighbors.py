"""Maxmin ordering, nearest-neighbor conditioning sets and the SGV partition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DataError

EXACT_MAXMIN_LIMIT = 10_000
MAXMIN_CANDIDATES = 2_000
_BLOCK = 512


@dataclass(frozen=True)
class OrderedCoords:
    """Coordinates in a new order.

    ``perm[new] = old`` and ``inverse_perm[old] = new``.
    """

    coords: np.ndarray
    perm: np.ndarray
    inverse_perm: np.ndarray

    @property
    def n(self):
        return self.coords.shape[0]

    @classmethod
    def from_perm(cls, coords, perm):
        coords = np.asarray(coords, dtype=float)
        coords = coords.reshape(-1, 1) if coords.ndim == 1 else coords
        perm = np.asarray(perm, dtype=np.intp)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return cls(np.ascontiguousarray(coords[perm]), perm, inv)


@dataclass(frozen=True)
class NeighborGraph:
    """Conditioning index sets ``g(i)``, nearest first, padded with -1."""

    k: int
    nbr: np.ndarray

    @property
    def n(self):
        return self.nbr.shape[0]

    @property
    def counts(self):
        return np.sum(self.nbr >= 0, axis=1)

    def __getitem__(self, i):
        row = self.nbr[i]
        return row[row >= 0]


@dataclass(frozen=True)
class ConditioningSets:
    """Partition of each ``g(i)`` into latent (y) and observed (z) parts.

    ``latent[i, a]`` flags whether ``nbr[i, a]`` enters through its latent
    value; padding entries are 0.
    """

    graph: NeighborGraph
    latent: np.ndarray
    strategy: str

    def q_y(self, i):
        row = self.graph.nbr[i]
        return row[(row >= 0) & (self.latent[i] == 1)]

    def q_z(self, i):
        row = self.graph.nbr[i]
        return row[(row >= 0) & (self.latent[i] == 0)]


# ----------------------------------------------------------------- ordering

def _sqdist_cols(cols, point, buf):
    """Squared distances from ``point`` to every column-stored location."""
    out, tmp = buf
    np.subtract(cols[0], point[0], out=out)
    np.multiply(out, out, out=out)
    for c in range(1, cols.shape[0]):
        np.subtract(cols[c], point[c], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        out += tmp
    return out


def order_maxmin(coords, seed: Optional[int] = 0, exact_limit=EXACT_MAXMIN_LIMIT,
                 n_candidates=MAXMIN_CANDIDATES) -> OrderedCoords:
    """Greedy maximum-minimum-distance ordering.

    Starts at the point nearest the centroid. Above ``exact_limit`` points
    each step only searches a random subsample of ``n_candidates`` unordered
    points.
    """
    X = np.asarray(coords, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    n = X.shape[0]
    if n == 0:
        raise DataError("cannot order an empty coordinate set")
    if not np.all(np.isfinite(X)):
        raise DataError("coordinates must be finite")
    centre = X.mean(axis=0)
    first = int(np.argmin(np.sum((X - centre) ** 2, axis=1)))
    perm = np.empty(n, dtype=np.intp)
    perm[0] = first
    cols = np.ascontiguousarray(X.T)
    buf = np.empty((2, n))
    mind = _sqdist_cols(cols, X[first], buf).copy()
    mind[first] = -1.0
    exact = n <= exact_limit
    if not exact:
        rng = np.random.default_rng(seed)
        pool = np.concatenate([np.arange(first), np.arange(first + 1, n)])
        where = np.empty(n, dtype=np.intp)
        where[pool] = np.arange(n - 1)
        size = n - 1
    for step in range(1, n):
        if exact:
            nxt = int(np.argmax(mind))
        else:
            if size > n_candidates:
                cand = np.sort(pool[rng.choice(size, n_candidates, replace=False)])
            else:
                cand = np.sort(pool[:size])
            nxt = int(cand[np.argmax(mind[cand])])
            # swap-remove nxt from the pool
            pos, last = where[nxt], pool[size - 1]
            pool[pos], where[last] = last, pos
            size -= 1
        perm[step] = nxt
        np.minimum(mind, _sqdist_cols(cols, X[nxt], buf), out=mind)
        mind[nxt] = -1.0
    return OrderedCoords.from_perm(X, perm)


# ---------------------------------------------------------------- neighbors

def _select(dist, idx, k):
    """First ``k`` of the candidates sorted by (distance, index)."""
    order = np.lexsort((idx, dist))[:k]
    return idx[order], dist[order]


def _brute_prev(X, i, k):
    d = np.sum((X[:i] - X[i]) ** 2, axis=1)
    return _select(d, np.arange(i), k)[0]


def knn_previous(X, k, start=0):
    """Exact k nearest earlier points for rows ``start..n-1`` of ``X``.

    Ties in distance go to the smaller index.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    nbr = np.full((n, max(k, 0)), -1, dtype=np.intp)
    if k <= 0:
        return nbr
    for a in range(start, n, _BLOCK):
        b = min(a + _BLOCK, n)
        tree = cKDTree(X[:a]) if a > 0 else None
        if tree is not None:
            kq = min(k + 1, a)
            td, ti = tree.query(X[a:b], k=kq)
            td = np.atleast_2d(td.reshape(b - a, kq)) ** 2
            ti = np.atleast_2d(ti.reshape(b - a, kq)).astype(np.intp)
        for i in range(a, b):
            m = min(k, i)
            if m == 0:
                continue
            local = np.arange(a, i)
            ld = np.sum((X[a:i] - X[i]) ** 2, axis=1)
            if tree is None:
                nbr[i, :m] = _select(ld, local, m)[0]
                continue
            r = i - a
            # recompute tree distances exactly so ties compare bitwise
            tdi = np.sum((X[ti[r]] - X[i]) ** 2, axis=1)
            idx = np.concatenate([ti[r], local])
            dd = np.concatenate([tdi, ld])
            sel, seld = _select(dd, idx, m)
            if kq < a and seld[-1] >= tdi.max() * (1.0 - 1e-12):
                # the k-th distance reaches the edge of the tree query: ties may be hidden
                sel = _brute_prev(X, i, m)
            nbr[i, :m] = sel
    return nbr


def determine_neighbors(ordered: OrderedCoords, k: int) -> NeighborGraph:
    """k nearest previously ordered points for every location (exact)."""
    if k < 0:
        raise ConfigurationError("neighbor count must be nonnegative")
    k_eff = min(int(k), max(ordered.n - 1, 0))
    return NeighborGraph(int(k), knn_previous(ordered.coords, k_eff))


# --------------------------------------------------------------- partitions

def _partition_observed(graph):
    return np.zeros(graph.nbr.shape, dtype=np.uint8)


def _partition_latent(graph):
    return (graph.nbr >= 0).astype(np.uint8)


def _partition_clique(graph):
    """Greedy latent sets that stay cliques of the latent DAG.

    Neighbors are visited nearest first; ``j`` joins ``q_y(i)`` when every
    member already chosen is linked to ``j`` (``l in q_y(j)`` for earlier
    ``l``, ``j in q_y(l)`` for later ``l``). The latent graph is then
    perfect, so the reverse-order Cholesky of the latent precision has no
    fill, and with full conditioning every neighbor is latent.
    """
    n = graph.n
    latent = np.zeros(graph.nbr.shape, dtype=np.uint8)
    qy: List[set] = [set() for _ in range(n)]
    for i in range(n):
        chosen = []
        for a, j in enumerate(graph.nbr[i]):
            if j < 0:
                break
            j = int(j)
            qj = qy[j]
            ok = True
            for l in chosen:
                if l < j:
                    if l not in qj:
                        ok = False
                        break
                elif j not in qy[l]:
                    ok = False
                    break
            if ok:
                chosen.append(j)
                latent[i, a] = 1
        qy[i] = set(chosen)
    return latent


def _partition_subset(graph):
    """``j`` is latent for ``i`` when ``q_y(j)`` lies inside ``g(i)``."""
    n = graph.n
    latent = np.zeros(graph.nbr.shape, dtype=np.uint8)
    qy: List[set] = [set() for _ in range(n)]
    for i in range(n):
        gi = set(int(v) for v in graph[i])
        for a, j in enumerate(graph.nbr[i]):
            if j < 0:
                break
            if qy[int(j)] <= gi:
                latent[i, a] = 1
                qy[i].add(int(j))
    return latent


PARTITION_STRATEGIES: Dict[str, Callable[[NeighborGraph], np.ndarray]] = {
    "sgv": _partition_clique,
    "sgv_subset": _partition_subset,
    "observed": _partition_observed,
    "latent": _partition_latent,
}


def sgv_setup(graph: NeighborGraph, strategy: str = "sgv") -> ConditioningSets:
    """Split each conditioning set into latent and observed parts."""
    try:
        fn = PARTITION_STRATEGIES[strategy]
    except KeyError:
        raise ConfigurationError(
            f"unknown partition strategy {strategy!r}; choose from {sorted(PARTITION_STRATEGIES)}"
        ) from None
    return ConditioningSets(graph, fn(graph), strategy)


def obs_pred_extend(ordered: OrderedCoords, graph: NeighborGraph, pred_coords, k: int):
    """Append prediction points after the observed ones.

    Prediction points keep their input order and condition on their k
    nearest earlier points (observed or earlier predictions). The observed
    block of the graph is unchanged.
    """
    P = np.asarray(pred_coords, dtype=float)
    if P.size == 0:
        return ordered, graph
    P = P.reshape(-1, ordered.coords.shape[1])
    n, m = ordered.n, P.shape[0]
    X = np.vstack([ordered.coords, P])
    kk = max(int(k), graph.nbr.shape[1])
    nbr = np.full((n + m, kk), -1, dtype=np.intp)
    nbr[:n, : graph.nbr.shape[1]] = graph.nbr
    k_eff = min(int(k), n + m - 1)
    tail = knn_previous(X, k_eff, start=n)
    nbr[n:, :k_eff] = tail[n:, :k_eff]
    perm = np.concatenate([ordered.perm, n + np.arange(m)])
    ext = OrderedCoords.from_perm(np.vstack([ordered.coords[ordered.inverse_perm], P]), perm)
    return ext, NeighborGraph(int(k), nbr)
