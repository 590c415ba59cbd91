"""HDBSCAN from scratch, plus a plain DBSCAN for comparison.

Pipeline: core distances -> mutual-reachability MST (dense Prim) -> single-linkage
dendrogram -> condensed tree -> excess-of-mass cluster selection.

Squared distances are accumulated in coordinate order and compared squared, so
every route through this module (and any reference that follows the same rule)
produces bit-identical weights. Edge ties are broken by (weight, smaller
endpoint, larger endpoint), which makes the MST unique.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

from metricseg.errors import ValidationError

NOISE = -1
# zero distances get this lambda instead of inf so stabilities stay finite
MIN_DISTANCE = 1e-300
_CANDIDATE_SLACK = 2


@dataclass(frozen=True)
class ClusterParams:
    min_cluster_size: int = 24
    min_samples: int = 5
    dbscan_eps: float = 0.1

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValidationError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValidationError("min_samples must be >= 1")


@dataclass
class ClusterResult:
    labels: np.ndarray  # -1 noise, else 0..K-1 ordered by first member index
    stability: np.ndarray
    counts: np.ndarray

    @property
    def n_clusters(self):
        return len(self.counts)

    @property
    def noise_fraction(self):
        return float((self.labels == NOISE).mean()) if len(self.labels) else 0.0

    def confidences(self):
        """Stability per member, rescaled so the best cluster scores 1."""
        if self.n_clusters == 0:
            return np.zeros(0)
        score = self.stability / self.counts
        top = score.max()
        if not top > 0:
            return np.ones(self.n_clusters)
        return np.maximum(score / top, np.finfo(float).tiny)


@dataclass
class CondensedTree:
    """Rows (parent, child, lambda, child_size). Children < n_points are points;
    cluster ids start at n_points (the root) and grow top-down."""

    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    child_size: np.ndarray
    n_points: int

    @property
    def root(self):
        return self.n_points

    def cluster_ids(self):
        kids = self.child[self.child >= self.n_points]
        return np.concatenate([[self.root], np.sort(kids)]).astype(np.int64)


def lambda_of(distance):
    return 1.0 / np.maximum(distance, MIN_DISTANCE)


# --- distances ----------------------------------------------------------------


@numba.njit(cache=True)
def _sq_dist_rows(x, i, idx):
    out = np.empty(len(idx))
    d = x.shape[1]
    for t in range(len(idx)):
        j = idx[t]
        acc = 0.0
        for c in range(d):
            df = x[i, c] - x[j, c]
            acc += df * df
        out[t] = acc
    return out


def pair_distance(points, a, b):
    x = np.ascontiguousarray(points, dtype=np.float64)
    return float(np.sqrt(_sq_dist_rows(x, a, np.array([b], dtype=np.int64))[0]))


@numba.njit(cache=True)
def _kth_exact_sq(x, cand, k):
    n, d = x.shape
    out = np.empty(n)
    buf = np.empty(cand.shape[1])
    for i in range(n):
        m = 0
        for t in range(cand.shape[1]):
            j = cand[i, t]
            if j == i or j >= n:
                continue
            acc = 0.0
            for c in range(d):
                df = x[i, c] - x[j, c]
                acc += df * df
            buf[m] = acc
            m += 1
        out[i] = np.sort(buf[:m])[k - 1]
    return out


def core_distances(points, k, squared=False):
    """Distance from each point to its k-th nearest other point.

    A KD-tree proposes candidates; the k-th distance is then recomputed with the
    module's exact distance rule.
    """
    x = np.ascontiguousarray(points, dtype=np.float64)
    n = len(x)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if n <= k:
        raise ValidationError(f"need more than k={k} points for core distances, got {n}")
    m = min(n, k + 1 + _CANDIDATE_SLACK)
    if m == n:
        cand = np.broadcast_to(np.arange(n), (n, n))
    else:
        _, cand = cKDTree(x).query(x, k=m)
    sq = _kth_exact_sq(x, np.ascontiguousarray(cand, dtype=np.int64), k)
    return sq if squared else np.sqrt(sq)


def mutual_reachability(a, b, points, core):
    return max(core[a], core[b], pair_distance(points, a, b))


# --- minimum spanning tree ------------------------------------------------------


_TILE = 1024


@numba.njit(cache=True)
def _prim_sq(x, core_sq):
    """Dense Prim over squared mutual-reachability weights.

    Unvisited vertices stay compacted at the front of coordinate-major arrays;
    each scan runs tile by tile so the distance accumulator lives in L1.
    """
    n, d = x.shape
    xt = np.empty((d, n))
    for i in range(n):
        for c in range(d):
            xt[c, i] = x[i, c]
    cr = core_sq.copy()
    best = np.full(n, np.inf)
    src = np.full(n, -1, np.int32)
    idx = np.arange(n).astype(np.int32)
    acc = np.empty(_TILE)
    cp = np.empty(d)
    eu = np.empty(n - 1, np.int64)
    ev = np.empty(n - 1, np.int64)
    ew = np.empty(n - 1)
    slot = 0
    m = n
    for it in range(n - 1):
        cur = idx[slot]
        for c in range(d):
            cp[c] = xt[c, slot]
        cc = cr[slot]
        # swap-remove the vertex just attached
        m -= 1
        for c in range(d):
            xt[c, slot] = xt[c, m]
        cr[slot] = cr[m]
        best[slot] = best[m]
        src[slot] = src[m]
        idx[slot] = idx[m]

        bw = np.inf
        bi = -1
        blo = 0
        bhi = 0
        for t0 in range(0, m, _TILE):
            L = min(_TILE, m - t0)
            row = xt[0, t0:t0 + L]
            pc = cp[0]
            for t in range(L):
                df = pc - row[t]
                acc[t] = df * df
            for c in range(1, d):
                pc = cp[c]
                row = xt[c, t0:t0 + L]
                for t in range(L):
                    df = pc - row[t]
                    acc[t] += df * df
            crt = cr[t0:t0 + L]
            for t in range(L):
                v = acc[t]
                if cc > v:
                    v = cc
                if crt[t] > v:
                    v = crt[t]
                acc[t] = v

            bt = best[t0:t0 + L]
            st = src[t0:t0 + L]
            tie = False
            for t in range(L):
                if acc[t] < bt[t]:
                    bt[t] = acc[t]
                    st[t] = cur
                elif acc[t] == bt[t]:
                    tie = True
            if tie:
                it_ = idx[t0:t0 + L]
                for t in range(L):
                    if acc[t] == bt[t] and st[t] != cur:
                        j = it_[t]
                        s = st[t]
                        if min(cur, j) < min(s, j) or (min(cur, j) == min(s, j) and max(cur, j) < max(s, j)):
                            st[t] = cur

            tmin = np.inf
            for t in range(L):
                if bt[t] < tmin:
                    tmin = bt[t]
            if tmin <= bw:
                it_ = idx[t0:t0 + L]
                for t in range(L):
                    b = bt[t]
                    if b <= bw:
                        j = it_[t]
                        s = st[t]
                        lo = min(s, j)
                        hi = max(s, j)
                        if b < bw or lo < blo or (lo == blo and hi < bhi):
                            bw = b
                            bi = t0 + t
                            blo = lo
                            bhi = hi
        eu[it] = blo
        ev[it] = bhi
        ew[it] = bw
        slot = bi
    return eu, ev, ew


def build_mst(points, core, squared=False):
    """MST of the complete mutual-reachability graph.

    Edge weight is ``sqrt(max(core_a**2, core_b**2, |a - b|**2))``; ties are
    broken by (weight, smaller endpoint, larger endpoint). With ``squared=True``
    ``core`` already holds squared core distances. Returns (u, v, weight) with
    u < v, sorted by that key.
    """
    x = np.ascontiguousarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValidationError("need at least 2 points for a spanning tree")
    core = np.asarray(core, dtype=np.float64)
    core_sq = np.ascontiguousarray(core if squared else core * core)
    u, v, w2 = _prim_sq(x, core_sq)
    order = np.lexsort((v, u, w2))
    return u[order], v[order], np.sqrt(w2[order])


# --- hierarchy -------------------------------------------------------------------


def single_linkage(mst, n):
    """Kruskal merge order over sorted MST edges.

    Row t of the result merges nodes (left, right) at ``dist`` into node n + t.
    """
    u, v, w = mst
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)
    left = np.empty(n - 1, dtype=np.int64)
    right = np.empty(n - 1, dtype=np.int64)

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for t in range(n - 1):
        a, b = find(u[t]), find(v[t])
        node = n + t
        left[t], right[t] = a, b
        parent[a] = parent[b] = node
        size[node] = size[a] + size[b]
    return left, right, np.asarray(w, dtype=np.float64), size


def condense_tree(mst, min_cluster_size, n=None):
    """Condense the single-linkage dendrogram of ``mst``.

    A split where one side has fewer than ``min_cluster_size`` points is not a
    real split: those points fall out of the surviving cluster at that lambda.
    """
    u, v, w = mst
    n = len(u) + 1 if n is None else n
    rows_p, rows_c, rows_l, rows_s = [], [], [], []
    if n < 2:
        return CondensedTree(*(np.zeros(0, dtype=t) for t in (np.int64, np.int64, float, np.int64)), n_points=n)
    left, right, dist, size = single_linkage(mst, n)
    lam = lambda_of(dist)
    top = 2 * n - 2
    relabel = {top: n}
    next_label = n + 1

    def leaves(node):
        out, stack = [], [node]
        while stack:
            a = stack.pop()
            if a < n:
                out.append(a)
            else:
                stack.append(right[a - n])
                stack.append(left[a - n])
        return sorted(out)

    queue = deque([top])
    while queue:
        node = queue.popleft()
        t = node - n
        a, b, lv = left[t], right[t], lam[t]
        cid = relabel[node]
        big_a, big_b = size[a] >= min_cluster_size, size[b] >= min_cluster_size
        if big_a and big_b:
            for child in (a, b):
                relabel[child] = next_label
                rows_p.append(cid)
                rows_c.append(next_label)
                rows_l.append(lv)
                rows_s.append(size[child])
                next_label += 1
                if child >= n:
                    queue.append(child)
            continue
        for child, big in ((a, big_a), (b, big_b)):
            if big:
                relabel[child] = cid
                if child >= n:
                    queue.append(child)
            else:
                for p in leaves(child):
                    rows_p.append(cid)
                    rows_c.append(p)
                    rows_l.append(lv)
                    rows_s.append(1)
    return CondensedTree(
        np.asarray(rows_p, dtype=np.int64),
        np.asarray(rows_c, dtype=np.int64),
        np.asarray(rows_l, dtype=np.float64),
        np.asarray(rows_s, dtype=np.int64),
        n,
    )


def cluster_stabilities(tree):
    """Excess of mass: sum over rows leaving C of (lambda - lambda_birth(C)) * size."""
    ids = tree.cluster_ids()
    pos = {c: i for i, c in enumerate(ids)}
    birth = np.zeros(len(ids))
    is_cluster = tree.child >= tree.n_points
    for c, lv in zip(tree.child[is_cluster], tree.lam[is_cluster]):
        birth[pos[c]] = lv
    stab = np.zeros(len(ids))
    for p, lv, s in zip(tree.parent, tree.lam, tree.child_size):
        i = pos[p]
        stab[i] += (lv - birth[i]) * s
    return ids, stab


def extract_clusters_eom(tree):
    """Pick the flat clustering with maximal total stability (root allowed).

    A selected cluster claims every point in its subtree; points outside all
    selected clusters are noise.
    """
    n = tree.n_points
    if n == 0:
        return ClusterResult(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))
    if len(tree.parent) == 0:
        return ClusterResult(np.full(n, NOISE, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))
    ids, stab = cluster_stabilities(tree)
    pos = {c: i for i, c in enumerate(ids)}
    is_cluster = tree.child >= n
    children = {c: [] for c in ids}
    parent_of = {}
    for p, c in zip(tree.parent[is_cluster], tree.child[is_cluster]):
        children[p].append(c)
        parent_of[c] = p

    selected = {}
    best = {}
    # children always carry larger ids than their parent
    for c in ids[::-1]:
        kids = children[c]
        if not kids:
            selected[c] = True
            best[c] = stab[pos[c]]
            continue
        below = sum(best[k] for k in kids)
        if stab[pos[c]] > below:
            selected[c] = True
            best[c] = stab[pos[c]]
            stack = list(kids)
            while stack:
                k = stack.pop()
                selected[k] = False
                stack.extend(children[k])
        else:
            selected[c] = False
            best[c] = below

    owner = {}
    for c in ids:
        if selected[c]:
            owner[c] = c
        elif c in parent_of:
            owner[c] = owner[parent_of[c]]
        else:
            owner[c] = None

    labels = np.full(n, NOISE, dtype=np.int64)
    point_rows = ~is_cluster
    raw = np.full(n, -1, dtype=np.int64)
    for p, c in zip(tree.parent[point_rows], tree.child[point_rows]):
        o = owner[p]
        raw[c] = -1 if o is None else o
    chosen = [c for c in ids if selected[c]]
    if not chosen:
        return ClusterResult(labels, np.zeros(0), np.zeros(0, dtype=np.int64))
    return _renumber(raw, {c: stab[pos[c]] for c in chosen})


def _renumber(raw, stability_of):
    """Map arbitrary cluster ids to 0..K-1 ordered by each cluster's first member."""
    labels = np.full(len(raw), NOISE, dtype=np.int64)
    members = raw >= 0
    if not members.any():
        return ClusterResult(labels, np.zeros(0), np.zeros(0, dtype=np.int64))
    ids, first = np.unique(raw[members], return_index=True)
    order = ids[np.argsort(np.flatnonzero(members)[first])]
    remap = {c: i for i, c in enumerate(order)}
    labels[members] = [remap[c] for c in raw[members]]
    stability = np.array([stability_of.get(c, 0.0) for c in order])
    return ClusterResult(labels, stability, np.bincount(labels[members], minlength=len(order)))


def hdbscan(points, params=None):
    params = params or ClusterParams()
    x = np.ascontiguousarray(points, dtype=np.float64)
    n = len(x)
    if n < params.min_cluster_size or n < 2:
        return ClusterResult(np.full(n, NOISE, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))
    k = min(params.min_samples, n - 1)
    core_sq = core_distances(x, k, squared=True)
    mst = build_mst(x, core_sq, squared=True)
    tree = condense_tree(mst, params.min_cluster_size, n)
    return extract_clusters_eom(tree)


def dbscan_baseline(points, eps, min_pts):
    """Textbook DBSCAN; ``min_pts`` counts the point itself. Border points join the
    first cluster that reaches them."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterResult(labels, np.zeros(0), np.zeros(0, dtype=np.int64))
    neigh = cKDTree(x).query_ball_point(x, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])
    k = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = k
        queue = deque([i])
        while queue:
            a = queue.popleft()
            if not core[a]:
                continue
            for b in neigh[a]:
                if labels[b] == NOISE:
                    labels[b] = k
                    queue.append(b)
        k += 1
    return ClusterResult(labels, np.zeros(k), np.bincount(labels[labels >= 0], minlength=k))
