"""Exact single-nearest-neighbour queries over a static 3D point set.

The tree is array-backed and built/queried in numba. Distances are compared
squared throughout and ties go to the lowest original point index, so the
answer never depends on tree layout.
"""

import numba as nb
import numpy as np

from ._validation import check_points

DEFAULT_LEAF_SIZE = 16


@nb.njit(cache=True, nogil=True)
def _build(points, leaf_size):
    n = points.shape[0]
    max_nodes = 4 * (n // leaf_size + 1) + 1
    perm = np.arange(n)
    start = np.empty(max_nodes, np.int64)
    stop = np.empty(max_nodes, np.int64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    lo = np.empty((max_nodes, 3), np.float64)
    hi = np.empty((max_nodes, 3), np.float64)

    n_nodes = 1
    start[0] = 0
    stop[0] = n
    stack = np.empty(max_nodes, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start[node]
        e = stop[node]
        for d in range(3):
            lo[node, d] = np.inf
            hi[node, d] = -np.inf
        for i in range(s, e):
            p = perm[i]
            for d in range(3):
                c = points[p, d]
                if c < lo[node, d]:
                    lo[node, d] = c
                if c > hi[node, d]:
                    hi[node, d] = c
        if e - s <= leaf_size:
            continue
        axis = 0
        spread = hi[node, 0] - lo[node, 0]
        for d in range(1, 3):
            if hi[node, d] - lo[node, d] > spread:
                spread = hi[node, d] - lo[node, d]
                axis = d
        if spread == 0.0:
            continue
        seg = perm[s:e].copy()
        order = np.argsort(points[seg, axis], kind="mergesort")
        perm[s:e] = seg[order]
        mid = (s + e) // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        start[lc] = s
        stop[lc] = mid
        start[rc] = mid
        stop[rc] = e
        left[node] = lc
        right[node] = rc
        stack[top] = rc
        stack[top + 1] = lc
        top += 2
    return perm, start[:n_nodes], stop[:n_nodes], left[:n_nodes], right[:n_nodes], lo[:n_nodes], hi[:n_nodes]


@nb.njit(cache=True, nogil=True, inline="always")
def _box_dist2(q0, q1, q2, lo, hi, node):
    d2 = 0.0
    if q0 < lo[node, 0]:
        t = lo[node, 0] - q0
        d2 += t * t
    elif q0 > hi[node, 0]:
        t = q0 - hi[node, 0]
        d2 += t * t
    if q1 < lo[node, 1]:
        t = lo[node, 1] - q1
        d2 += t * t
    elif q1 > hi[node, 1]:
        t = q1 - hi[node, 1]
        d2 += t * t
    if q2 < lo[node, 2]:
        t = lo[node, 2] - q2
        d2 += t * t
    elif q2 > hi[node, 2]:
        t = q2 - hi[node, 2]
        d2 += t * t
    return d2


@nb.njit(cache=True, nogil=True)
def _query(points, perm, start, stop, left, right, lo, hi, queries):
    m = queries.shape[0]
    best_d2 = np.full(m, np.inf)
    best_idx = np.full(m, -1, np.int64)
    visited = np.zeros(m, np.int64)
    if points.shape[0] == 0:
        return best_d2, best_idx, visited
    stack = np.empty(2 * start.shape[0] + 2, np.int64)
    stack_d2 = np.empty(2 * start.shape[0] + 2, np.float64)
    for j in range(m):
        q0 = queries[j, 0]
        q1 = queries[j, 1]
        q2 = queries[j, 2]
        bd = np.inf
        bi = -1
        nv = 0
        stack[0] = 0
        stack_d2[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            # strict: equal-distance subtrees may hold a lower index
            if stack_d2[top] > bd:
                continue
            nv += 1
            lc = left[node]
            if lc < 0:
                for i in range(start[node], stop[node]):
                    p = perm[i]
                    dx = points[p, 0] - q0
                    dy = points[p, 1] - q1
                    dz = points[p, 2] - q2
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < bd or (d2 == bd and p < bi):
                        bd = d2
                        bi = p
                continue
            rc = right[node]
            dl = _box_dist2(q0, q1, q2, lo, hi, lc)
            dr = _box_dist2(q0, q1, q2, lo, hi, rc)
            # push the farther child first so the nearer one is expanded next
            if dl <= dr:
                stack[top] = rc
                stack_d2[top] = dr
                stack[top + 1] = lc
                stack_d2[top + 1] = dl
            else:
                stack[top] = lc
                stack_d2[top] = dl
                stack[top + 1] = rc
                stack_d2[top + 1] = dr
            top += 2
        best_d2[j] = bd
        best_idx[j] = bi
        visited[j] = nv
    return best_d2, best_idx, visited


class KdIndex:
    """Balanced 3-d tree over an immutable point array.

    Each internal node splits its points at the median of the axis with the
    largest spread. Queries are exact and safe to run from several threads.
    """

    def __init__(self, points, leaf_size=DEFAULT_LEAF_SIZE):
        if int(leaf_size) < 1:
            raise ValueError("leaf_size must be >= 1")
        pts = check_points(points).copy()
        pts.flags.writeable = False
        self.points = pts
        self.leaf_size = int(leaf_size)
        (
            self._perm,
            self._start,
            self._stop,
            self._left,
            self._right,
            self._lo,
            self._hi,
        ) = _build(pts, self.leaf_size)

    def __len__(self):
        return self.points.shape[0]

    @property
    def size(self):
        return len(self)

    @property
    def n_nodes(self):
        return self._start.shape[0]

    def query_sq(self, queries):
        """Squared nearest distances, argmin indices and nodes visited per query.

        An empty index answers ``inf`` with index -1.
        """
        q = check_points(queries, "queries")
        return _query(
            self.points, self._perm, self._start, self._stop,
            self._left, self._right, self._lo, self._hi, q,
        )

    def query(self, queries):
        d2, idx, _ = self.query_sq(queries)
        return np.sqrt(d2), idx

    def min_distance(self, query):
        d2, _, _ = self.query_sq(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return float(np.sqrt(d2[0]))


def build(points, leaf_size=DEFAULT_LEAF_SIZE):
    return KdIndex(points, leaf_size)


def min_distance(index, query):
    return index.min_distance(query)


def brute_force_nearest_sq(points, queries, max_block=2_000_000):
    """Reference all-pairs scan: squared distance and lowest-index argmin."""
    pts = check_points(points)
    q = check_points(queries, "queries")
    m = q.shape[0]
    if pts.shape[0] == 0:
        return np.full(m, np.inf), np.full(m, -1, np.int64)
    chunk = max(1, max_block // pts.shape[0])
    best_d2 = np.empty(m)
    best_idx = np.empty(m, np.int64)
    for s in range(0, m, chunk):
        qq = q[s : s + chunk]
        dx = pts[None, :, 0] - qq[:, 0, None]
        dy = pts[None, :, 1] - qq[:, 1, None]
        dz = pts[None, :, 2] - qq[:, 2, None]
        d2 = dx * dx + dy * dy + dz * dz
        # argmin returns the first occurrence, i.e. the lowest index on ties
        idx = np.argmin(d2, axis=1)
        best_idx[s : s + chunk] = idx
        best_d2[s : s + chunk] = d2[np.arange(qq.shape[0]), idx]
    return best_d2, best_idx
