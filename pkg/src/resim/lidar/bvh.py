"""Median-split bounding volume hierarchy and ray-triangle queries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from ..geometry import TriangleMesh

LEAF_SIZE = 4
BARY_EPS = 1e-9
T_MIN = 1e-9
_BOX_PAD = 1e-9

# prefer OpenMP; the TBB layer warns on older system TBB builds
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


@dataclass(frozen=True)
class Bvh:
    vertices: np.ndarray
    triangles: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray   # -1 marks a leaf
    node_right: np.ndarray
    node_start: np.ndarray  # leaf range into ``order``
    node_count: np.ndarray
    order: np.ndarray       # triangle indices grouped by leaf

    @property
    def n_nodes(self) -> int:
        return self.node_lo.shape[0]

    def leaves(self):
        for n in range(self.n_nodes):
            if self.node_left[n] < 0:
                yield n, self.order[self.node_start[n]:self.node_start[n] + self.node_count[n]]


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Split on the centroid median along the widest centroid axis."""
    if mesh is None or mesh.n_triangles == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    v = np.ascontiguousarray(mesh.vertices, dtype=np.float64)
    t = np.ascontiguousarray(mesh.triangles, dtype=np.int64)
    tv = v[t]
    tri_lo = tv.min(axis=1)
    tri_hi = tv.max(axis=1)
    cent = tv.mean(axis=1)

    order = np.arange(len(t), dtype=np.int64)
    lo_l, hi_l, left, right, start, count = [], [], [], [], [], []

    def new_node():
        for lst in (lo_l, hi_l):
            lst.append(None)
        for lst in (left, right, start, count):
            lst.append(-1)
        return len(left) - 1

    root = new_node()
    stack = [(root, 0, len(t))]
    while stack:
        node, s, e = stack.pop()
        ids = order[s:e]
        lo_l[node] = tri_lo[ids].min(axis=0) - _BOX_PAD
        hi_l[node] = tri_hi[ids].max(axis=0) + _BOX_PAD
        n = e - s
        if n <= leaf_size:
            start[node], count[node] = s, n
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = np.argsort(c[:, axis], kind="stable")
        order[s:e] = ids[srt]
        mid = s + n // 2
        l_node = new_node()
        r_node = new_node()
        left[node], right[node] = l_node, r_node
        stack.append((r_node, mid, e))
        stack.append((l_node, s, mid))

    return Bvh(v, t, np.array(lo_l), np.array(hi_l), np.array(left, dtype=np.int64),
               np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
               np.array(count, dtype=np.int64), order)


@njit(cache=True, inline="always")
def _ray_triangle(ox, oy, oz, dx, dy, dz, v, tri):
    a = v[tri[0]]
    b = v[tri[1]]
    c = v[tri[2]]
    e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return math.inf
    inv = 1.0 / det
    sx, sy, sz = ox - a[0], oy - a[1], oz - a[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
        return math.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    w = (dx * qx + dy * qy + dz * qz) * inv
    if w < -BARY_EPS or u + w > 1.0 + BARY_EPS:
        return math.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= T_MIN:
        return math.inf
    return t


@njit(cache=True, inline="always")
def _axis_interval(o, inv, zero, lo, hi):
    if zero:
        if o < lo or o > hi:
            return math.inf, -math.inf
        return -math.inf, math.inf
    t0 = (lo - o) * inv
    t1 = (hi - o) * inv
    if t0 > t1:
        return t1, t0
    return t0, t1


@njit(cache=True, inline="always")
def _slab(ox, oy, oz, ix, iy, iz, lo, hi):
    ax, bx = _axis_interval(ox, ix, ix == math.inf, lo[0], hi[0])
    ay, by = _axis_interval(oy, iy, iy == math.inf, lo[1], hi[1])
    az, bz = _axis_interval(oz, iz, iz == math.inf, lo[2], hi[2])
    return max(ax, max(ay, az)), min(bx, min(by, bz))


@njit(cache=True)
def _closest_hit(ox, oy, oz, dx, dy, dz, t_max, v, tris, lo, hi, left, right, start, count, order):
    ix = 1.0 / dx if dx != 0.0 else math.inf
    iy = 1.0 / dy if dy != 0.0 else math.inf
    iz = 1.0 / dz if dz != 0.0 else math.inf
    best_t = math.inf
    best_i = -1
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        tn, tf = _slab(ox, oy, oz, ix, iy, iz, lo[node], hi[node])
        if tf < tn or tf < 0.0 or tn > t_max or tn > best_t:
            continue
        if left[node] < 0:
            for q in range(start[node], start[node] + count[node]):
                ti = order[q]
                t = _ray_triangle(ox, oy, oz, dx, dy, dz, v, tris[ti])
                if t <= t_max and (t < best_t or (t == best_t and ti < best_i)):
                    best_t = t
                    best_i = ti
        else:
            l, r = left[node], right[node]
            ln, _ = _slab(ox, oy, oz, ix, iy, iz, lo[l], hi[l])
            rn, _ = _slab(ox, oy, oz, ix, iy, iz, lo[r], hi[r])
            # push the farther child first so the nearer is visited next
            if ln <= rn:
                stack[sp] = r
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = r
            sp += 2
    return best_t, best_i


@njit(cache=True, parallel=True)
def _cast_many(origins, dirs, t_max, v, tris, lo, hi, left, right, start, count, order, out_t, out_i):
    for r in prange(origins.shape[0]):
        t, i = _closest_hit(origins[r, 0], origins[r, 1], origins[r, 2], dirs[r, 0], dirs[r, 1], dirs[r, 2],
                            t_max[r], v, tris, lo, hi, left, right, start, count, order)
        out_t[r] = t
        out_i[r] = i


def intersect(bvh: Bvh, origins, directions, t_max=math.inf):
    """Nearest hit per ray: ``(distance, triangle_index)``; misses give ``inf`` and -1.

    Equal-distance hits resolve to the lower triangle index.
    """
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    tm = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(o),)))
    out_t = np.empty(len(o))
    out_i = np.empty(len(o), dtype=np.int64)
    if len(o):
        _cast_many(o, d, tm, bvh.vertices, bvh.triangles, bvh.node_lo, bvh.node_hi, bvh.node_left,
                   bvh.node_right, bvh.node_start, bvh.node_count, bvh.order, out_t, out_i)
    return out_t, out_i
