"""Independent reference implementations used by the tests.

Each oracle recomputes a quantity by a different route than the package
(dense linear solves, full distance matrices, scipy rotations, scalar loops)
so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.transform import Rotation


def rotation_oracle(roll: float, yaw: float, pitch: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation via scipy (capital letters = intrinsic)."""
    return Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()


def scalar_wrap(a: float) -> float:
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


def componentwise_target(rel, ego0, ego_t):
    """Scalar form of ``L'_t + (L_t - L_0)`` with angles wrapped after each step."""
    ego = [b - a for a, b in zip(ego0, ego_t)]
    ego = ego[:3] + [scalar_wrap(v) for v in ego[3:]]
    out = [r + e for r, e in zip(rel, ego)]
    return tuple(out[:3] + [scalar_wrap(v) for v in out[3:]])


def brute_force_hits(vertices, triangles, origins, dirs, t_min=1e-9, eps=1e-9):
    """Nearest hit per ray by solving ``o + t d = a + u e1 + v e2`` for every triangle."""
    v = np.asarray(vertices, dtype=np.float64)
    tri = np.asarray(triangles)
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    e1, e2 = b - a, c - a
    best_t = np.full(len(origins), np.inf)
    best_i = np.full(len(origins), -1)
    for r, (o, d) in enumerate(zip(origins, dirs)):
        m = np.stack([-np.broadcast_to(d, e1.shape), e1, e2], axis=-1)  # (T, 3, 3)
        det = np.linalg.det(m)
        ok = np.abs(det) > 1e-300
        sol = np.full((len(tri), 3), np.nan)
        sol[ok] = np.linalg.solve(m[ok], (o - a)[ok][..., None])[..., 0]
        t, u, w = sol[:, 0], sol[:, 1], sol[:, 2]
        hit = ok & (u >= -eps) & (w >= -eps) & (u + w <= 1 + eps) & (t > t_min)
        if hit.any():
            idx = np.flatnonzero(hit)
            j = idx[np.lexsort((idx, t[idx]))[0]]
            best_t[r], best_i[r] = t[j], j
    return best_t, best_i


def brute_force_nn(queries, points):
    d = np.linalg.norm(np.asarray(queries)[:, None, :] - np.asarray(points)[None, :, :], axis=-1)
    i = d.argmin(axis=1)
    return d[np.arange(len(d)), i], i


def chamfer_oracle(a, b, fraction=1.0):
    d = np.linalg.norm(np.asarray(a)[:, None, :] - np.asarray(b)[None, :, :], axis=-1) ** 2

    def trunc(x):
        x = np.sort(x)
        drop = min(int(math.ceil((1 - fraction) * len(x) - 1e-9)), len(x) - 1)
        return x[: len(x) - drop].mean()

    f, g = trunc(d.min(axis=1)), trunc(d.min(axis=0))
    return f, g, f + g


def in_oriented_box(p, center, size, yaw) -> bool:
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy, dz = (p[i] - center[i] for i in range(3))
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return abs(lx) <= size[0] / 2 and abs(ly) <= size[1] / 2 and abs(dz) <= size[2] / 2


def neighbor_means_oracle(points, k):
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    d.sort(axis=1)
    return d[:, 1:k + 1].mean(axis=1)


def ray_sphere_depth(origin, direction, center, radius):
    oc = np.asarray(origin) - np.asarray(center)
    b = float(np.dot(oc, direction))
    c = float(np.dot(oc, oc)) - radius * radius
    disc = b * b - c
    if disc < 0:
        return math.inf
    t = -b - math.sqrt(disc)
    return t if t > 0 else -b + math.sqrt(disc)


def central_difference(f, x0: np.ndarray, idx, h: float) -> float:
    xp = x0.copy()
    xm = x0.copy()
    xp.flat[idx] += h
    xm.flat[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)
