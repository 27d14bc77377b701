"""Geometric value types and rigid-motion helpers.

Conventions: right-handed frame, x forward, y left, z up. A 6D pose
``(x, y, z, roll, yaw, pitch)`` maps to the rotation
``Rz(yaw) @ Ry(pitch) @ Rx(roll)`` (intrinsic Z-Y-X). Scene replay and
every sensor mount depend on this order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SOURCE_TOP = 0
SOURCE_SIDE = 1

_EPS = 1e-9


def wrap_angle(a):
    """Wrap angle(s) in radians to the half-open interval (-pi, pi]."""
    wrapped = math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2.0 * math.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose6D:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "roll", "yaw", "pitch"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"pose component {name} is not finite: {v}")
            object.__setattr__(self, name, v)
        for name in ("roll", "yaw", "pitch"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    @classmethod
    def from_sequence(cls, values) -> "Pose6D":
        vals = [float(v) for v in values]
        if len(vals) != 6:
            raise ValueError(f"a pose needs 6 values (x y z roll yaw pitch), got {len(vals)}")
        return cls(*vals)

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.x, self.y, self.z, self.roll, self.yaw, self.pitch)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Map points of shape (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_direction(self, dirs) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def rotation_zyx(roll: float, yaw: float, pitch: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def pose_to_transform(pose: Pose6D) -> RigidTransform:
    """Realize a 6D pose as a rigid map ``p -> R p + t`` (intrinsic Z-Y-X)."""
    vals = pose.as_tuple()
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite pose {vals}")
    return RigidTransform(rotation_zyx(pose.roll, pose.yaw, pose.pitch), pose.position)


def transform_to_pose(tf: RigidTransform) -> Pose6D:
    """Inverse of :func:`pose_to_transform` (pitch restricted to [-pi/2, pi/2])."""
    r = tf.rotation
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    if abs(r[2, 0]) < 1.0 - 1e-12:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    else:
        # gimbal lock: fold roll into yaw
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    x, y, z = tf.translation
    return Pose6D(x, y, z, roll, yaw, pitch)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the map ``p -> a(b(p))``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(tf: RigidTransform) -> RigidTransform:
    return tf.inverse()


def _opt_array(value, n, dtype, name):
    if value is None:
        return None
    arr = np.array(value, dtype=dtype).reshape(-1)
    if arr.shape[0] != n:
        raise ValueError(f"attribute {name} has length {arr.shape[0]}, expected {n}")
    return _freeze(arr)


@dataclass(frozen=True)
class PointCloud:
    """Points with optional per-point attributes.

    ``source`` uses 0 for the top LiDAR and 1 for side LiDARs.
    ``azimuth`` is only filled for simulated scans.
    """

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    beam_id: Optional[np.ndarray] = None
    range: Optional[np.ndarray] = None
    source: Optional[np.ndarray] = None
    azimuth: Optional[np.ndarray] = None

    ATTRIBUTES = ("intensity", "beam_id", "range", "source", "azimuth")
    _DTYPES = {
        "intensity": np.float32,
        "beam_id": np.int32,
        "range": np.float64,
        "source": np.uint8,
        "azimuth": np.float64,
    }

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _freeze(pts))
        for name in self.ATTRIBUTES:
            object.__setattr__(
                self, name, _opt_array(getattr(self, name), len(pts), self._DTYPES[name], name)
            )

    def __len__(self) -> int:
        return self.points.shape[0]

    def attributes(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.ATTRIBUTES if getattr(self, k) is not None}

    def select(self, mask) -> "PointCloud":
        """Subset by boolean mask or index array, keeping attributes aligned."""
        idx = np.asarray(mask)
        return PointCloud(self.points[idx], **{k: v[idx] for k, v in self.attributes().items()})

    def transformed(self, tf: RigidTransform) -> "PointCloud":
        return PointCloud(tf.apply(self.points), **self.attributes())

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        attrs = {}
        for name in PointCloud.ATTRIBUTES:
            parts = [getattr(c, name) for c in clouds]
            if all(p is not None for p in parts):
                attrs[name] = np.concatenate(parts)
        return PointCloud(pts, **attrs)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "triangles", _freeze(f))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized normals; length equals twice the triangle area."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def area(self) -> float:
        return float(0.5 * np.linalg.norm(self.face_normals(), axis=1).sum())

    def transformed(self, tf: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(tf.apply(self.vertices), self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @staticmethod
    def concatenate(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += m.n_vertices
        if not verts:
            return TriangleMesh(np.zeros((0, 3)))
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))

    def without_degenerate(self, tol: float = 0.0) -> "TriangleMesh":
        """Drop zero-area triangles and any vertices left unreferenced."""
        if self.n_triangles == 0:
            return TriangleMesh(np.zeros((0, 3)))
        area2 = np.linalg.norm(self.face_normals(), axis=1)
        t = self.triangles
        keep = (area2 > tol) & (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
        t = t[keep]
        used = np.unique(t)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[t])


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n
