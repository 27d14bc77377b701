"""Primitive meshes and a synthetic posed sequence used for closed-loop checks."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose6D, TriangleMesh, rotation_zyx, transform_to_pose
from .ingest import write_manifest
from .ply import write_ply

_CUBE_V = np.array([[x, y, z] for z in (0.0, 1.0) for y in (-0.5, 0.5) for x in (-0.5, 0.5)])
# outward-facing winding
_CUBE_T = np.array([
    [0, 2, 1], [1, 2, 3],   # bottom
    [4, 5, 6], [5, 7, 6],   # top
    [0, 1, 4], [1, 5, 4],   # -y
    [2, 6, 3], [3, 6, 7],   # +y
    [0, 4, 2], [2, 4, 6],   # -x
    [1, 3, 5], [3, 7, 5],   # +x
])


def unit_cube() -> TriangleMesh:
    """1 m cube standing on the origin (ground contact at z=0)."""
    return TriangleMesh(_CUBE_V.copy(), _CUBE_T.copy())


def box_mesh(center, size, yaw: float = 0.0) -> TriangleMesh:
    """Axis-sized box; ``center`` is the bottom-face centre."""
    v = _CUBE_V * np.asarray(size, dtype=np.float64)
    v = v @ rotation_zyx(0.0, yaw, 0.0).T + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, _CUBE_T.copy())


def plane_mesh(half_extent: float = 10.0, z: float = 0.0, divisions: int = 1, center=(0.0, 0.0)) -> TriangleMesh:
    n = divisions + 1
    xs = np.linspace(-half_extent, half_extent, n) + center[0]
    ys = np.linspace(-half_extent, half_extent, n) + center[1]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    v = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])
    i, j = np.meshgrid(np.arange(divisions), np.arange(divisions), indexing="ij")
    a = (i * n + j).ravel()
    b, c, d = a + n, a + 1, a + n + 1
    t = np.concatenate([np.column_stack([a, b, c]), np.column_stack([c, b, d])])
    return TriangleMesh(v, t)


def icosphere(center=(0.0, 0.0, 0.0), radius: float = 1.0, subdivisions: int = 3) -> TriangleMesh:
    g = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0], [0, -1, g], [0, 1, g],
         [0, -1, -g], [0, 1, -g], [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriangleMesh(np.array(verts) * radius + np.asarray(center, dtype=np.float64), np.array(faces))


def synthetic_scene() -> TriangleMesh:
    """20 m x 20 m ground plane with three boxes and a resting unit sphere."""
    parts = [
        plane_mesh(10.0, 0.0, divisions=20),
        box_mesh((7.0, 3.5, 0.0), (4.2, 1.8, 1.5), yaw=0.3),
        box_mesh((-5.0, -4.0, 0.0), (2.0, 2.0, 2.5)),
        box_mesh((2.5, -6.0, 0.0), (1.0, 3.0, 1.0), yaw=-0.5),
        icosphere((6.0, -3.0, 1.0), 1.0, subdivisions=3),
    ]
    return TriangleMesh.concatenate(parts)


def scene_poses(n: int = 5, spacing: float = 1.0) -> list[Pose6D]:
    """Ego poses driving along +x from the origin."""
    return [Pose6D(spacing * i, 0.0, 0.0, 0.0, 0.02 * i, 0.0) for i in range(n)]


def write_sequence(out_dir, mesh: TriangleMesh, profile, vehicle_poses: Sequence[Pose6D], seed: int = 0,
                   range_noise_sigma: Optional[float] = None, encoding: str = "binary") -> Path:
    """Simulate one scan per pose and write a sequence manifest.

    Clouds are stored in the sensor frame; each manifest pose is the sensor's
    world pose. Frame ``i`` uses sub-seed ``[seed, i]``.
    """
    from .lidar import build_bvh, cast_scan

    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    if range_noise_sigma is not None:
        profile = profile.with_(range_noise_sigma=range_noise_sigma)
    bvh = build_bvh(mesh)
    entries = []
    for i, pose in enumerate(vehicle_poses):
        ss = np.random.SeedSequence([seed, i])
        scan = cast_scan(bvh, profile, pose, seed=int(ss.generate_state(1)[0]), frame="sensor")
        name = f"clouds/{i:03d}.ply"
        write_ply(scan.cloud, out / name, encoding=encoding)
        entries.append({"cloud": name, "pose": [float(x) for x in transform_to_pose(scan.sensor_to_world).as_tuple()],
                        "timestamp": 0.1 * i, "frame_index": i,
                        "source": "side" if profile.source == 1 else "top"})
    write_manifest(out / "manifest.yaml", entries)
    return out / "manifest.yaml"
