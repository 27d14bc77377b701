"""Iso-surface extraction from an :class:`SdfGrid`."""

from __future__ import annotations

import warnings

import numpy as np
from skimage.measure import marching_cubes

from ..geometry import TriangleMesh
from .grid import SdfGrid


def extract_mesh(grid: SdfGrid, iso: float = 0.0, use_weights: bool = True) -> TriangleMesh:
    """Marching cubes at ``iso``; triangle normals point toward larger SDF.

    When the grid carries observation weights, triangles in cells touching
    an unobserved node (weight 0) are dropped, so unobserved free space does
    not produce phantom surfaces.
    """
    vals = grid.values
    if not (vals.min() < iso < vals.max()):
        warnings.warn("grid has no sign change at the iso level; returning an empty mesh", stacklevel=2)
        return TriangleMesh(np.zeros((0, 3)))
    verts, faces, _, _ = marching_cubes(vals, level=iso, gradient_direction="ascent",
                                        allow_degenerate=False)
    verts = verts.astype(np.float64)
    # skimage winds triangles toward the lower level; reverse so normals face +SDF
    faces = faces[:, ::-1].astype(np.int64)
    if use_weights and grid.weights is not None and len(faces):
        cell = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
        cell = np.minimum(np.maximum(cell, 0), np.array(grid.dims) - 2)
        observed = grid.weights > 0
        ok = np.ones(len(faces), dtype=bool)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    ok &= observed[cell[:, 0] + dx, cell[:, 1] + dy, cell[:, 2] + dz]
        faces = faces[ok]
    mesh = TriangleMesh(grid.origin + verts * grid.voxel_size, faces)
    mesh = mesh.without_degenerate()
    if mesh.is_empty:
        warnings.warn("no surface survived extraction", stacklevel=2)
    return mesh
