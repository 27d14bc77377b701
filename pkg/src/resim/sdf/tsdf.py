"""Truncated signed distance fusion of LiDAR rays (explicit baseline)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .grid import GridSpec, SdfGrid


@dataclass(frozen=True)
class TsdfConfig:
    truncation_distance: float = 0.3
    max_weight: float = 64.0


@njit(cache=True)
def _fuse(values, weights, origin, voxel, origins, dirs, depths, trunc, max_w):
    nx, ny, nz = values.shape
    step = voxel / 8.0
    for r in range(depths.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        depth = depths[r]
        t = max(depth - trunc - voxel, 0.0)
        t_end = depth + trunc + voxel
        last = -1
        while t <= t_end:
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            i = int(math.floor((px - origin[0]) / voxel + 0.5))
            j = int(math.floor((py - origin[1]) / voxel + 0.5))
            k = int(math.floor((pz - origin[2]) / voxel + 0.5))
            t += step
            if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
                continue
            flat = (i * ny + j) * nz + k
            if flat == last:
                continue
            last = flat
            cx = origin[0] + i * voxel
            cy = origin[1] + j * voxel
            cz = origin[2] + k * voxel
            # clamp rather than skip behind the hit: for grazing rays the projective distance of the
            # node layer just under a surface is far below -trunc, and skipping it leaves that layer
            # unobserved, which tears holes in the extracted mesh
            sd = min(max(depth - ((cx - ox) * dx + (cy - oy) * dy + (cz - oz) * dz), -trunc), trunc)
            w = weights[i, j, k]
            values[i, j, k] = (values[i, j, k] * w + sd) / (w + 1.0)
            weights[i, j, k] = min(w + 1.0, max_w)


def tsdf_fuse_rays(rays, spec: GridSpec, cfg: TsdfConfig = TsdfConfig()) -> SdfGrid:
    """Fuse a ray bundle (origins, unit directions, measured depths) into a grid."""
    if cfg.truncation_distance < 2 * spec.voxel_size:
        warnings.warn("truncation distance below two voxels; surfaces may break up", stacklevel=2)
    values = np.full(spec.dims, float(cfg.truncation_distance))
    weights = np.zeros(spec.dims)
    if len(rays):
        _fuse(values, weights, np.asarray(spec.origin, dtype=np.float64), float(spec.voxel_size),
              np.ascontiguousarray(rays.origins, dtype=np.float64),
              np.ascontiguousarray(rays.directions, dtype=np.float64),
              np.ascontiguousarray(rays.depths, dtype=np.float64),
              float(cfg.truncation_distance), float(cfg.max_weight))
    return SdfGrid(spec.origin, spec.voxel_size, values, weights)


def tsdf_fuse(frames, spec: GridSpec, cfg: TsdfConfig = TsdfConfig(), transform=None) -> SdfGrid:
    """Fuse registered frames; coordinates are those of frame 0 (then ``transform``)."""
    from ..ingest import RayBundle, build_ray_bundle

    if not frames:
        empty = RayBundle(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, np.uint8))
        return tsdf_fuse_rays(empty, spec, cfg)
    return tsdf_fuse_rays(build_ray_bundle(frames, 1.0, transform=transform), spec, cfg)
