"""Voxel-grid signed distance field with trilinear interpolation.

Values live on grid nodes: node ``(i, j, k)`` sits at
``origin + voxel_size * (i, j, k)``. Sign convention is positive outside,
negative inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

SIGN_TAG = "positive-outside"


@dataclass(frozen=True)
class SdfGrid:
    origin: np.ndarray
    voxel_size: float
    values: np.ndarray  # shape (nx, ny, nz), indexed [i, j, k]
    weights: Optional[np.ndarray] = None  # observation weights; 0 marks unobserved nodes

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise ValueError(f"grid needs at least 2 nodes per axis, got shape {vals.shape}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "values", vals)
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float64)
            if w.shape != vals.shape:
                raise ValueError("weights must match values shape")
            object.__setattr__(self, "weights", w)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * (np.array(self.dims) - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.origin))

    def node_positions(self) -> np.ndarray:
        """All node coordinates, shape (nx, ny, nz, 3)."""
        axes = [self.origin[a] + self.voxel_size * np.arange(n) for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_values(self, values, weights=None) -> "SdfGrid":
        return SdfGrid(self.origin, self.voxel_size, values, self.weights if weights is None else weights)

    @classmethod
    def constant(cls, origin, voxel_size, dims, value: float) -> "SdfGrid":
        return cls(origin, voxel_size, np.full(tuple(int(d) for d in dims), float(value)))

    @classmethod
    def from_function(cls, origin, voxel_size, dims, fn) -> "SdfGrid":
        """Fill nodes with ``fn(points[..., 3]) -> values``."""
        g = cls.constant(origin, voxel_size, dims, 0.0)
        return g.with_values(fn(g.node_positions()))


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float, padding: float = 0.0) -> "GridSpec":
        lo = np.asarray(lo, dtype=np.float64) - padding
        hi = np.asarray(hi, dtype=np.float64) + padding
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 2)
        return cls(lo, float(voxel_size), tuple(int(d) for d in dims))

    def empty(self, value: float = 0.0) -> SdfGrid:
        return SdfGrid.constant(self.origin, self.voxel_size, self.dims, value)


def trilinear_stencil(grid: SdfGrid, points: np.ndarray):
    """Corner indices and weights for trilinear lookups.

    Returns ``(flat_index (N, 8), weight (N, 8), extra (N,))`` where
    ``extra`` is the distance from each point to the grid box (zero inside).
    Points outside the box are clamped onto it; the interpolated value plus
    ``extra`` is the extrapolated SDF.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.array(grid.dims)
    u = (p - grid.origin) / grid.voxel_size
    uc = np.clip(u, 0.0, dims - 1)
    extra = np.linalg.norm(u - uc, axis=1) * grid.voxel_size
    i0 = np.minimum(np.floor(uc).astype(np.int64), dims - 2)
    f = uc - i0
    nx, ny, nz = grid.dims
    idx = np.empty((p.shape[0], 8), dtype=np.int64)
    w = np.empty((p.shape[0], 8))
    c = 0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                idx[:, c] = ((i0[:, 0] + dx) * ny + (i0[:, 1] + dy)) * nz + (i0[:, 2] + dz)
                w[:, c] = wx * wy * wz
                c += 1
    return idx, w, extra


def sample_sdf_many(grid: SdfGrid, points, return_flags: bool = False):
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    idx, w, extra = trilinear_stencil(grid, pts)
    vals = (grid.values.reshape(-1)[idx] * w).sum(axis=1) + extra
    vals = vals.reshape(shape)
    if return_flags:
        return vals, (extra > 0).reshape(shape)
    return vals


def sample_sdf(grid: SdfGrid, x) -> float:
    """SDF at a single point; outside the grid it extends by distance to the box."""
    return float(sample_sdf_many(grid, np.asarray(x, dtype=np.float64).reshape(1, 3))[0])


def is_extrapolated(grid: SdfGrid, x) -> bool:
    return bool(sample_sdf_many(grid, np.asarray(x, dtype=np.float64).reshape(1, 3), True)[1][0])


# --- serialization ----------------------------------------------------------

_MAGIC = "SDFGRID 1"


def save_grid(grid: SdfGrid, path) -> None:
    """Text header then little-endian float64 values, x varying fastest.

    When observation weights are present they follow the values in the
    same layout.
    """
    nx, ny, nz = grid.dims
    ox, oy, oz = (float(c) for c in grid.origin)
    header = (
        f"{_MAGIC}\n"
        f"origin {ox!r} {oy!r} {oz!r}\n"
        f"voxel_size {grid.voxel_size!r}\n"
        f"dims {nx} {ny} {nz}\n"
        f"sign {SIGN_TAG}\n"
        f"weights {int(grid.weights is not None)}\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(grid.values, dtype="<f8").ravel(order="F").tobytes())
        if grid.weights is not None:
            fh.write(np.asarray(grid.weights, dtype="<f8").ravel(order="F").tobytes())


def load_grid(path) -> SdfGrid:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not an SDF grid file")
    fields = {}
    for line in data[:end].decode("ascii").splitlines()[1:]:
        key, *rest = line.split()
        fields[key] = rest
    if fields.get("sign", [None])[0] != SIGN_TAG:
        raise ValueError(f"{path}: unsupported sign convention {fields.get('sign')}")
    dims = tuple(int(d) for d in fields["dims"])
    n = math.prod(dims)
    body = np.frombuffer(data, dtype="<f8", offset=end + len(b"end_header\n"))
    values = body[:n].reshape(dims, order="F").astype(np.float64)
    weights = None
    if int(fields.get("weights", ["0"])[0]):
        weights = body[n:2 * n].reshape(dims, order="F").astype(np.float64)
    return SdfGrid([float(v) for v in fields["origin"]], float(fields["voxel_size"][0]), values, weights)
