"""Depth volume rendering of an SDF along LiDAR rays.

Each ray is cut into ``k`` intervals by ``k + 1`` boundary depths. The SDF is
evaluated at the boundaries; interval ``i`` gets the opacity

    alpha_i = max((Phi(S_i) - Phi(S_{i+1})) / Phi(S_i), 0),  Phi(x) = 1 / (1 + exp(-s x))

and the rendered depth is ``sum_i T_i alpha_i t_i`` with ``T_i`` the product of
``(1 - alpha_j)`` for ``j < i`` and ``t_i`` the interval midpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import SdfGrid, trilinear_stencil


@dataclass(frozen=True)
class RenderConfig:
    num_samples: int = 128
    t_near: float = 0.3
    t_far: Optional[float] = None  # None: grid diagonal
    sigmoid_scale: float = 20.0
    stratified: bool = False

    def __post_init__(self):
        if self.num_samples < 2:
            raise ValueError("num_samples must be >= 2")
        if self.t_near < 0 or (self.t_far is not None and not self.t_far > self.t_near):
            raise ValueError("need 0 <= t_near < t_far")
        if not self.sigmoid_scale > 0:
            raise ValueError("sigmoid_scale must be positive")

    def far(self, grid: SdfGrid) -> float:
        far = self.t_far if self.t_far is not None else grid.diagonal
        if not far > self.t_near:
            raise ValueError(f"t_far {far} must exceed t_near {self.t_near}")
        return far


@dataclass(frozen=True)
class RaySampleSet:
    depths: np.ndarray         # interval midpoints, (k,)
    boundaries: np.ndarray     # (k + 1,)
    sdf_values: np.ndarray     # at boundaries, (k + 1,)
    alphas: np.ndarray         # (k,)
    transmittances: np.ndarray  # T_1 .. T_{k+1}, (k + 1,)
    rendered_depth: float
    opacity: float


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    return np.exp(log_sigmoid(x))


def alpha_from_sdf(s_i, s_next, s: float):
    """Opacity of the interval between two consecutive SDF samples."""
    if not s > 0:
        raise ValueError("sigmoid scale must be positive")
    log_ratio = (log_sigmoid(s * np.asarray(s_next, dtype=np.float64))
                 - log_sigmoid(s * np.asarray(s_i, dtype=np.float64)))
    out = 1.0 - np.exp(np.minimum(log_ratio, 0.0))
    return float(out) if np.ndim(out) == 0 else out


def geometry_loss(rendered, measured, weight=1.0):
    """Weighted logarithmic L1 depth loss ``w * ln(|rendered - measured| + 1)``."""
    r = np.asarray(rendered, dtype=np.float64)
    m = np.asarray(measured, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(m)) and np.all(np.isfinite(w))):
        raise ValueError("geometry_loss inputs must be finite")
    if np.any(w <= 0):
        raise ValueError("weight must be positive")
    out = w * np.log1p(np.abs(r - m))
    return float(out) if np.ndim(out) == 0 else out


def sample_boundaries(n_rays: int, cfg: RenderConfig, t_far: float, rng: Optional[np.random.Generator] = None):
    """Boundary depths of shape (n_rays, k + 1), sorted along each ray."""
    k = cfg.num_samples
    if cfg.stratified:
        if rng is None:
            raise ValueError("stratified sampling needs a generator")
        step = (t_far - cfg.t_near) / (k + 1)
        jitter = rng.random((n_rays, k + 1))
        return cfg.t_near + (np.arange(k + 1) + jitter) * step
    return np.broadcast_to(np.linspace(cfg.t_near, t_far, k + 1), (n_rays, k + 1))


@dataclass
class _Forward:
    stencil_idx: np.ndarray
    stencil_w: np.ndarray
    sdf: np.ndarray
    ratio: np.ndarray
    active: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    mids: np.ndarray
    depth: np.ndarray


def forward(grid: SdfGrid, origins, directions, bounds, s: float, values: Optional[np.ndarray] = None) -> _Forward:
    """Batched rendering keeping the intermediates needed by :func:`backward`."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    n, kp1 = bounds.shape
    pts = o[:, None, :] + bounds[..., None] * d[:, None, :]
    idx, w, extra = trilinear_stencil(grid, pts.reshape(-1, 3))
    flat = (grid.values if values is None else values).reshape(-1)
    sdf = ((flat[idx] * w).sum(axis=1) + extra).reshape(n, kp1)
    a, b = sdf[:, :-1], sdf[:, 1:]
    log_ratio = log_sigmoid(s * b) - log_sigmoid(s * a)
    # a rising SDF (back face) has log_ratio > 0 and contributes no opacity
    active = log_ratio <= 0.0
    ratio = np.exp(np.minimum(log_ratio, 0.0))
    alpha = 1.0 - ratio
    trans = np.ones((n, kp1))
    trans[:, 1:] = np.cumprod(1.0 - alpha, axis=1)
    mids = 0.5 * (bounds[:, :-1] + bounds[:, 1:])
    depth = (trans[:, :-1] * alpha * mids).sum(axis=1)
    return _Forward(idx, w, sdf, ratio, active, alpha, trans, mids, depth)


def backward(fw: _Forward, grad_depth: np.ndarray, s: float, n_values: int):
    """Gradients of ``sum(grad_depth * depth)`` w.r.t. grid values and ``s``."""
    n, k = fw.alpha.shape
    # R_i: depth rendered from interval i onward with transmittance reset to 1.
    rest = np.zeros(n)
    d_alpha = np.empty((n, k))
    for i in range(k - 1, -1, -1):
        d_alpha[:, i] = fw.trans[:, i] * (fw.mids[:, i] - rest)
        rest = fw.alpha[:, i] * fw.mids[:, i] + (1.0 - fw.alpha[:, i]) * rest
    d_alpha *= grad_depth[:, None]
    # alpha = 1 - ratio on active intervals; ratio = Phi(s b) / Phi(s a)
    g = np.where(fw.active, -d_alpha * fw.ratio, 0.0)  # d/d log(ratio)
    a, b = fw.sdf[:, :-1], fw.sdf[:, 1:]
    sig_na = sigmoid(-s * a)
    sig_nb = sigmoid(-s * b)
    d_sdf = np.zeros((n, k + 1))
    d_sdf[:, :-1] += g * (-s * sig_na)
    d_sdf[:, 1:] += g * (s * sig_nb)
    d_s = float((g * (b * sig_nb - a * sig_na)).sum())
    contrib = (d_sdf.reshape(-1)[:, None] * fw.stencil_w).reshape(-1)
    d_values = np.bincount(fw.stencil_idx.reshape(-1), weights=contrib, minlength=n_values)
    return d_values, d_s


def render_depth(grid: SdfGrid, ray, cfg: RenderConfig, rng: Optional[np.random.Generator] = None,
                 s: Optional[float] = None) -> RaySampleSet:
    """Render one ray (anything with ``origin`` and ``direction``)."""
    scale = cfg.sigmoid_scale if s is None else s
    bounds = sample_boundaries(1, cfg, cfg.far(grid), rng)
    fw = forward(grid, np.asarray(ray.origin).reshape(1, 3), np.asarray(ray.direction).reshape(1, 3),
                 np.asarray(bounds), scale)
    return RaySampleSet(
        depths=fw.mids[0], boundaries=np.array(bounds[0]), sdf_values=fw.sdf[0], alphas=fw.alpha[0],
        transmittances=fw.trans[0], rendered_depth=float(fw.depth[0]),
        opacity=float(1.0 - fw.trans[0, -1]),
    )


def render_depths(grid: SdfGrid, origins, directions, cfg: RenderConfig,
                  rng: Optional[np.random.Generator] = None, chunk: int = 4096):
    """Rendered depth and opacity for many rays."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    far = cfg.far(grid)
    depth = np.empty(len(o))
    opacity = np.empty(len(o))
    for start in range(0, len(o), chunk):
        sl = slice(start, start + chunk)
        bounds = np.asarray(sample_boundaries(len(o[sl]), cfg, far, rng))
        fw = forward(grid, o[sl], d[sl], bounds, cfg.sigmoid_scale)
        depth[sl] = fw.depth
        opacity[sl] = 1.0 - fw.trans[:, -1]
    return depth, opacity


def sigmoid_scalar(x: float, s: float) -> float:
    return 1.0 / (1.0 + math.exp(-s * x))
