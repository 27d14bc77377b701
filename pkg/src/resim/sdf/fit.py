"""Fit a voxel SDF to a LiDAR ray bundle by gradient descent.

The objective for a mini-batch is

    mean_r w_r ln(|D_hat(r) - D(r)| + 1)
      + lambda_smooth * mean(laplacian(V)^2)
      + lambda_eik * mean((|grad V| - 1)^2)

with gradients back-propagated analytically through the renderer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import render
from .grid import SdfGrid, trilinear_stencil
from .render import RenderConfig, sample_boundaries

log = logging.getLogger(__name__)

S_MIN, S_MAX = 1.0, 1000.0
_EIK_EPS = 1e-12


class FitDivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, ray_indices: np.ndarray, detail: str):
        self.epoch = epoch
        self.batch = batch
        self.ray_indices = ray_indices
        head = ", ".join(str(i) for i in ray_indices[:8])
        super().__init__(
            f"loss became non-finite at epoch {epoch}, batch {batch} "
            f"({len(ray_indices)} rays, first: {head}): {detail}"
        )


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int = 200
    batch_size: int = 500
    lr: float = 0.02
    lr_scale: float = 0.5
    learn_scale: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_smooth: float = 0.1
    lambda_eik: float = 0.01
    smoothing_window: int = 10
    seed: int = 0
    coverage_margin: float = 0.5  # metres past the measured depth still counted as observed


@dataclass
class FitResult:
    grid: SdfGrid
    scale: float
    trace: np.ndarray            # per-epoch mean geometry loss
    total_trace: np.ndarray      # per-epoch mean objective
    smoothed: np.ndarray = field(init=False)
    window: int = 10

    def __post_init__(self):
        self.smoothed = smooth_trace(self.trace, self.window)

    def __iter__(self):
        # (grid, final s, loss trace)
        return iter((self.grid, self.scale, self.trace))


def smooth_trace(trace, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    t = np.asarray(trace, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(t)])
    idx = np.arange(1, len(t) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# --- regularizers -----------------------------------------------------------


def laplacian_term(values: np.ndarray):
    """``mean(L^2)`` over interior nodes and its gradient (unit node spacing)."""
    v = values
    c = v[1:-1, 1:-1, 1:-1]
    lap = (v[2:, 1:-1, 1:-1] + v[:-2, 1:-1, 1:-1] + v[1:-1, 2:, 1:-1] + v[1:-1, :-2, 1:-1]
           + v[1:-1, 1:-1, 2:] + v[1:-1, 1:-1, :-2] - 6.0 * c)
    n = lap.size
    if n == 0:
        return 0.0, np.zeros_like(v)
    loss = float((lap * lap).sum() / n)
    g = 2.0 * lap / n
    grad = np.zeros_like(v)
    grad[1:-1, 1:-1, 1:-1] -= 6.0 * g
    grad[2:, 1:-1, 1:-1] += g
    grad[:-2, 1:-1, 1:-1] += g
    grad[1:-1, 2:, 1:-1] += g
    grad[1:-1, :-2, 1:-1] += g
    grad[1:-1, 1:-1, 2:] += g
    grad[1:-1, 1:-1, :-2] += g
    return loss, grad


def eikonal_term(values: np.ndarray, voxel_size: float):
    """``mean((|grad V| - 1)^2)`` with forward differences per cell."""
    v = values
    base = v[:-1, :-1, :-1]
    gx = (v[1:, :-1, :-1] - base) / voxel_size
    gy = (v[:-1, 1:, :-1] - base) / voxel_size
    gz = (v[:-1, :-1, 1:] - base) / voxel_size
    norm = np.sqrt(gx * gx + gy * gy + gz * gz + _EIK_EPS)
    n = norm.size
    resid = norm - 1.0
    loss = float((resid * resid).sum() / n)
    coef = 2.0 * resid / (n * norm * voxel_size)
    grad = np.zeros_like(v)
    grad[1:, :-1, :-1] += coef * gx
    grad[:-1, 1:, :-1] += coef * gy
    grad[:-1, :-1, 1:] += coef * gz
    grad[:-1, :-1, :-1] -= coef * (gx + gy + gz)
    return loss, grad


# --- objective --------------------------------------------------------------


def batch_objective(grid: SdfGrid, values: np.ndarray, s: float, origins, directions, depths, weights,
                    bounds, opt: OptimizerConfig, need_grad: bool = True):
    """Objective of one mini-batch; returns ``(total, geometry, d_values, d_s)``."""
    fw = render.forward(grid, origins, directions, bounds, s, values)
    resid = fw.depth - depths
    geo = float((weights * np.log1p(np.abs(resid))).sum() / len(depths))
    lap_loss, lap_grad = laplacian_term(values) if opt.lambda_smooth else (0.0, None)
    eik_loss, eik_grad = eikonal_term(values, grid.voxel_size) if opt.lambda_eik else (0.0, None)
    total = geo + opt.lambda_smooth * lap_loss + opt.lambda_eik * eik_loss
    if not need_grad:
        return total, geo, None, None
    grad_depth = weights * np.sign(resid) / (np.abs(resid) + 1.0) / len(depths)
    d_values, d_s = render.backward(fw, grad_depth, s, values.size)
    d_values = d_values.reshape(values.shape)
    if lap_grad is not None:
        d_values += opt.lambda_smooth * lap_grad
    if eik_grad is not None:
        d_values += opt.lambda_eik * eik_grad
    return total, geo, d_values, d_s


def _prepare_rays(rays, t_far: float):
    origins = np.asarray(rays.origins, dtype=np.float64)
    directions = np.asarray(rays.directions, dtype=np.float64)
    depths = np.minimum(np.asarray(rays.depths, dtype=np.float64), t_far)
    weights = np.asarray(rays.weights, dtype=np.float64)
    return origins, directions, depths, weights


def batch_bounds(n: int, cfg: RenderConfig, t_far: float, seed: int, epoch: int, batch: int):
    rng = np.random.default_rng([seed, epoch, batch]) if cfg.stratified else None
    return np.asarray(sample_boundaries(n, cfg, t_far, rng))


def coverage_weights(grid: SdfGrid, origins, directions, depths, margin: float, chunk: int = 2048):
    """Sum of trilinear weights of points along each ray up to ``depth + margin``."""
    step = 0.5 * grid.voxel_size
    acc = np.zeros(grid.values.size)
    for start in range(0, len(depths), chunk):
        o = origins[start:start + chunk]
        d = directions[start:start + chunk]
        far = depths[start:start + chunk] + margin
        # only the neighbourhood of the surface matters for masking
        near = np.maximum(far - 2.0 * margin - 2.0 * grid.voxel_size, 0.0)
        n_steps = int(np.ceil((far - near).max() / step)) + 1
        t = near[:, None] + step * np.arange(n_steps)[None, :]
        ok = t <= far[:, None]
        pts = (o[:, None, :] + t[..., None] * d[:, None, :])[ok]
        idx, w, extra = trilinear_stencil(grid, pts)
        w = np.where(extra[:, None] > 0, 0.0, w)
        acc += np.bincount(idx.reshape(-1), weights=w.reshape(-1), minlength=acc.size)
    return acc.reshape(grid.values.shape)


def fit_sdf(rays, init: SdfGrid, cfg: RenderConfig = RenderConfig(),
            opt: OptimizerConfig = OptimizerConfig()) -> FitResult:
    """Minimize the depth-rendering objective over voxel values (and ``s``).

    ``rays`` is a :class:`~resim.ingest.RayBundle`. Mini-batches follow a
    per-epoch permutation drawn from ``opt.seed``, so results are
    reproducible. Raises :class:`FitDivergenceError` on non-finite loss.
    """
    n = len(rays)
    if n == 0:
        raise ValueError("ray bundle is empty")
    t_far = cfg.far(init)
    origins, directions, depths, weights = _prepare_rays(rays, t_far)
    values = np.array(init.values, dtype=np.float64)
    s = float(np.clip(cfg.sigmoid_scale, S_MIN, S_MAX))
    m, v2 = np.zeros_like(values), np.zeros_like(values)
    ms = vs = 0.0
    step = 0
    trace, total_trace = [], []
    bs = max(1, min(opt.batch_size, n))
    for epoch in range(opt.epochs):
        order = np.random.default_rng([opt.seed, epoch]).permutation(n)
        geo_sum = tot_sum = 0.0
        for b, start in enumerate(range(0, n, bs)):
            sel = order[start:start + bs]
            bounds = batch_bounds(len(sel), cfg, t_far, opt.seed, epoch, b)
            total, geo, g, gs = batch_objective(init, values, s, origins[sel], directions[sel], depths[sel],
                                                weights[sel], bounds, opt)
            if not (np.isfinite(total) and np.all(np.isfinite(g)) and np.isfinite(gs)):
                raise FitDivergenceError(epoch, b, sel, f"objective={total!r}, s={s!r}")
            geo_sum += geo * len(sel)
            tot_sum += total * len(sel)
            step += 1
            c1 = 1.0 - opt.beta1 ** step
            c2 = 1.0 - opt.beta2 ** step
            m = opt.beta1 * m + (1 - opt.beta1) * g
            v2 = opt.beta2 * v2 + (1 - opt.beta2) * g * g
            values = values - opt.lr * (m / c1) / (np.sqrt(v2 / c2) + opt.adam_eps)
            if opt.learn_scale:
                ms = opt.beta1 * ms + (1 - opt.beta1) * gs
                vs = opt.beta2 * vs + (1 - opt.beta2) * gs * gs
                s = float(np.clip(s - opt.lr_scale * (ms / c1) / (np.sqrt(vs / c2) + opt.adam_eps), S_MIN, S_MAX))
        trace.append(geo_sum / n)
        total_trace.append(tot_sum / n)
        if not np.all(np.isfinite(values)):
            raise FitDivergenceError(epoch, -1, order, "grid values became non-finite")
        log.debug("epoch %d geometry %.6f total %.6f s %.3f", epoch, trace[-1], total_trace[-1], s)
    cover = coverage_weights(init, origins, directions, depths, opt.coverage_margin)
    grid = SdfGrid(init.origin, init.voxel_size, values, cover)
    return FitResult(grid, s, np.array(trace), np.array(total_trace), window=opt.smoothing_window)


def total_objective(grid: SdfGrid, values: np.ndarray, s: float, rays, cfg: RenderConfig,
                    opt: OptimizerConfig, bounds: Optional[np.ndarray] = None, need_grad: bool = True):
    """Full-bundle objective, used for gradient checks."""
    t_far = cfg.far(grid)
    o, d, dep, w = _prepare_rays(rays, t_far)
    if bounds is None:
        bounds = batch_bounds(len(dep), cfg, t_far, opt.seed, 0, 0)
    return batch_objective(grid, values, s, o, d, dep, w, bounds, opt, need_grad)
