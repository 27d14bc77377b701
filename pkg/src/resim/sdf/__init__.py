from .fit import FitDivergenceError, FitResult, OptimizerConfig, fit_sdf, smooth_trace
from .grid import GridSpec, SdfGrid, load_grid, sample_sdf, sample_sdf_many, save_grid
from .mesh import extract_mesh
from .render import RaySampleSet, RenderConfig, alpha_from_sdf, geometry_loss, render_depth, render_depths
from .tsdf import TsdfConfig, tsdf_fuse, tsdf_fuse_rays

__all__ = [
    "FitDivergenceError", "FitResult", "GridSpec", "OptimizerConfig", "RaySampleSet", "RenderConfig",
    "SdfGrid", "TsdfConfig", "alpha_from_sdf", "extract_mesh", "fit_sdf", "geometry_loss", "load_grid",
    "render_depth", "render_depths", "sample_sdf", "sample_sdf_many", "save_grid", "smooth_trace",
    "tsdf_fuse", "tsdf_fuse_rays",
]
