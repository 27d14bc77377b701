"""Reconstruct, simulate and evaluate stages driven by a :class:`PipelineConfig`.

Each command gathers and validates all inputs before creating any output, so
a bad config leaves the output directory untouched.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import STAGE_INGEST, STAGE_SIMULATE, ConfigError, PipelineConfig, stage_seed
from .geometry import PointCloud, Pose6D, RigidTransform, TriangleMesh, compose, pose_to_transform, transform_to_pose
from .ingest import (
    Frame,
    RayBundle,
    SequenceManifest,
    build_ray_bundle,
    load_manifest,
    outlier_mask,
    reference_transforms,
    remove_dynamic_points,
    write_manifest,
)
from .lidar import build_bvh, cast_scan, intersect
from .metrics import chamfer, rank_sequences, rmse_depth, rmse_depth_unsquared, score_table
from .ply import read_mesh, write_ply
from .replay import (
    EgoTrack,
    compose_frame,
    default_library,
    ego_pose_at,
    export_labels,
    load_asset_library,
    load_size_map,
    read_ego_track,
    read_tracks,
    replay_frame,
)
from .sdf import GridSpec, SdfGrid, extract_mesh, fit_sdf, save_grid, tsdf_fuse_rays

log = logging.getLogger(__name__)


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def mount_transform(cfg: PipelineConfig) -> RigidTransform:
    """Sensor-to-ego map of the source sensor (identity without a source profile)."""
    if cfg.source_profile is None:
        return RigidTransform.identity()
    return pose_to_transform(cfg.source_profile.mount)


def scene_transforms(frames: Sequence[Frame], mount: RigidTransform) -> list[RigidTransform]:
    """Per-frame sensor-to-scene maps; the scene origin is the first-frame ego pose."""
    return [compose(mount, tf) for tf in reference_transforms(frames)]


# --- reconstruct ------------------------------------------------------------


@dataclass
class IngestResult:
    frames: list[Frame]
    cloud: PointCloud          # registered, filtered, scene coordinates
    rays: RayBundle
    removed_dynamic: int
    removed_outliers: int


def ingest_sequence(manifest: SequenceManifest, cfg: PipelineConfig) -> IngestResult:
    raw, labels = manifest.load()
    frames, removed = [], 0
    for f, boxes in zip(raw, labels):
        cloud = remove_dynamic_points(f, boxes)
        removed += len(f.cloud) - len(cloud)
        frames.append(Frame(cloud, f.sensor_pose, f.timestamp, f.frame_index, f.source))
    mount = mount_transform(cfg)
    tfs = scene_transforms(frames, mount)
    registered = PointCloud.concatenate([f.cloud.transformed(tf) for f, tf in zip(frames, tfs)])
    keep = outlier_mask(registered, cfg.ingest.outlier_k, cfg.ingest.outlier_sigma)
    rays = build_ray_bundle(frames, cfg.ingest.side_weight, keep, cfg.ingest.max_range, transform=mount)
    return IngestResult(frames, registered.select(keep), rays, removed, int((~keep).sum()))


def grid_spec(cfg: PipelineConfig, cloud: PointCloud, voxel: Optional[float] = None) -> GridSpec:
    voxel = voxel or cfg.grid.voxel_size
    if cfg.grid.origin is not None:
        return GridSpec(np.asarray(cfg.grid.origin, dtype=np.float64), float(voxel), tuple(cfg.grid.dims))
    if len(cloud) == 0:
        raise ConfigError("manifest", "no points left after ingest; cannot derive grid bounds")
    # half-voxel offset: a flat surface at the data extreme (the ground) would otherwise sit exactly on
    # a node layer, where near-zero values of either sign give a ragged mesh
    lo = cloud.points.min(axis=0) - 0.5 * voxel
    return GridSpec.from_bounds(lo, cloud.points.max(axis=0), voxel, cfg.grid.padding)


def raycast_points(mesh: TriangleMesh, rays: RayBundle) -> np.ndarray:
    """Depth of ``mesh`` along every ray (``inf`` on a miss)."""
    if mesh.is_empty:
        return np.full(len(rays), np.inf)
    t, _ = intersect(build_bvh(mesh), rays.origins, rays.directions)
    return t


@dataclass
class ReconstructOutput:
    method: str
    grid: SdfGrid
    mesh: TriangleMesh
    trace: Optional[np.ndarray] = None
    smoothed: Optional[np.ndarray] = None
    total: Optional[np.ndarray] = None
    scale: Optional[float] = None


def reconstruct(cfg: PipelineConfig, ing: IngestResult) -> list[ReconstructOutput]:
    methods = ("tsdf", "volume-fit") if cfg.method == "both" else (cfg.method,)
    outputs = []
    for method in methods:
        if method == "tsdf":
            spec = grid_spec(cfg, ing.cloud)
            grid = tsdf_fuse_rays(ing.rays, spec, cfg.tsdf)
            outputs.append(ReconstructOutput(method, grid, extract_mesh(grid)))
        else:
            spec = grid_spec(cfg, ing.cloud, cfg.volume_fit.voxel_size)
            rays = ing.rays
            if len(rays) > cfg.volume_fit.max_rays:
                rng = np.random.default_rng(stage_seed(cfg.seed, STAGE_INGEST))
                rays = rays[np.sort(rng.choice(len(rays), cfg.volume_fit.max_rays, replace=False))]
            init = spec.empty(cfg.volume_fit.init_value)
            res = fit_sdf(rays, init, cfg.render, cfg.optimizer)
            outputs.append(ReconstructOutput(method, res.grid, extract_mesh(res.grid), res.trace, res.smoothed,
                                             res.total_trace, res.scale))
    return outputs


def cmd_reconstruct(cfg: PipelineConfig) -> dict[str, Path]:
    if cfg.manifest is None:
        raise ConfigError("manifest", "reconstruct needs a sequence manifest")
    ing = ingest_sequence(cfg.manifest, cfg)
    if len(ing.rays) == 0:
        raise ConfigError("manifest", "sequence has no usable points")
    log.info("ingest: %d rays, %d dynamic and %d outlier points removed",
             len(ing.rays), ing.removed_dynamic, ing.removed_outliers)
    results = reconstruct(cfg, ing)

    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    summary = []
    for r in results:
        gp, mp = out / f"grid_{r.method}.sdf", out / f"mesh_{r.method}.ply"
        save_grid(r.grid, gp)
        write_ply(r.mesh, mp)
        written[f"grid_{r.method}"], written[f"mesh_{r.method}"] = gp, mp
        if r.trace is not None:
            tp = out / f"trace_{r.method}.csv"
            rows = [(i, float(a), float(b), float(c)) for i, (a, b, c) in enumerate(zip(r.trace, r.smoothed, r.total))]
            tp.write_text(_csv(rows, ["epoch", "geometry_loss", "smoothed", "objective"]))
            written[f"trace_{r.method}"] = tp
        summary.append((r.method, r.mesh.n_vertices, r.mesh.n_triangles, float(r.grid.voxel_size),
                        "x".join(str(d) for d in r.grid.dims)))
    sp = out / "reconstruct.csv"
    sp.write_text(_csv(summary, ["method", "vertices", "triangles", "voxel_size", "dims"]))
    written["summary"] = sp

    if len(results) == 2:
        pts = []
        for r in results:
            t = raycast_points(r.mesh, ing.rays)
            hit = np.isfinite(t)
            pts.append(ing.rays.origins[hit] + t[hit, None] * ing.rays.directions[hit])
        if all(len(p) for p in pts):
            cd = chamfer(pts[0], pts[1], cfg.truncation_fraction)
            line = ("tsdf", "volume-fit", cd.forward_term, cd.backward_term, cd.total)
        else:
            line = ("tsdf", "volume-fit", math.nan, math.nan, math.nan)
        cp = out / "comparison.csv"
        cp.write_text(_csv([line], ["mesh_a", "mesh_b", "forward", "backward", "cd"]))
        written["comparison"] = cp
    return written


# --- simulate ---------------------------------------------------------------


def manifest_ego_track(manifest: SequenceManifest, mount: RigidTransform) -> EgoTrack:
    """Ego poses relative to the first frame, recovered from sensor poses and the mount."""
    s0_inv = pose_to_transform(manifest.entries[0].pose).inverse()
    m_inv = mount.inverse()
    poses = {}
    for k, e in enumerate(manifest.entries):
        rel = compose(compose(mount, compose(s0_inv, pose_to_transform(e.pose))), m_inv)
        poses[k] = transform_to_pose(rel)
    return EgoTrack(poses)


def default_mesh_path(cfg: PipelineConfig) -> Path:
    if cfg.mesh is not None:
        return cfg.mesh
    method = "tsdf" if cfg.method == "both" else cfg.method
    return cfg.output / f"mesh_{method}.ply"


def _load(what: str, fn, path):
    try:
        return fn(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(what, str(exc)) from None


def cmd_simulate(cfg: PipelineConfig) -> dict[str, Path]:
    mesh_path = default_mesh_path(cfg)
    if not mesh_path.is_file():
        raise ConfigError("mesh", f"mesh not found: {mesh_path} (run reconstruct or set 'mesh')")
    background = _load("mesh", read_mesh, mesh_path)
    targets = cfg.target_profiles or ((cfg.source_profile,) if cfg.source_profile else ())
    if not targets:
        raise ConfigError("target_profiles", "no sensor profile given (set target_profiles or pass --profile)")
    rp = cfg.replay
    if rp.ego_track is not None:
        ego = _load("replay.ego_track", read_ego_track, rp.ego_track)
    elif cfg.manifest is not None:
        ego = manifest_ego_track(cfg.manifest, mount_transform(cfg))
    else:
        ego = EgoTrack({0: Pose6D()})
    objects = _load("replay.object_tracks", read_tracks, rp.object_tracks) if rp.object_tracks else []
    library = _load("replay.assets", load_asset_library, rp.assets) if rp.assets else default_library()
    size_map = _load("replay.size_map", load_size_map, rp.size_map) if rp.size_map else None

    frames = ego.frames
    scenes = []
    for t in frames:
        try:
            placements = replay_frame(objects, ego, t, library, size_map, rp.composition)
        except LookupError as exc:
            raise ConfigError("replay", str(exc)) from None
        scenes.append((t, ego_pose_at(ego, t, rp.composition), placements))
    if background.is_empty and not any(p for _, _, p in scenes):
        raise ConfigError("mesh", f"{mesh_path} has no triangles and no objects are replayed")

    out = cfg.output
    written = {}
    rows = []
    bg_bvh = build_bvh(background) if not background.is_empty else None
    names = _unique_names(targets)
    for pi, (profile, pname) in enumerate(zip(targets, names)):
        pdir = out / "sim" / pname
        (pdir / "clouds").mkdir(parents=True, exist_ok=True)
        (pdir / "labels").mkdir(parents=True, exist_ok=True)
        entries = []
        for t, vehicle, placements in scenes:
            bvh = build_bvh(compose_frame(background, placements)) if placements else bg_bvh
            scan = cast_scan(bvh, profile, vehicle, seed=stage_seed(cfg.seed, STAGE_SIMULATE, pi, t), frame="sensor")
            cloud_rel, label_rel = f"clouds/{t:06d}.ply", f"labels/{t:06d}.txt"
            write_ply(scan.cloud, pdir / cloud_rel)
            (pdir / label_rel).write_text("\n".join(export_labels(placements, t, scan.sensor_to_world)) + "\n")
            entries.append({"cloud": cloud_rel, "pose": [float(v) for v in transform_to_pose(scan.sensor_to_world).as_tuple()],
                            "frame_index": int(t), "source": "side" if profile.source == 1 else "top"})
            rows.append((pname, t, len(scan.cloud), scan.dropped_count, scan.miss_count, len(placements)))
        write_manifest(pdir / "manifest.yaml", entries)
        written[f"sim_{pname}"] = pdir / "manifest.yaml"
    sp = out / "simulate.csv"
    sp.write_text(_csv(rows, ["profile", "frame", "points", "dropped", "misses", "objects"]))
    written["summary"] = sp
    return written


def _unique_names(profiles) -> list[str]:
    names, seen = [], {}
    for p in profiles:
        n = p.name
        seen[n] = seen.get(n, 0) + 1
        names.append(n if seen[n] == 1 else f"{n}-{seen[n]}")
    return names


# --- evaluate ---------------------------------------------------------------


@dataclass
class FrameScore:
    sequence_id: str
    frame: int
    n_rays: int
    n_matched: int
    rmse: float
    rmse_unsquared: float
    cd: float


@dataclass
class SequenceScore:
    sequence_id: str
    frames: list[FrameScore]
    rmse: float
    rmse_unsquared: float
    cd: float


def _score(seq_id, frame, n_rays, rendered, measured, sim_pts, real_pts, frac) -> tuple[FrameScore, bool]:
    ok = len(sim_pts) > 0 and len(real_pts) > 0
    rmse = rmse_depth(rendered, measured) if len(rendered) else math.nan
    rmse_u = rmse_depth_unsquared(rendered, measured) if len(rendered) else math.nan
    cd = chamfer(sim_pts, real_pts, frac).total if ok else math.nan
    return FrameScore(seq_id, frame, n_rays, len(rendered), rmse, rmse_u, cd), ok


def evaluate_against_mesh(seq_id: str, manifest: SequenceManifest, mesh: TriangleMesh,
                          cfg: PipelineConfig) -> SequenceScore:
    """Re-raycast every real ray against ``mesh`` and compare with the real returns."""
    frames, _ = manifest.load()
    tfs = scene_transforms(frames, mount_transform(cfg))
    bvh = build_bvh(mesh) if not mesh.is_empty else None
    scores, all_r, all_m, all_s, all_p = [], [], [], [], []
    for f, tf in zip(frames, tfs):
        real = tf.apply(f.cloud.points)
        origin = tf.translation
        delta = real - origin
        depth = np.linalg.norm(delta, axis=1)
        ok = depth > 0
        real, delta, depth = real[ok], delta[ok], depth[ok]
        dirs = delta / depth[:, None]
        if bvh is None:
            t = np.full(len(depth), np.inf)
        else:
            t, _ = intersect(bvh, np.broadcast_to(origin, dirs.shape), dirs)
        hit = np.isfinite(t)
        sim = origin + t[hit, None] * dirs[hit]
        fs, _ = _score(seq_id, f.frame_index, len(depth), t[hit], depth[hit], sim, real, cfg.truncation_fraction)
        scores.append(fs)
        all_r.append(t[hit]); all_m.append(depth[hit]); all_s.append(sim); all_p.append(real)
    return _aggregate(seq_id, scores, all_r, all_m, all_s, all_p, cfg.truncation_fraction)


def _aggregate(seq_id, scores, all_r, all_m, all_s, all_p, frac) -> SequenceScore:
    r, m = np.concatenate(all_r), np.concatenate(all_m)
    s, p = np.concatenate(all_s).reshape(-1, 3), np.concatenate(all_p).reshape(-1, 3)
    if len(s) == 0 or len(p) == 0:
        raise ConfigError(seq_id, "no paired returns between the real and simulated data")
    agg, _ = _score(seq_id, -1, len(m), r, m, s, p, frac)
    return SequenceScore(seq_id, scores, agg.rmse, agg.rmse_unsquared, agg.cd)


def _ray_keys(cloud: PointCloud) -> Optional[np.ndarray]:
    if cloud.beam_id is None or cloud.azimuth is None:
        return None
    az = np.round(cloud.azimuth * 1e6).astype(np.int64)
    return cloud.beam_id.astype(np.int64) * (1 << 40) + az


def evaluate_scan_pairs(seq_id: str, real: SequenceManifest, sim: SequenceManifest, frac: float) -> SequenceScore:
    """Pair frames by index and returns by (beam_id, azimuth)."""
    real_frames = {f.frame_index: f for f in real.load()[0]}
    sim_frames = {f.frame_index: f for f in sim.load()[0]}
    common = sorted(set(real_frames) & set(sim_frames))
    if not common:
        raise ConfigError("--sim", "no frame indices in common with --real")
    scores, all_r, all_m, all_s, all_p = [], [], [], [], []
    for k in common:
        fr, fs = real_frames[k], sim_frames[k]
        pr = fr.cloud.transformed(fr.sensor_transform()).points
        ps = fs.cloud.transformed(fs.sensor_transform()).points
        kr, ks = _ray_keys(fr.cloud), _ray_keys(fs.cloud)
        if kr is None or ks is None:
            rendered = measured = np.zeros(0)
        else:
            _, ir, is_ = np.intersect1d(kr, ks, assume_unique=False, return_indices=True)
            rr = fr.cloud.range if fr.cloud.range is not None else np.linalg.norm(fr.cloud.points, axis=1)
            rs = fs.cloud.range if fs.cloud.range is not None else np.linalg.norm(fs.cloud.points, axis=1)
            rendered, measured = rs[is_], rr[ir]
        score, _ = _score(seq_id, k, len(fr.cloud), rendered, measured, ps, pr, frac)
        scores.append(score)
        all_r.append(rendered); all_m.append(measured); all_s.append(ps); all_p.append(pr)
    return _aggregate(seq_id, scores, all_r, all_m, all_s, all_p, frac)


def cmd_evaluate(cfg: PipelineConfig, real: Optional[Path] = None, sim: Optional[Path] = None,
                 detail: bool = False) -> dict[str, Path]:
    jobs = []
    if real is not None or sim is not None:
        if real is None or sim is None:
            raise ConfigError("--real/--sim", "give both --real and --sim")
        rm, sm = load_manifest(real, "--real"), load_manifest(sim, "--sim")
        jobs.append(("pair", Path(real).parent.name or "sequence", rm, sm))
    elif cfg.eval_sequences:
        for s in cfg.eval_sequences:
            if not s.mesh.is_file():
                raise ConfigError(f"evaluate.sequences[{s.sequence_id}].mesh", f"mesh not found: {s.mesh}")
            jobs.append(("mesh", s.sequence_id, load_manifest(s.manifest), _load("mesh", read_mesh, s.mesh)))
    else:
        if cfg.manifest is None:
            raise ConfigError("manifest", "evaluate needs a manifest, evaluate.sequences or --real/--sim")
        mp = default_mesh_path(cfg)
        if not mp.is_file():
            raise ConfigError("mesh", f"mesh not found: {mp} (run reconstruct or set 'mesh')")
        seq_id = cfg.manifest_path.parent.name or "sequence"
        jobs.append(("mesh", seq_id, cfg.manifest, _load("mesh", read_mesh, mp)))

    results = []
    for kind, seq_id, a, b in jobs:
        if kind == "pair":
            results.append(evaluate_scan_pairs(seq_id, a, b, cfg.truncation_fraction))
        else:
            results.append(evaluate_against_mesh(seq_id, a, b, cfg))

    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    frame_rows = []
    for r in results:
        for f in r.frames:
            row = [f.sequence_id, f.frame, f.n_rays, f.n_matched, f.rmse, f.cd]
            frame_rows.append(row + [f.rmse_unsquared] if detail else row)
        row = [r.sequence_id, "all", sum(f.n_rays for f in r.frames), sum(f.n_matched for f in r.frames), r.rmse, r.cd]
        frame_rows.append(row + [r.rmse_unsquared] if detail else row)
    header = ["sequence_id", "frame", "rays", "matched", "rmse", "cd"] + (["rmse_unsquared"] if detail else [])
    fp = out / "frame_scores.csv"
    fp.write_text(_csv(frame_rows, header))
    scores = [(r.sequence_id, r.rmse, r.cd) for r in results if math.isfinite(r.rmse) and math.isfinite(r.cd)]
    sp = out / "scores.csv"
    sp.write_text(score_table(rank_sequences(scores)))
    return {"frame_scores": fp, "scores": sp}


def read_scores(path) -> list[tuple[str, float, float]]:
    with open(path) as fh:
        return [(r["sequence_id"], float(r["rmse"]), float(r["cd"])) for r in csv.DictReader(fh)]
