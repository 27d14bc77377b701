"""Posed LiDAR sequence ingestion: dynamic removal, registration, outlier
filtering and the weighted supervision ray bundle."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import yaml
from scipy.spatial import cKDTree

from .geometry import (
    SOURCE_SIDE,
    SOURCE_TOP,
    PointCloud,
    Pose6D,
    RigidTransform,
    compose,
    pose_to_transform,
)
from .ply import read_cloud

log = logging.getLogger(__name__)

CLASSES = ("Vehicle", "Pedestrian", "Cyclist", "Other")

DEFAULT_K = 16
DEFAULT_SIGMA_MULT = 2.0
DEFAULT_SIDE_WEIGHT = 4.0


@dataclass(frozen=True)
class Frame:
    cloud: PointCloud
    sensor_pose: Pose6D
    timestamp: float = 0.0
    frame_index: int = 0
    source: int = SOURCE_TOP

    def sensor_transform(self) -> RigidTransform:
        return pose_to_transform(self.sensor_pose)


@dataclass(frozen=True)
class BoxLabel:
    class_name: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length, width, height
    yaw: float = 0.0
    frame_index: int = 0
    is_dynamic: bool = False
    coordinate_frame: str = "frame"  # "frame" (sensor coordinates) or "world"
    object_id: str = ""

    def __post_init__(self):
        if self.class_name not in CLASSES:
            raise ValueError(f"unknown class {self.class_name!r}; expected one of {CLASSES}")
        if any(not (s > 0) for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")
        if self.coordinate_frame not in ("frame", "world"):
            raise ValueError(f"coordinate_frame must be 'frame' or 'world', not {self.coordinate_frame!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))


@dataclass(frozen=True)
class LidarRay:
    origin: np.ndarray
    direction: np.ndarray
    measured_depth: float
    weight: float = 1.0
    source: int = SOURCE_TOP


@dataclass(frozen=True)
class RayBundle:
    """Array-backed sequence of :class:`LidarRay`."""

    origins: np.ndarray
    directions: np.ndarray
    depths: np.ndarray
    weights: np.ndarray
    sources: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return self.depths.shape[0]

    def __getitem__(self, i) -> LidarRay | "RayBundle":
        if isinstance(i, (int, np.integer)):
            return LidarRay(self.origins[i], self.directions[i], float(self.depths[i]),
                            float(self.weights[i]), int(self.sources[i]))
        return RayBundle(self.origins[i], self.directions[i], self.depths[i],
                         self.weights[i], self.sources[i])

    def __iter__(self) -> Iterator[LidarRay]:
        for i in range(len(self)):
            yield self[i]

    def endpoints(self) -> np.ndarray:
        return self.origins + self.depths[:, None] * self.directions

    @staticmethod
    def from_rays(rays: Sequence[LidarRay]) -> "RayBundle":
        return RayBundle(
            np.array([r.origin for r in rays], dtype=np.float64).reshape(-1, 3),
            np.array([r.direction for r in rays], dtype=np.float64).reshape(-1, 3),
            np.array([r.measured_depth for r in rays], dtype=np.float64),
            np.array([r.weight for r in rays], dtype=np.float64),
            np.array([r.source for r in rays], dtype=np.uint8),
        )


def points_in_box(points: np.ndarray, box: BoxLabel) -> np.ndarray:
    """Boolean mask of points inside (or on) an oriented box with yaw about +z."""
    d = np.asarray(points, dtype=np.float64) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    l, w, h = box.size
    return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(d[:, 2]) <= h / 2)


def remove_dynamic_points(frame: Frame, boxes: Sequence[BoxLabel]) -> PointCloud:
    """Drop points inside any dynamic box; static boxes are ignored."""
    keep = np.ones(len(frame.cloud), dtype=bool)
    for box in boxes:
        if box.coordinate_frame != "frame":
            raise ValueError(
                f"box {box.object_id or box.class_name} is in {box.coordinate_frame!r} coordinates; "
                "cloud is in sensor-frame coordinates"
            )
        if box.is_dynamic:
            keep &= ~points_in_box(frame.cloud.points, box)
    return frame.cloud.select(keep)


def box_to_frame(box: BoxLabel, sensor_pose: Pose6D) -> BoxLabel:
    """Re-express a world-coordinate box in a frame's sensor coordinates."""
    if box.coordinate_frame == "frame":
        return box
    inv = pose_to_transform(sensor_pose).inverse()
    center = inv.apply(np.asarray(box.center))
    heading = inv.apply_direction([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    return BoxLabel(box.class_name, tuple(center), box.size, math.atan2(heading[1], heading[0]),
                    box.frame_index, box.is_dynamic, "frame", box.object_id)


def reference_transforms(frames: Sequence[Frame]) -> list[RigidTransform]:
    """Per-frame map from sensor coordinates into frame 0's sensor coordinates."""
    if not frames:
        raise ValueError("frame sequence is empty")
    ref_inv = frames[0].sensor_transform().inverse()
    return [compose(ref_inv, f.sensor_transform()) for f in frames]


def register_frames(frames: Sequence[Frame]) -> PointCloud:
    """Stack all frames in the coordinate system of the first frame."""
    tfs = reference_transforms(frames)
    parts = []
    for frame, tf in zip(frames, tfs):
        cloud = frame.cloud.transformed(tf)
        if cloud.source is None:
            cloud = PointCloud(cloud.points, **{**cloud.attributes(),
                                                "source": np.full(len(cloud), frame.source, np.uint8)})
        parts.append(cloud)
    return PointCloud.concatenate(parts)


def neighbor_mean_distances(points: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=k + 1)
    return d[:, 1:].mean(axis=1)


def outlier_mask(cloud: PointCloud, k: int = DEFAULT_K, sigma_mult: float = DEFAULT_SIGMA_MULT) -> np.ndarray:
    """True for points that survive the neighborhood-statistics filter."""
    n = len(cloud)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        return np.ones(n, dtype=bool)
    means = neighbor_mean_distances(cloud.points, k)
    threshold = means.mean() + sigma_mult * means.std()
    # relative slack so rounding noise cannot split a set of equal means
    return means <= threshold * (1.0 + 1e-12)


def filter_outliers(cloud: PointCloud, k: int = DEFAULT_K, sigma_mult: float = DEFAULT_SIGMA_MULT) -> PointCloud:
    """Remove points whose mean k-NN distance exceeds ``mean + sigma_mult * std``."""
    return cloud.select(outlier_mask(cloud, k, sigma_mult))


def build_ray_bundle(
    frames: Sequence[Frame],
    side_weight: float = DEFAULT_SIDE_WEIGHT,
    keep: Optional[np.ndarray] = None,
    max_range: float = math.inf,
    transform: Optional[RigidTransform] = None,
) -> RayBundle:
    """One supervision ray per point, expressed in frame 0 coordinates.

    ``keep`` optionally masks the registered (concatenated) cloud, e.g. the
    output of :func:`outlier_mask`. ``transform`` is applied on top of the
    reference frame (used to move into the ego-origin frame). Points at the
    sensor origin, or beyond ``max_range``, are skipped and counted.
    """
    if not side_weight > 0:
        raise ValueError("side_weight must be positive")
    tfs = reference_transforms(frames)
    if transform is not None:
        tfs = [compose(transform, tf) for tf in tfs]
    origins, dirs, depths, weights, sources = [], [], [], [], []
    skipped = 0
    offset = 0
    for frame, tf in zip(frames, tfs):
        n = len(frame.cloud)
        pts = tf.apply(frame.cloud.points)
        src = frame.cloud.source if frame.cloud.source is not None else np.full(n, frame.source, np.uint8)
        sel = np.ones(n, dtype=bool) if keep is None else np.asarray(keep[offset:offset + n], dtype=bool)
        offset += n
        o = tf.translation
        delta = pts - o
        dist = np.linalg.norm(delta, axis=1)
        bad = sel & ((dist <= 0.0) | (dist > max_range))
        skipped += int(bad.sum())
        sel &= ~bad
        origins.append(np.broadcast_to(o, (int(sel.sum()), 3)))
        dirs.append(delta[sel] / dist[sel, None])
        depths.append(dist[sel])
        s = src[sel].astype(np.uint8)
        sources.append(s)
        weights.append(np.where(s == SOURCE_SIDE, side_weight, 1.0))
    if skipped:
        log.info("skipped %d degenerate points while building rays", skipped)
    return RayBundle(
        np.ascontiguousarray(np.concatenate(origins)),
        np.concatenate(dirs),
        np.concatenate(depths),
        np.concatenate(weights).astype(np.float64),
        np.concatenate(sources),
        skipped,
    )


# --- file formats -----------------------------------------------------------


class ManifestError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def parse_label_line(line: str, frame_index: int = 0, coordinate_frame: str = "frame",
                     object_id: str = "") -> BoxLabel:
    """Parse ``class cx cy cz length width height yaw dynamic_flag``."""
    tok = line.split()
    if len(tok) != 9:
        raise ValueError(f"expected 9 fields, got {len(tok)}")
    cls = tok[0]
    vals = [float(t) for t in tok[1:8]]
    flag = tok[8].lower()
    if flag in ("1", "true", "yes"):
        dyn = True
    elif flag in ("0", "false", "no"):
        dyn = False
    else:
        raise ValueError(f"bad dynamic flag {tok[8]!r}")
    return BoxLabel(cls, tuple(vals[0:3]), tuple(vals[3:6]), vals[6], frame_index, dyn,
                    coordinate_frame, object_id)


def read_labels(path, frame_index: int = 0, coordinate_frame: str = "frame") -> list[BoxLabel]:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                labels.append(parse_label_line(line, frame_index, coordinate_frame, f"{frame_index}:{lineno}"))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return labels


def format_label_line(box: BoxLabel) -> str:
    cx, cy, cz = box.center
    l, w, h = box.size
    return f"{box.class_name} {cx:.6f} {cy:.6f} {cz:.6f} {l:.6f} {w:.6f} {h:.6f} {box.yaw:.6f} {int(box.is_dynamic)}"


@dataclass(frozen=True)
class ManifestEntry:
    cloud_path: Path
    pose: Pose6D
    label_path: Optional[Path]
    timestamp: float
    frame_index: int
    source: int


@dataclass(frozen=True)
class SequenceManifest:
    entries: tuple[ManifestEntry, ...]
    label_frame: str = "frame"

    def load(self) -> tuple[list[Frame], list[list[BoxLabel]]]:
        frames, labels = [], []
        for e in self.entries:
            frames.append(Frame(read_cloud(e.cloud_path), e.pose, e.timestamp, e.frame_index, e.source))
            boxes = read_labels(e.label_path, e.frame_index, self.label_frame) if e.label_path else []
            labels.append([box_to_frame(b, e.pose) for b in boxes])
        return frames, labels


def load_manifest(path, field: str = "manifest") -> SequenceManifest:
    """Load a YAML sequence manifest.

    Layout::

        label_frame: frame          # or world
        frames:
          - cloud: clouds/000.ply
            pose: [x, y, z, roll, yaw, pitch]   # or "x y z roll yaw pitch"
            labels: labels/000.txt             # optional
            timestamp: 0.0                     # optional
            source: top                        # optional, top | side
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(field, f"file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ManifestError(field, f"cannot parse {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestError(field, "top level must be a mapping")
    label_frame = doc.get("label_frame", "frame")
    if label_frame not in ("frame", "world"):
        raise ManifestError(f"{field}.label_frame", f"must be 'frame' or 'world', got {label_frame!r}")
    raw = doc.get("frames")
    if not isinstance(raw, list) or not raw:
        raise ManifestError(f"{field}.frames", "must list at least one frame")
    base = path.parent
    entries = []
    seen = set()
    for i, item in enumerate(raw):
        fp = f"{field}.frames[{i}]"
        if not isinstance(item, dict) or "cloud" not in item or "pose" not in item:
            raise ManifestError(fp, "needs 'cloud' and 'pose'")
        cloud = base / str(item["cloud"])
        if not cloud.is_file():
            raise ManifestError(f"{fp}.cloud", f"file not found: {cloud}")
        pose_val = item["pose"]
        if isinstance(pose_val, str):
            pose_val = pose_val.split()
        try:
            pose = Pose6D.from_sequence(pose_val)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{fp}.pose", str(exc)) from None
        label = item.get("labels")
        label_path = None
        if label:
            label_path = base / str(label)
            if not label_path.is_file():
                raise ManifestError(f"{fp}.labels", f"file not found: {label_path}")
        idx = int(item.get("frame_index", i))
        if idx in seen:
            raise ManifestError(f"{fp}.frame_index", f"duplicate frame index {idx}")
        seen.add(idx)
        src = item.get("source", "top")
        if src not in ("top", "side"):
            raise ManifestError(f"{fp}.source", f"must be 'top' or 'side', got {src!r}")
        entries.append(ManifestEntry(cloud, pose, label_path, float(item.get("timestamp", 0.0)), idx,
                                     SOURCE_SIDE if src == "side" else SOURCE_TOP))
    return SequenceManifest(tuple(entries), label_frame)


def write_manifest(path, entries: Sequence[dict], label_frame: str = "frame") -> None:
    Path(path).write_text(yaml.safe_dump({"label_frame": label_frame, "frames": list(entries)},
                                         sort_keys=False))
