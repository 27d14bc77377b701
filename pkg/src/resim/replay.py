"""Replay tracked traffic participants into a reconstructed background.

Object poses are stored relative to the ego vehicle and moved into the
first-frame ego coordinates by componentwise 6-DoF pose arithmetic. A rigid
composition mode is available through ``composition="rigid"``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import yaml

from .geometry import (
    Pose6D,
    RigidTransform,
    TriangleMesh,
    compose,
    pose_to_transform,
    transform_to_pose,
    wrap_angle,
)
from .ingest import CLASSES, BoxLabel
from .ply import read_mesh

MIN_SIZE = 0.1
COMPOSITIONS = ("componentwise", "rigid")
LABEL_HEADER = "# class length width height cx cy cz yaw (sensor frame, metres/radians)"

Size = tuple[float, float, float]


class MissingFrameError(LookupError):
    pass


class AssetNotFoundError(LookupError):
    pass


def _size(values) -> Size:
    s = tuple(float(v) for v in values)
    if len(s) != 3:
        raise ValueError(f"size needs 3 components, got {len(s)}")
    return s


@dataclass(frozen=True)
class Asset:
    asset_id: str
    class_name: str
    size: Size
    mesh: TriangleMesh  # ground contact at the origin, length along +x

    def __post_init__(self):
        object.__setattr__(self, "size", _size(self.size))
        if self.class_name not in CLASSES:
            raise ValueError(f"asset {self.asset_id}: unknown class {self.class_name!r}")
        if any(not s > 0 for s in self.size):
            raise ValueError(f"asset {self.asset_id}: size must be positive, got {self.size}")
        lo, hi = self.mesh.bounds()
        extent = hi - lo
        if np.any(np.abs(extent - np.array(self.size)) > 0.05 * np.array(self.size)):
            raise ValueError(f"asset {self.asset_id}: mesh extent {extent.round(3).tolist()} "
                             f"does not match declared size {list(self.size)} within 5%")


@dataclass(frozen=True)
class TrackedObject:
    object_id: str
    class_name: str
    size: Size
    poses: Mapping[int, Pose6D]  # frame index -> pose relative to the ego vehicle

    def __post_init__(self):
        object.__setattr__(self, "size", _size(self.size))
        if not self.poses:
            raise ValueError(f"object {self.object_id}: empty track")
        frames = sorted(self.poses)
        if frames != list(range(frames[0], frames[-1] + 1)):
            raise ValueError(f"object {self.object_id}: track has gaps between frames {frames[0]} and {frames[-1]}")

    @property
    def span(self) -> tuple[int, int]:
        return min(self.poses), max(self.poses)

    def covers(self, t: int) -> bool:
        return t in self.poses


@dataclass(frozen=True)
class EgoTrack:
    poses: Mapping[int, Pose6D]  # frame index -> absolute world pose

    def __post_init__(self):
        if 0 not in self.poses:
            raise ValueError("ego track must contain frame 0")

    @property
    def frames(self) -> list[int]:
        return sorted(self.poses)


@dataclass(frozen=True)
class SizeMap:
    # class -> ((a_l, b_l), (a_w, b_w), (a_h, b_h))
    params: Mapping[str, tuple[tuple[float, float], ...]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for cls, dims in self.params.items():
            dims = tuple((float(a), float(b)) for a, b in dims)
            if len(dims) != 3:
                raise ValueError(f"size map for {cls}: need 3 (scale, offset) pairs")
            if any(not a > 0 for a, _ in dims):
                raise ValueError(f"size map for {cls}: scales must be positive")
            clean[cls] = dims
        object.__setattr__(self, "params", clean)

    @classmethod
    def identity(cls, classes: Iterable[str] = CLASSES) -> "SizeMap":
        return cls({c: ((1.0, 0.0),) * 3 for c in classes})


@dataclass(frozen=True)
class Placement:
    object_id: str
    asset: Asset
    pose: Pose6D  # ground-contact point in scene coordinates
    size: Size

    @property
    def class_name(self) -> str:
        return self.asset.class_name


# --- pose arithmetic --------------------------------------------------------


def _pose_lookup(poses: Mapping[int, Pose6D], t: int, what: str) -> Pose6D:
    try:
        return poses[t]
    except KeyError:
        raise MissingFrameError(f"{what} has no pose for frame {t}") from None


def _check_composition(composition: str):
    if composition not in COMPOSITIONS:
        raise ValueError(f"composition must be one of {COMPOSITIONS}, got {composition!r}")


def pose_difference(a: Pose6D, b: Pose6D) -> Pose6D:
    """Componentwise ``a - b`` with wrapped angles."""
    return Pose6D(*(x - y for x, y in zip(a.as_tuple(), b.as_tuple())))


def pose_sum(a: Pose6D, b: Pose6D) -> Pose6D:
    return Pose6D(*(x + y for x, y in zip(a.as_tuple(), b.as_tuple())))


def ego_pose_at(track: EgoTrack, t: int, composition: str = "componentwise") -> Pose6D:
    """Ego pose at frame ``t`` relative to frame 0."""
    _check_composition(composition)
    first = _pose_lookup(track.poses, 0, "ego track")
    cur = _pose_lookup(track.poses, t, "ego track")
    if composition == "componentwise":
        return pose_difference(cur, first)
    return transform_to_pose(compose(pose_to_transform(first).inverse(), pose_to_transform(cur)))


def target_pose_at(obj: TrackedObject, ego: EgoTrack, t: int, composition: str = "componentwise") -> Pose6D:
    """Object pose at frame ``t`` in first-frame ego coordinates."""
    rel = _pose_lookup(obj.poses, t, f"object {obj.object_id}")
    p_ego = ego_pose_at(ego, t, composition)
    if composition == "componentwise":
        return pose_sum(rel, p_ego)
    return transform_to_pose(compose(pose_to_transform(p_ego), pose_to_transform(rel)))


# --- sizes and assets -------------------------------------------------------


def map_size(size, class_name: str, size_map: SizeMap) -> Size:
    size = _size(size)
    params = size_map.params.get(class_name)
    if params is None:
        warnings.warn(f"no size mapping for class {class_name!r}; size left unchanged", stacklevel=2)
        return size
    return tuple(max(a * x + b, MIN_SIZE) for x, (a, b) in zip(size, params))


def fit_size_map(source: Sequence, target: Sequence) -> SizeMap:
    """Per-class affine maps taking source size moments onto the target's.

    Inputs are labels (anything with ``class_name`` and ``size``). Classes
    missing from either side are left out. A zero source spread keeps
    scale 1 and only shifts the mean.
    """
    def by_class(labels):
        out: dict[str, list] = {}
        for lab in labels:
            out.setdefault(lab.class_name, []).append(lab.size)
        return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}

    src, tgt = by_class(source), by_class(target)
    params = {}
    for cls in sorted(set(src) & set(tgt)):
        s, g = src[cls], tgt[cls]
        dims = []
        for k in range(3):
            sd_s, sd_t = s[:, k].std(), g[:, k].std()
            a = sd_t / sd_s if sd_s > 0 and sd_t > 0 else 1.0
            dims.append((a, g[:, k].mean() - a * s[:, k].mean()))
        params[cls] = tuple(dims)
    return SizeMap(params)


def match_asset(library: Sequence[Asset], class_name: str, size) -> Asset:
    """Same-class asset nearest in (length, width, height); ties go to the smaller id."""
    target = np.array(_size(size))
    best = None
    for asset in library:
        if asset.class_name != class_name:
            continue
        d = float(np.linalg.norm(np.array(asset.size) - target))
        key = (d, asset.asset_id)
        if best is None or key < best[0]:
            best = (key, asset)
    if best is None:
        available = sorted({a.class_name for a in library})
        raise AssetNotFoundError(f"no asset of class {class_name!r}; library has {available or 'no assets'}")
    return best[1]


def box_asset(asset_id: str, class_name: str, size) -> Asset:
    from .scenes import box_mesh

    return Asset(asset_id, class_name, size, box_mesh((0.0, 0.0, 0.0), size))


_DEFAULT_ASSETS = (
    ("vehicle-compact", "Vehicle", (3.9, 1.65, 1.45)),
    ("vehicle-sedan", "Vehicle", (4.6, 1.85, 1.5)),
    ("vehicle-suv", "Vehicle", (5.0, 2.0, 1.85)),
    ("vehicle-truck", "Vehicle", (9.0, 2.5, 3.2)),
    ("pedestrian-adult", "Pedestrian", (0.7, 0.7, 1.75)),
    ("pedestrian-child", "Pedestrian", (0.5, 0.5, 1.2)),
    ("cyclist", "Cyclist", (1.8, 0.65, 1.7)),
    ("other-box", "Other", (1.0, 1.0, 1.0)),
)


def default_library() -> list[Asset]:
    """Box primitives covering every class."""
    return [box_asset(*spec) for spec in _DEFAULT_ASSETS]


# --- scene assembly and label export ----------------------------------------


def _placement_parts(p) -> tuple[Asset, Pose6D, Size]:
    if isinstance(p, Placement):
        return p.asset, p.pose, p.size
    asset, pose, size = p
    return asset, pose, _size(size)


def placed_mesh(asset: Asset, pose: Pose6D, size) -> TriangleMesh:
    scale = np.array(_size(size)) / np.array(asset.size)
    scaled = TriangleMesh(asset.mesh.vertices * scale, asset.mesh.triangles)
    return scaled.transformed(pose_to_transform(pose))


def compose_frame(background: TriangleMesh, placements: Sequence) -> TriangleMesh:
    """Background plus every placed asset, scaled per axis then posed."""
    if not placements:
        return background
    return TriangleMesh.concatenate([background] + [placed_mesh(*_placement_parts(p)) for p in placements])


def replay_frame(objects: Sequence[TrackedObject], ego: EgoTrack, t: int, library: Sequence[Asset],
                 size_map: Optional[SizeMap] = None, composition: str = "componentwise") -> list[Placement]:
    """Placements for every object present at frame ``t``, ordered by id."""
    out = []
    for obj in sorted(objects, key=lambda o: o.object_id):
        if not obj.covers(t):
            continue
        size = map_size(obj.size, obj.class_name, size_map) if size_map is not None else obj.size
        asset = match_asset(library, obj.class_name, size)
        out.append(Placement(obj.object_id, asset, target_pose_at(obj, ego, t, composition), size))
    return out


def placement_box(p: Placement, sensor: Union[Pose6D, RigidTransform], frame: int = 0) -> BoxLabel:
    """Sensor-frame box with a geometric (not ground-contact) centre."""
    sensor_tf = sensor if isinstance(sensor, RigidTransform) else pose_to_transform(sensor)
    obj_tf = pose_to_transform(p.pose)
    centre = obj_tf.apply(np.array([0.0, 0.0, 0.5 * p.size[2]]))
    local = sensor_tf.inverse()
    heading = local.apply_direction(obj_tf.rotation[:, 0])
    return BoxLabel(p.class_name, tuple(local.apply(centre)), p.size, math.atan2(heading[1], heading[0]),
                    frame, True, "frame", p.object_id)


def format_export_line(box: BoxLabel) -> str:
    l, w, h = box.size
    cx, cy, cz = box.center
    yaw = float(wrap_angle(box.yaw))
    # round first so tiny negatives do not print as "-0.000000"
    vals = " ".join(f"{round(v, 6) + 0.0:.6f}" for v in (l, w, h, cx, cy, cz, yaw))
    return f"{box.class_name} {vals}"


def export_labels(placements: Sequence[Placement], frame: int, sensor_pose: Union[Pose6D, RigidTransform]) -> list[str]:
    """Header comment then one ``class l w h cx cy cz yaw`` line per object, sorted by id."""
    lines = [LABEL_HEADER]
    for p in sorted(placements, key=lambda q: q.object_id):
        lines.append(format_export_line(placement_box(p, sensor_pose, frame)))
    return lines


def parse_export_line(line: str, frame_index: int = 0, object_id: str = "") -> BoxLabel:
    tok = line.split()
    if len(tok) != 8:
        raise ValueError(f"expected 8 fields, got {len(tok)}")
    l, w, h, cx, cy, cz, yaw = (float(t) for t in tok[1:])
    return BoxLabel(tok[0], (cx, cy, cz), (l, w, h), yaw, frame_index, True, "frame", object_id)


# --- file formats -----------------------------------------------------------


def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _pose_line(tok, where) -> tuple[int, Pose6D]:
    if len(tok) != 7:
        raise ValueError(f"{where}: expected 't x y z roll yaw pitch', got {len(tok)} fields")
    try:
        return int(tok[0]), Pose6D(*(float(v) for v in tok[1:]))
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None


def read_ego_track(path) -> EgoTrack:
    """One ``t x y z roll yaw pitch`` line per frame."""
    poses = {}
    for lineno, line in _data_lines(path):
        t, pose = _pose_line(line.split(), f"{path}:{lineno}")
        if t in poses:
            raise ValueError(f"{path}:{lineno}: duplicate frame {t}")
        poses[t] = pose
    try:
        return EgoTrack(poses)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def read_tracks(path) -> list[TrackedObject]:
    """Blocks of ``object <id> <class> <l> <w> <h>`` followed by pose lines."""
    objects = []
    header = None
    poses: dict[int, Pose6D] = {}

    def flush():
        if header is not None:
            try:
                objects.append(TrackedObject(header[0], header[1], header[2], dict(poses)))
            except ValueError as exc:
                raise ValueError(f"{path}: {exc}") from None

    for lineno, line in _data_lines(path):
        tok = line.split()
        where = f"{path}:{lineno}"
        if tok[0] == "object":
            flush()
            if len(tok) != 6:
                raise ValueError(f"{where}: expected 'object <id> <class> <l> <w> <h>'")
            if tok[2] not in CLASSES:
                raise ValueError(f"{where}: unknown class {tok[2]!r}")
            try:
                header = (tok[1], tok[2], tuple(float(v) for v in tok[3:6]))
            except ValueError as exc:
                raise ValueError(f"{where}: {exc}") from None
            poses = {}
        else:
            if header is None:
                raise ValueError(f"{where}: pose line before any 'object' header")
            t, pose = _pose_line(tok, where)
            poses[t] = pose
    flush()
    ids = [o.object_id for o in objects]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate object ids")
    return objects


def write_tracks(path, objects: Sequence[TrackedObject]) -> None:
    lines = []
    for o in objects:
        lines.append(f"object {o.object_id} {o.class_name} " + " ".join(repr(float(s)) for s in o.size))
        for t in sorted(o.poses):
            lines.append(f"{t} " + " ".join(repr(float(v)) for v in o.poses[t].as_tuple()))
    Path(path).write_text("\n".join(lines) + "\n")


def write_ego_track(path, track: EgoTrack) -> None:
    lines = [f"{t} " + " ".join(repr(float(v)) for v in track.poses[t].as_tuple()) for t in track.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def load_asset_library(path) -> list[Asset]:
    """YAML list of ``{id, class, size: [l, w, h], mesh: file.ply}``; ``mesh`` may be omitted for a box."""
    path = Path(path)
    doc = yaml.safe_load(path.read_text()) or []
    items = doc.get("assets", []) if isinstance(doc, dict) else doc
    if not isinstance(items, list):
        raise ValueError(f"{path}: expected a list of assets")
    out = []
    for i, item in enumerate(items):
        where = f"{path}: assets[{i}]"
        try:
            aid, cls, size = str(item["id"]), item["class"], _size(item["size"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{where}: needs id, class and a 3-component size ({exc})") from None
        try:
            if item.get("mesh"):
                out.append(Asset(aid, cls, size, read_mesh(path.parent / item["mesh"])))
            else:
                out.append(box_asset(aid, cls, size))
        except (OSError, ValueError) as exc:
            raise ValueError(f"{where}: {exc}") from None
    return out


def load_size_map(path) -> SizeMap:
    """YAML ``{class: {length: [a, b], width: [a, b], height: [a, b]}}``."""
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: size map must be a mapping")
    params = {}
    for cls, dims in doc.items():
        if cls not in CLASSES:
            raise ValueError(f"{path}: unknown class {cls!r}")
        try:
            params[cls] = tuple(tuple(dims[k]) for k in ("length", "width", "height"))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: {cls} needs length/width/height [scale, offset] ({exc})") from None
    return SizeMap(params)
