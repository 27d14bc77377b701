"""Virtual LiDAR sensor descriptions and presets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from ..geometry import SOURCE_SIDE, SOURCE_TOP, Pose6D


@dataclass(frozen=True)
class SensorProfile:
    name: str
    channels: int
    vfov_min: float  # degrees
    vfov_max: float
    hfov_min: float = -180.0
    hfov_max: float = 180.0
    rotation_rate: float = 10.0  # Hz
    points_per_second: int = 1_310_720
    max_range: float = 120.0
    drop_rate: float = 0.0
    range_noise_sigma: float = 0.0
    mount: Pose6D = field(default_factory=Pose6D)
    elevation_override: Optional[tuple[float, ...]] = None
    source: int = SOURCE_TOP

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not self.vfov_min < self.vfov_max:
            raise ValueError(f"vfov_min {self.vfov_min} must be below vfov_max {self.vfov_max}")
        if not self.hfov_min < self.hfov_max or self.hfov_max - self.hfov_min > 360.0:
            raise ValueError("invalid horizontal field of view")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.range_noise_sigma < 0 or not self.max_range > 0:
            raise ValueError("range_noise_sigma must be >= 0 and max_range > 0")
        if self.rotation_rate <= 0 or self.points_per_second <= 0:
            raise ValueError("rotation_rate and points_per_second must be positive")
        if self.elevation_override is not None:
            ov = tuple(float(e) for e in self.elevation_override)
            object.__setattr__(self, "elevation_override", ov)
            if len(ov) != self.channels:
                raise ValueError(f"elevation_override has {len(ov)} entries for {self.channels} channels")
            if any(e < self.vfov_min or e > self.vfov_max for e in ov):
                raise ValueError("elevation_override entries must lie inside the vertical field of view")

    @property
    def vfov(self) -> tuple[float, float]:
        return (self.vfov_min, self.vfov_max)

    @property
    def steps_per_revolution(self) -> int:
        """Azimuth firings per channel in one full rotation."""
        return max(1, int(round(self.points_per_second / self.rotation_rate / self.channels)))

    @property
    def azimuth_step(self) -> float:
        """Angular step in radians between consecutive firings."""
        return 2.0 * math.pi / self.steps_per_revolution

    def azimuths(self) -> np.ndarray:
        span = self.hfov_max - self.hfov_min
        n = self.steps_per_revolution
        if span < 360.0:
            n = max(1, int(round(n * span / 360.0)))
        return math.radians(self.hfov_min) + self.azimuth_step * np.arange(n)

    def with_(self, **changes) -> "SensorProfile":
        return replace(self, **changes)


def beam_pattern(profile: SensorProfile) -> np.ndarray:
    """Per-channel elevation angles in radians, ascending for uniform patterns."""
    if profile.elevation_override is not None:
        if len(profile.elevation_override) != profile.channels:
            raise ValueError("elevation_override length does not match channel count")
        return np.radians(np.array(profile.elevation_override, dtype=np.float64))
    if profile.channels == 1:
        return np.radians(np.array([0.5 * (profile.vfov_min + profile.vfov_max)]))
    return np.radians(np.linspace(profile.vfov_min, profile.vfov_max, profile.channels))


def spherical_to_point(theta, phi, r):
    """Point at elevation ``theta`` (from the horizontal plane), azimuth ``phi``, range ``r``."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    ct = np.cos(theta)
    return np.stack([r * ct * np.cos(phi), r * ct * np.sin(phi), r * np.sin(theta)], axis=-1)


# Channel counts, rates and mounts below are sensor-class defaults; only the
# vertical fields of view and the 32-channel uniform default are fixed values.
_PRESETS = {
    "waymo-top": dict(channels=64, vfov_min=-17.6, vfov_max=2.4, rotation_rate=10.0,
                      points_per_second=64 * 10 * 2650, max_range=75.0, mount=Pose6D(0.0, 0.0, 2.1)),
    "waymo-side": dict(channels=200, vfov_min=-90.0, vfov_max=30.0, hfov_min=-90.0, hfov_max=90.0,
                       rotation_rate=10.0, points_per_second=200 * 10 * 600, max_range=20.0,
                       mount=Pose6D(2.4, 0.0, 0.7), source=SOURCE_SIDE),
    "kitti": dict(channels=64, vfov_min=-24.9, vfov_max=2.0, rotation_rate=10.0,
                  points_per_second=64 * 10 * 2048, max_range=120.0, mount=Pose6D(0.0, 0.0, 1.73)),
    "nuscenes": dict(channels=32, vfov_min=-30.67, vfov_max=10.67, rotation_rate=20.0,
                     points_per_second=32 * 20 * 2170, max_range=100.0, mount=Pose6D(0.0, 0.0, 1.84)),
    "carla-default-32": dict(channels=32, vfov_min=-30.0, vfov_max=10.0, rotation_rate=10.0,
                             points_per_second=32 * 10 * 2000, max_range=100.0, mount=Pose6D(0.0, 0.0, 1.8)),
}

WAYMO_SIDE_MOUNTS = {
    "front": Pose6D(2.4, 0.0, 0.7, 0.0, 0.0, 0.0),
    "rear": Pose6D(-2.4, 0.0, 0.7, 0.0, math.pi, 0.0),
    "left": Pose6D(0.6, 1.0, 0.9, 0.0, math.pi / 2, 0.0),
    "right": Pose6D(0.6, -1.0, 0.9, 0.0, -math.pi / 2, 0.0),
}

PRESET_NAMES = tuple(_PRESETS)


class UnknownPresetError(KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown sensor preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")

    def __str__(self) -> str:
        return self.args[0]


def preset(name: str) -> SensorProfile:
    """Named sensor profile. ``waymo-side`` returns the front unit; see :func:`preset_rig`."""
    if name not in _PRESETS:
        raise UnknownPresetError(name)
    return SensorProfile(name=name, **_PRESETS[name])


def preset_rig(name: str) -> tuple[SensorProfile, ...]:
    """All sensors of a preset; ``waymo-side`` expands to its four mounts."""
    base = preset(name)
    if name != "waymo-side":
        return (base,)
    return tuple(base.with_(name=f"waymo-side-{k}", mount=m) for k, m in WAYMO_SIDE_MOUNTS.items())


_FIELDS = {"name", "channels", "vfov_min", "vfov_max", "hfov_min", "hfov_max", "rotation_rate",
           "points_per_second", "max_range", "drop_rate", "range_noise_sigma", "mount",
           "elevation_override", "source", "base"}


def profile_from_dict(doc: dict, where: str = "profile") -> SensorProfile:
    """Build a profile from a mapping; ``base: <preset>`` starts from a preset."""
    unknown = set(doc) - _FIELDS
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    fields = {}
    if "base" in doc:
        fields = dict(_PRESETS[doc["base"]]) if doc["base"] in _PRESETS else None
        if fields is None:
            raise UnknownPresetError(doc["base"])
        fields["name"] = doc["base"]
    for k, v in doc.items():
        if k == "base":
            continue
        if k == "mount":
            v = Pose6D.from_sequence(v.split() if isinstance(v, str) else v)
        elif k == "elevation_override" and v is not None:
            v = tuple(float(e) for e in v)
        elif k == "source":
            v = SOURCE_SIDE if v in ("side", 1) else SOURCE_TOP
        fields[k] = v
    if "name" not in fields:
        fields["name"] = "custom"
    try:
        return SensorProfile(**fields)
    except TypeError as exc:
        raise ValueError(f"{where}: {exc}") from None


def load_profile(path) -> SensorProfile:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: sensor profile must be a mapping")
    doc.setdefault("name", Path(path).stem)
    return profile_from_dict(doc, str(path))


def resolve_profile(spec) -> tuple[SensorProfile, ...]:
    """A preset name, a profile file path, or an inline mapping."""
    if isinstance(spec, SensorProfile):
        return (spec,)
    if isinstance(spec, dict):
        return (profile_from_dict(spec),)
    spec = str(spec)
    if spec in _PRESETS:
        return preset_rig(spec)
    p = Path(spec)
    if p.suffix in (".yaml", ".yml", ".json") or p.exists():
        if not p.is_file():
            raise FileNotFoundError(f"sensor profile file not found: {p}")
        return (load_profile(p),)
    raise UnknownPresetError(spec)


def profile_table() -> list[dict]:
    rows = []
    for name in PRESET_NAMES:
        p = preset(name)
        rows.append(dict(name=name, channels=p.channels, vfov_min=p.vfov_min, vfov_max=p.vfov_max,
                         rotation_rate=p.rotation_rate, points_per_second=p.points_per_second,
                         max_range=p.max_range, drop_rate=p.drop_rate))
    return rows
