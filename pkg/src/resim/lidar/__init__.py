from .bvh import Bvh, build_bvh, intersect
from .profile import (
    PRESET_NAMES,
    SensorProfile,
    UnknownPresetError,
    beam_pattern,
    load_profile,
    preset,
    preset_rig,
    profile_from_dict,
    resolve_profile,
    spherical_to_point,
)
from .scan import SimulatedScan, cast_rays, cast_scan, scan_directions, sensor_transform

__all__ = [
    "Bvh", "PRESET_NAMES", "SensorProfile", "SimulatedScan", "UnknownPresetError", "beam_pattern",
    "build_bvh", "cast_rays", "cast_scan", "intersect", "load_profile", "preset", "preset_rig", "profile_from_dict",
    "resolve_profile", "scan_directions", "sensor_transform", "spherical_to_point",
]
