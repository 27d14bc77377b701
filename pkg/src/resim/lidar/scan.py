"""Spinning-LiDAR scan synthesis against a triangle mesh."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import PointCloud, Pose6D, RigidTransform, compose, pose_to_transform
from .bvh import Bvh, intersect
from .profile import SensorProfile, beam_pattern, spherical_to_point


@dataclass(frozen=True)
class SimulatedScan:
    cloud: PointCloud          # world coordinates (or sensor, see ``frame``)
    dropped_count: int
    miss_count: int
    n_rays: int
    sensor_to_world: RigidTransform
    frame: str = "world"

    @property
    def hit_count(self) -> int:
        return self.n_rays - self.miss_count


def scan_directions(profile: SensorProfile):
    """Sensor-frame unit directions ordered by (channel, azimuth step).

    Returns ``(directions (C*A, 3), beam_id, azimuth)``.
    """
    elev = beam_pattern(profile)
    az = profile.azimuths()
    theta = np.repeat(elev, len(az))
    phi = np.tile(az, len(elev))
    dirs = spherical_to_point(theta, phi, 1.0)
    beam = np.repeat(np.arange(len(elev), dtype=np.int32), len(az))
    return dirs, beam, phi


def sensor_transform(profile: SensorProfile, vehicle_pose: Pose6D) -> RigidTransform:
    """Sensor-to-world map: vehicle pose followed by the profile's mount."""
    return compose(pose_to_transform(vehicle_pose), pose_to_transform(profile.mount))


def cast_scan(bvh: Optional[Bvh], profile: SensorProfile, vehicle_pose: Pose6D = Pose6D(), seed: int = 0,
              frame: str = "world") -> SimulatedScan:
    """Cast one full sweep of ``profile`` mounted on a vehicle at ``vehicle_pose``.

    Noise is added to the hit range first, then each return is dropped with
    probability ``drop_rate``; both draws come from ``seed`` and have one
    entry per cast ray, so the result does not depend on hit patterns.
    ``bvh=None`` is an empty scene.
    """
    if frame not in ("world", "sensor"):
        raise ValueError("frame must be 'world' or 'sensor'")
    dirs_s, beam, phi = scan_directions(profile)
    n = len(dirs_s)
    tf = sensor_transform(profile, vehicle_pose)
    dirs_w = tf.apply_direction(dirs_s)
    if bvh is None:
        t = np.full(n, np.inf)
    else:
        t, _ = intersect(bvh, np.broadcast_to(tf.translation, (n, 3)), dirs_w, profile.max_range)
    hit = np.isfinite(t) & (t <= profile.max_range)

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n) * profile.range_noise_sigma
    u = rng.random(n)
    r = np.clip(np.where(hit, t, 0.0) + noise, 0.0, profile.max_range)
    dropped = hit & (u < profile.drop_rate)
    keep = hit & ~dropped & (r > 0.0)

    rk = r[keep]
    local = dirs_s[keep] * rk[:, None]
    pts = local if frame == "sensor" else tf.apply(local)
    cloud = PointCloud(pts, beam_id=beam[keep], range=rk, azimuth=phi[keep],
                       source=np.full(len(rk), profile.source, np.uint8))
    return SimulatedScan(cloud, int(dropped.sum()), int((~hit).sum()), n, tf, frame)


def cast_rays(bvh: Optional[Bvh], origins, directions, max_range: float = np.inf):
    """Ranges along arbitrary rays (``inf`` on a miss)."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    if bvh is None:
        return np.full(len(o), np.inf)
    t, _ = intersect(bvh, o, directions, max_range)
    return t
