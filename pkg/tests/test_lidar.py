import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_hits
from resim.geometry import Pose6D, TriangleMesh
from resim.lidar import (
    PRESET_NAMES,
    SensorProfile,
    UnknownPresetError,
    beam_pattern,
    build_bvh,
    cast_scan,
    intersect,
    load_profile,
    preset,
    preset_rig,
    profile_from_dict,
    resolve_profile,
    scan_directions,
    spherical_to_point,
)
from resim.scenes import icosphere

VFOV = {"kitti": (-24.9, 2.0), "nuscenes": (-30.67, 10.67), "waymo-top": (-17.6, 2.4),
        "carla-default-32": (-30.0, 10.0)}


def _profile(channels=3, vfov=(-10.0, 10.0), steps=360, **kw):
    return SensorProfile("test", channels, vfov[0], vfov[1], rotation_rate=10.0,
                         points_per_second=channels * steps * 10, **kw)


# --- beam pattern / geometry -----------------------------------------------


def test_two_channels_hit_endpoints():
    assert np.degrees(beam_pattern(_profile(2, (-30, 10)))).tolist() == pytest.approx([-30.0, 10.0])


def test_thirty_two_channels_evenly_spaced():
    e = np.degrees(beam_pattern(_profile(32, (-30, 10))))
    assert len(e) == 32
    assert np.allclose(np.diff(e), 40 / 31)
    assert e[0] == pytest.approx(-30) and e[-1] == pytest.approx(10)


def test_elevation_override_used_verbatim():
    p = _profile(3, (-10, 10), elevation_override=(-5, 1, 7))
    assert np.degrees(beam_pattern(p)).tolist() == pytest.approx([-5, 1, 7])
    with pytest.raises(ValueError):
        _profile(3, (-10, 10), elevation_override=(-5, 1))
    with pytest.raises(ValueError):
        _profile(2, (-10, 10), elevation_override=(-5, 20))


def test_spherical_to_point_examples():
    assert np.allclose(spherical_to_point(0.0, 0.0, 5.0), [5, 0, 0])
    assert np.allclose(spherical_to_point(math.pi / 2, 1.234, 2.0), [0, 0, 2], atol=1e-12)
    c30, c45 = math.cos(math.pi / 6), math.cos(math.pi / 4)
    expected = [c30 * c45, c30 * math.sin(math.pi / 4), 0.5]
    assert np.max(np.abs(spherical_to_point(math.pi / 6, math.pi / 4, 1.0) - expected)) < 1e-9


@given(st.floats(-1.5, 1.5), st.floats(-math.pi, math.pi), st.floats(0.1, 200))
def test_spherical_to_point_inverts(theta, phi, r):
    p = spherical_to_point(theta, phi, r)
    assert np.linalg.norm(p) == pytest.approx(r)
    assert math.asin(p[2] / r) == pytest.approx(theta, abs=1e-9)


@pytest.mark.parametrize("name, vfov", VFOV.items())
def test_preset_vfov(name, vfov):
    assert preset(name).vfov == vfov


def test_carla_preset_is_32_channels():
    assert preset("carla-default-32").channels == 32


def test_unknown_preset_lists_valid_names():
    with pytest.raises(UnknownPresetError) as exc:
        preset("velodyne-9000")
    for name in PRESET_NAMES:
        assert name in str(exc.value)


def test_waymo_side_rig_has_four_side_sensors():
    rig = preset_rig("waymo-side")
    assert len(rig) == 4
    assert len({(p.mount.x, p.mount.y, p.mount.yaw) for p in rig}) == 4
    assert all(p.source == 1 for p in rig)


def test_profile_from_mapping_and_file(tmp_path):
    p = profile_from_dict({"base": "kitti", "drop_rate": 0.2, "mount": [0, 0, 2, 0, 0, 0]})
    assert p.channels == 64 and p.drop_rate == 0.2 and p.mount.z == 2.0
    (tmp_path / "s.yaml").write_text("channels: 4\nvfov_min: -10\nvfov_max: 5\nelevation_override: [-10, -5, 0, 5]\n")
    q = load_profile(tmp_path / "s.yaml")
    assert q.name == "s" and q.elevation_override == (-10.0, -5.0, 0.0, 5.0)
    assert resolve_profile(str(tmp_path / "s.yaml"))[0] == q
    with pytest.raises(ValueError):
        profile_from_dict({"channels": 4, "vfov_min": 0, "vfov_max": 1, "colour": "red"})


@pytest.mark.parametrize("kw", [dict(channels=0), dict(vfov_min=5.0), dict(drop_rate=1.0),
                                dict(range_noise_sigma=-1.0)])
def test_profile_validation(kw):
    base = dict(name="x", channels=4, vfov_min=-10.0, vfov_max=2.0)
    with pytest.raises(ValueError):
        SensorProfile(**{**base, **kw})


def test_scan_directions_channel_major_and_unit():
    p = _profile(4, steps=90)
    dirs, beam, phi = scan_directions(p)
    assert len(dirs) == 4 * 90
    assert beam.tolist() == sorted(beam.tolist())
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)


# --- BVH ---------------------------------------------------------------------


def _random_mesh(n_tri, seed):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-10, 10, (n_tri, 3))
    v = (centers[:, None, :] + rng.normal(scale=0.6, size=(n_tri, 3, 3))).reshape(-1, 3)
    return TriangleMesh(v, np.arange(3 * n_tri).reshape(-1, 3))


def _random_rays(n, seed):
    rng = np.random.default_rng(seed)
    o = rng.uniform(-15, 15, (n, 3))
    target = rng.uniform(-8, 8, (n, 3))
    d = target - o
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def test_single_triangle_bvh():
    mesh = TriangleMesh([[0, -1, -1], [0, 1, -1], [0, 0, 1]], [[0, 1, 2]])
    bvh = build_bvh(mesh)
    assert len(list(bvh.leaves())) == 1
    t, idx = intersect(bvh, np.array([[-3.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.inf)
    assert t[0] == pytest.approx(3.0) and idx[0] == 0


def test_ray_missing_bounds_is_no_hit():
    bvh = build_bvh(_random_mesh(50, 0))
    t, idx = intersect(bvh, np.array([[100.0, 100, 100]]), np.array([[1.0, 0, 0]]), np.inf)
    assert t[0] == np.inf and idx[0] == -1


def test_bvh_matches_brute_force_on_random_mesh():
    mesh = _random_mesh(2000, 1)
    o, d = _random_rays(300, 2)
    t, idx = intersect(build_bvh(mesh), o, d, np.inf)
    bt, bi = brute_force_hits(mesh.vertices, mesh.triangles, o, d)
    assert (np.isfinite(bt)).sum() > 100
    assert np.array_equal(idx, bi)
    hit = np.isfinite(bt)
    assert np.array_equal(np.isfinite(t), hit)
    assert np.max(np.abs(t[hit] - bt[hit])) < 1e-9


def test_max_range_cuts_hits():
    mesh = TriangleMesh([[5, -1, -1], [5, 1, -1], [5, 0, 1]], [[0, 1, 2]])
    t, idx = intersect(build_bvh(mesh), np.zeros((1, 3)), np.array([[1.0, 0, 0]]), 4.0)
    assert t[0] == np.inf and idx[0] == -1


def test_equal_distance_tie_picks_lower_index():
    tri = [[2, -1, -1], [2, 1, -1], [2, 0, 1]]
    mesh = TriangleMesh(np.array(tri * 3, dtype=float), np.arange(9).reshape(3, 3)[::-1].copy())
    t, idx = intersect(build_bvh(mesh, leaf_size=1), np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.inf)
    assert idx[0] == 0


def test_empty_mesh_rejected():
    with pytest.raises(ValueError):
        build_bvh(TriangleMesh(np.zeros((0, 3))))


# --- scans -------------------------------------------------------------------


def test_empty_scene_scan():
    p = _profile(8, steps=100)
    scan = cast_scan(None, p)
    assert len(scan.cloud) == 0
    assert scan.miss_count == scan.n_rays == 800


def test_sphere_five_metres_ahead():
    sphere = icosphere(center=(5.0, 0.0, 0.0), radius=1.0, subdivisions=5)
    assert sphere.n_triangles >= 10_000
    p = _profile(3, (-10, 10), steps=720)
    scan = cast_scan(build_bvh(sphere), p, seed=0)
    r = scan.cloud.range
    assert len(r) > 0
    assert np.all((r >= 4.0 - 1e-9) & (r <= 5.0 + 1e-6))
    centre = (scan.cloud.beam_id == 1) & (np.abs(scan.cloud.azimuth) < 1e-9)
    assert centre.sum() == 1
    assert r[centre][0] == pytest.approx(4.0, rel=0.02)


def _enclosure():
    return build_bvh(icosphere(radius=10.0, subdivisions=2))


def test_drop_rate_half_over_100k_rays():
    p = _profile(100, (-60, 60), steps=1000, drop_rate=0.5)
    bvh = _enclosure()
    a = cast_scan(bvh, p, seed=0)
    assert a.n_rays == 100_000 and a.miss_count == 0
    assert a.hit_count == a.n_rays
    frac = len(a.cloud) / a.hit_count
    assert 0.49 <= frac <= 0.51
    b = cast_scan(bvh, p, seed=0)
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
    assert a.dropped_count + len(a.cloud) == a.hit_count


@pytest.fixture(scope="module")
def drop_half_scans():
    p = _profile(100, (-60, 60), steps=1000, drop_rate=0.5)
    bvh = _enclosure()
    return [cast_scan(bvh, p, seed=s) for s in range(10)]


@pytest.mark.parametrize("seed", range(10))
def test_drop_survival_within_three_sigma(seed, drop_half_scans):
    scan = drop_half_scans[seed]
    n = scan.hit_count
    assert abs(len(scan.cloud) - 0.5 * n) <= 3 * math.sqrt(n * 0.25)


def test_drop_counts_follow_binomial_across_seeds():
    # z-scores of survivor counts over many seeds should look standard normal
    p = _profile(10, (-60, 60), steps=200, drop_rate=0.3)
    bvh = _enclosure()
    z = []
    for seed in range(300):
        scan = cast_scan(bvh, p, seed=seed)
        n = scan.hit_count
        z.append((len(scan.cloud) - 0.7 * n) / math.sqrt(n * 0.21))
    z = np.array(z)
    assert abs(z.mean()) < 4 / math.sqrt(len(z))
    assert 0.85 < z.std() < 1.15
    assert np.mean(np.abs(z) > 3) < 0.02


def test_noiseless_scan_is_reproducible_and_seed_free():
    bvh = build_bvh(icosphere(center=(5.0, 0, 0), radius=1.0, subdivisions=3))
    p = _profile(16, steps=360)
    a = cast_scan(bvh, p, Pose6D(0.5, 0.1, 0, 0, 0.1, 0), seed=1)
    b = cast_scan(bvh, p, Pose6D(0.5, 0.1, 0, 0, 0.1, 0), seed=99)
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()


def test_range_noise_has_requested_spread():
    p = _profile(20, (-60, 60), steps=500, range_noise_sigma=0.05)
    scan = cast_scan(_enclosure(), p, seed=4)
    clean = cast_scan(_enclosure(), p.with_(range_noise_sigma=0.0), seed=4)
    resid = scan.cloud.range - clean.cloud.range
    assert np.std(resid) == pytest.approx(0.05, rel=0.05)


def test_world_and_sensor_frames_agree():
    bvh = build_bvh(icosphere(center=(5.0, 1.0, 2.0), radius=1.5, subdivisions=3))
    p = _profile(16, (-20, 20), steps=360, mount=Pose6D(0.3, 0, 1.5, 0, 0.1, 0))
    pose = Pose6D(1.0, 0.5, 0.0, 0.0, 0.2, 0.0)
    w = cast_scan(bvh, p, pose, frame="world")
    s = cast_scan(bvh, p, pose, frame="sensor")
    assert np.allclose(w.sensor_to_world.apply(s.cloud.points), w.cloud.points, atol=1e-9)


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_scan_elevations_inside_vfov(name, scene_mesh):
    bvh = build_bvh(scene_mesh)
    lo, hi = preset(name).vfov
    for prof in preset_rig(name):
        scan = cast_scan(bvh, prof, Pose6D(0.0, 0.0, 0.0), frame="sensor")
        pts = scan.cloud.points
        assert len(pts) > 0
        elev = np.degrees(np.arcsin(np.clip(pts[:, 2] / np.linalg.norm(pts, axis=1), -1, 1)))
        assert elev.min() >= lo - 1e-9 and elev.max() <= hi + 1e-9
