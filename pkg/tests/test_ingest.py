import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import in_oriented_box, neighbor_means_oracle
from resim.geometry import SOURCE_SIDE, SOURCE_TOP, PointCloud, Pose6D, pose_to_transform
from resim.ingest import (
    BoxLabel,
    Frame,
    ManifestError,
    box_to_frame,
    build_ray_bundle,
    filter_outliers,
    format_label_line,
    load_manifest,
    neighbor_mean_distances,
    outlier_mask,
    parse_label_line,
    points_in_box,
    read_labels,
    register_frames,
    remove_dynamic_points,
    write_manifest,
)
from resim.ply import write_ply


def _box(center=(0, 0, 0), size=(4, 2, 1.5), yaw=0.0, dynamic=True, frame="frame"):
    return BoxLabel("Vehicle", center, size, yaw, 0, dynamic, frame)


def _frame(points, pose=Pose6D(), idx=0, source=SOURCE_TOP):
    return Frame(PointCloud(np.asarray(points, dtype=float)), pose, float(idx), idx, source)


def test_point_at_center_removed_and_outside_kept():
    f = _frame([[1.0, 2.0, 0.5], [1.0 + 4.0, 2.0, 0.5]])
    out = remove_dynamic_points(f, [_box(center=(1, 2, 0.5))])
    assert out.points.tolist() == [[5.0, 2.0, 0.5]]


def test_static_boxes_ignored():
    f = _frame([[0.0, 0.0, 0.0]])
    assert len(remove_dynamic_points(f, [_box(dynamic=False)])) == 1


def test_world_boxes_rejected_by_removal():
    with pytest.raises(ValueError):
        remove_dynamic_points(_frame([[0.0, 0, 0]]), [_box(frame="world")])


def test_dynamic_removal_matches_containment_oracle():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-10, 10, (1000, 3))
    boxes = [BoxLabel("Vehicle", rng.uniform(-8, 8, 3), rng.uniform(1, 6, 3), rng.uniform(-math.pi, math.pi),
                      0, True) for _ in range(5)]
    out = remove_dynamic_points(_frame(pts), boxes)
    expected = [p for p in pts if not any(in_oriented_box(p, b.center, b.size, b.yaw) for b in boxes)]
    assert np.array_equal(out.points, np.array(expected))


def test_box_to_frame_round_trip_containment():
    pose = Pose6D(10, -3, 1.5, 0, 0.7, 0)
    world = _box(center=(14, -1, 1), yaw=1.1, frame="world")
    local = box_to_frame(world, pose)
    assert local.coordinate_frame == "frame"
    p_local = np.array(local.center)
    assert np.allclose(pose_to_transform(pose).apply(p_local), world.center)
    assert local.yaw == pytest.approx(1.1 - 0.7)


def test_register_single_identity_frame_is_unchanged():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    out = register_frames([_frame(pts)])
    assert np.array_equal(out.points, pts)
    assert out.source.tolist() == [SOURCE_TOP] * 50


def test_register_shifted_second_frame():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    out = register_frames([_frame(pts), _frame(pts, Pose6D(x=1.0), 1)])
    assert np.allclose(out.points[20:] - out.points[:20], [1.0, 0.0, 0.0], atol=1e-12)


def test_register_empty_sequence_rejected():
    with pytest.raises(ValueError):
        register_frames([])


coords = st.floats(-50, 50, allow_nan=False)
angles = st.floats(-math.pi, math.pi)
poses = st.builds(Pose6D, coords, coords, coords, angles, angles, st.floats(-1.4, 1.4))


@given(st.lists(poses, min_size=1, max_size=4))
def test_register_round_trip_recovers_local_points(pose_list):
    rng = np.random.default_rng(len(pose_list))
    frames = [_frame(rng.uniform(-20, 20, (10, 3)), p, i) for i, p in enumerate(pose_list)]
    out = register_frames(frames)
    assert len(out) == 10 * len(frames)
    ref = pose_to_transform(pose_list[0])
    for i, f in enumerate(frames):
        back = pose_to_transform(f.sensor_pose).inverse().apply(ref.apply(out.points[10 * i:10 * (i + 1)]))
        assert np.allclose(back, f.cloud.points, atol=1e-9)


def test_neighbor_means_match_brute_force():
    pts = np.random.default_rng(3).normal(size=(200, 3))
    assert np.allclose(neighbor_mean_distances(pts, 8), neighbor_means_oracle(pts, 8), atol=1e-12)


def _ring(n, radius, center=(0.0, 0.0, 0.0)):
    a = 2 * np.pi * np.arange(n) / n
    return np.column_stack([radius * np.cos(a), radius * np.sin(a), np.zeros(n)]) + np.asarray(center)


def test_far_point_removed_from_cluster():
    rng = np.random.default_rng(11)
    pts = np.vstack([rng.normal(scale=0.1, size=(100, 3)), [[100.0, 0.0, 0.0]]])
    means = neighbor_means_oracle(pts, 16)
    expected = means <= means.mean() + 2 * means.std()
    assert not expected[-1] and expected[:-1].all()
    keep = outlier_mask(PointCloud(pts), k=16, sigma_mult=2.0)
    assert np.array_equal(keep, expected)


@given(n=st.integers(40, 200), radius=st.floats(0.05, 2.0),
       far=st.tuples(st.floats(50, 500), st.floats(-50, 50), st.floats(-50, 50)))
def test_outlier_filter_idempotent_on_cluster_plus_outlier(n, radius, far):
    cloud = PointCloud(np.vstack([_ring(n, radius), [far]]))
    once = filter_outliers(cloud, 16, 2.0)
    assert len(once) == n
    assert np.array_equal(filter_outliers(once, 16, 2.0).points, once.points)


def test_uniform_layout_keeps_everything():
    # equally spaced points on a closed ring: every point has the same neighbourhood
    pts = _ring(100, 5.0, center=(3.0, -2.0, 1.0))
    means = neighbor_means_oracle(pts, 4)
    assert np.ptp(means) < 1e-12
    assert len(filter_outliers(PointCloud(pts), k=4, sigma_mult=3.0)) == 100


def test_tiny_cloud_passes_through():
    c = PointCloud(np.random.default_rng(0).normal(size=(5, 3)))
    assert filter_outliers(c, k=5) is not None
    assert len(filter_outliers(c, k=5)) == 5


def test_ray_3_4_5():
    rays = build_ray_bundle([_frame([[3.0, 4.0, 0.0]])])
    assert np.allclose(rays.directions[0], [0.6, 0.8, 0.0])
    assert rays.depths[0] == pytest.approx(5.0)
    assert rays.weights[0] == 1.0


def test_ray_weights_top_and_side():
    rng = np.random.default_rng(5)
    top = _frame(rng.uniform(1, 5, (30, 3)), idx=0, source=SOURCE_TOP)
    side = _frame(rng.uniform(1, 5, (12, 3)), Pose6D(y=1.0), 1, SOURCE_SIDE)
    only_top = build_ray_bundle([top], side_weight=4.0)
    assert (only_top.weights == 1.0).all()
    mixed = build_ray_bundle([top, side], side_weight=4.0)
    assert mixed.weights.sum() == 30 + 4 * 12


def test_zero_range_point_skipped_and_counted():
    rays = build_ray_bundle([_frame([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])])
    assert len(rays) == 1
    assert rays.skipped == 1


@given(st.lists(poses, min_size=1, max_size=3))
def test_ray_endpoints_reproduce_registered_points(pose_list):
    rng = np.random.default_rng(1)
    frames = [_frame(rng.uniform(-20, 20, (15, 3)), p, i) for i, p in enumerate(pose_list)]
    rays = build_ray_bundle(frames)
    assert np.all(np.abs(np.linalg.norm(rays.directions, axis=1) - 1) < 1e-12)
    assert np.all(np.linalg.norm(rays.endpoints() - register_frames(frames).points, axis=1) < 1e-9)


def test_ray_bundle_respects_keep_mask():
    frames = [_frame([[1.0, 0, 0], [2.0, 0, 0]]), _frame([[3.0, 0, 0]], idx=1)]
    rays = build_ray_bundle(frames, keep=np.array([True, False, True]))
    assert rays.depths.tolist() == [1.0, 3.0]


def test_label_line_round_trip():
    box = parse_label_line("Pedestrian 1.5 -2 0.9 0.8 0.6 1.8 0.25 1")
    assert box.class_name == "Pedestrian" and box.is_dynamic
    assert parse_label_line(format_label_line(box)) == box


@pytest.mark.parametrize("line", ["Vehicle 1 2 3", "Truck 0 0 0 1 1 1 0 0", "Vehicle 0 0 0 1 -1 1 0 0",
                                  "Vehicle 0 0 0 1 1 1 0 maybe"])
def test_label_line_errors(line):
    with pytest.raises(ValueError):
        parse_label_line(line)


def test_read_labels_reports_line(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text("# header\nVehicle 0 0 0 4 2 1.5 0 1\nVehicle 0 0\n")
    with pytest.raises(ValueError, match=r"l\.txt:3"):
        read_labels(p)


def _write_sequence(tmp_path, n=2):
    entries = []
    for i in range(n):
        write_ply(PointCloud(np.full((3, 3), float(i + 1))), tmp_path / f"{i}.ply")
        (tmp_path / f"{i}.txt").write_text("Vehicle 10 0 1 4 2 1.5 0 1\n")
        entries.append({"cloud": f"{i}.ply", "pose": [i, 0, 0, 0, 0, 0], "labels": f"{i}.txt"})
    write_manifest(tmp_path / "m.yaml", entries, label_frame="world")
    return tmp_path / "m.yaml"


def test_manifest_loads_frames_and_localises_world_labels(tmp_path):
    frames, labels = load_manifest(_write_sequence(tmp_path)).load()
    assert [f.frame_index for f in frames] == [0, 1]
    assert frames[1].sensor_pose.x == 1.0
    assert labels[1][0].coordinate_frame == "frame"
    assert labels[1][0].center[0] == pytest.approx(9.0)


def test_manifest_with_no_frames_names_field(tmp_path):
    (tmp_path / "m.yaml").write_text("frames: []\n")
    with pytest.raises(ManifestError) as exc:
        load_manifest(tmp_path / "m.yaml")
    assert exc.value.field == "manifest.frames"


def test_manifest_missing_cloud_and_bad_pose(tmp_path):
    (tmp_path / "m.yaml").write_text("frames:\n  - {cloud: nope.ply, pose: [0,0,0,0,0,0]}\n")
    with pytest.raises(ManifestError, match=r"frames\[0\]\.cloud"):
        load_manifest(tmp_path / "m.yaml")
    write_ply(PointCloud(np.zeros((1, 3))), tmp_path / "a.ply")
    (tmp_path / "m.yaml").write_text("frames:\n  - {cloud: a.ply, pose: [0, 0, 0]}\n")
    with pytest.raises(ManifestError, match=r"frames\[0\]\.pose"):
        load_manifest(tmp_path / "m.yaml")


def test_points_in_box_is_inclusive_on_faces():
    box = _box(size=(2, 2, 2))
    assert points_in_box(np.array([[1.0, 1.0, 1.0], [1.0 + 1e-9, 0, 0]]), box).tolist() == [True, False]
