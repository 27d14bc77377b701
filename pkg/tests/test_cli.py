import csv
import io
import math

import numpy as np
import pytest
import yaml

from resim.cli import EXIT_INPUT, EXIT_OK, main
from resim.geometry import Pose6D
from resim.ingest import BoxLabel
from resim.lidar import preset
from resim.ply import read_mesh, read_ply
from resim.replay import fit_size_map, format_export_line, map_size, parse_export_line
from resim.scenes import plane_mesh, write_sequence

PLANE_POSES = [Pose6D(0.5 * i, 0.0, 0.0, 0.0, 0.0, 0.0) for i in range(3)]


def _light(name):
    # 500 azimuth steps keeps each scan small
    p = preset(name)
    return p.with_(points_per_second=int(500 * p.channels * p.rotation_rate))


@pytest.fixture(scope="module")
def plane_seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("plane")
    write_sequence(root / "seq", plane_mesh(10.0, 0.0, divisions=4), _light("kitti"), PLANE_POSES, seed=3)
    return root


def _config(root, name="cfg.yaml", **extra):
    doc = {"manifest": "seq/manifest.yaml", "output": "out", "seed": 11, "source_profile": "kitti",
           "grid": {"voxel_size": 0.2}, "tsdf": {"truncation_distance": 0.5}}
    doc.update(extra)
    path = root / name
    path.write_text(yaml.safe_dump(doc))
    return path


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_presets_command(capsys):
    assert main(["presets"]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    names = {r["name"] for r in rows}
    assert {"kitti", "nuscenes", "waymo-top", "carla-default-32"} <= names


def test_zero_frame_manifest_exits_2(tmp_path, capsys):
    (tmp_path / "seq").mkdir()
    (tmp_path / "seq" / "manifest.yaml").write_text("frames: []\n")
    cfg = _config(tmp_path)
    assert main(["reconstruct", "--config", str(cfg)]) == EXIT_INPUT
    assert "manifest.frames" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_output_and_bad_seed(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\n")
    assert main(["reconstruct", "--config", str(cfg)]) == EXIT_INPUT
    assert "output" in capsys.readouterr().err
    cfg.write_text("seed: -4\noutput: o\n")
    assert main(["reconstruct", "--config", str(cfg)]) == EXIT_INPUT
    assert "seed" in capsys.readouterr().err


def test_unknown_config_key_names_field(plane_seq, capsys):
    cfg = _config(plane_seq, "typo.yaml", tsdf={"truncation_distance": 0.5, "truncation": 0.3})
    assert main(["reconstruct", "--config", str(cfg), "--out", str(plane_seq / "typo_out")]) == EXIT_INPUT
    assert "tsdf.truncation" in capsys.readouterr().err
    assert not (plane_seq / "typo_out").exists()


def test_unknown_preset_lists_presets(plane_seq, capsys):
    cfg = _config(plane_seq, "badp.yaml")
    out = plane_seq / "badp_out"
    assert main(["simulate", "--config", str(cfg), "--profile", "velodyne-9000", "--out", str(out)]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "velodyne-9000" in err and "kitti" in err and "carla-default-32" in err
    assert not out.exists()


def test_reconstruct_plane_within_one_voxel(plane_seq):
    out = plane_seq / "rec"
    assert main(["reconstruct", "--config", str(_config(plane_seq)), "--out", str(out)]) == EXIT_OK
    mesh = read_mesh(out / "mesh_tsdf.ply")
    assert mesh.n_triangles > 0
    assert np.abs(mesh.vertices[:, 2]).max() <= 0.2
    assert (out / "grid_tsdf.sdf").is_file() and (out / "reconstruct.csv").is_file()


def test_simulate_kitti_elevations_and_cube_labels(plane_seq):
    rec = plane_seq / "rec_sim"
    cfg = _config(plane_seq, "sim.yaml", replay={"object_tracks": "tracks.txt"})
    (plane_seq / "tracks.txt").write_text(
        "object cube Vehicle 1 1 1\n" + "".join(f"{t} 10 0 0 0 0 0\n" for t in range(3)))
    assert main(["reconstruct", "--config", str(cfg), "--out", str(rec)]) == EXIT_OK
    assert main(["simulate", "--config", str(cfg), "--out", str(rec), "--profile", "kitti"]) == EXIT_OK
    sim = rec / "sim" / "kitti"
    for t in range(3):
        cloud = read_ply(sim / "clouds" / f"{t:06d}.ply")
        x, y, z = cloud.points.T
        el = np.degrees(np.arctan2(z, np.hypot(x, y)))
        assert len(el) > 0 and el.min() >= -24.9 - 1e-9 and el.max() <= 2.0 + 1e-9
        lines = [ln for ln in (sim / "labels" / f"{t:06d}.txt").read_text().splitlines()
                 if ln and not ln.startswith("#")]
        assert len(lines) == 1
        box = parse_export_line(lines[0])
        assert box.center[0] == pytest.approx(10.0, abs=1e-6)
    rows = list(csv.DictReader(open(rec / "simulate.csv")))
    assert [int(r["frame"]) for r in rows] == [0, 1, 2]


def test_reconstruct_both_writes_comparison(plane_seq):
    out = plane_seq / "both"
    cfg = _config(plane_seq, "both.yaml", optimizer={"epochs": 40}, volume_fit={"max_rays": 2000, "voxel_size": 0.4},
                  render={"num_samples": 64})
    assert main(["reconstruct", "--config", str(cfg), "--out", str(out), "--method", "both"]) == EXIT_OK
    assert (out / "mesh_tsdf.ply").is_file() and (out / "mesh_volume-fit.ply").is_file()
    rows = list(csv.DictReader(open(out / "comparison.csv")))
    assert len(rows) == 1 and rows[0]["mesh_a"] == "tsdf" and rows[0]["mesh_b"] == "volume-fit"
    assert math.isfinite(float(rows[0]["cd"]))
    assert (out / "trace_volume-fit.csv").is_file()


def test_evaluate_scan_against_itself(plane_seq, capsys):
    man = plane_seq / "seq" / "manifest.yaml"
    out = plane_seq / "self_eval"
    cfg = _config(plane_seq, "selfeval.yaml")
    assert main(["evaluate", "--config", str(cfg), "--real", str(man), "--sim", str(man), "--out", str(out)]) == EXIT_OK
    (row,) = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert float(row["cd"]) == 0.0 and float(row["rmse"]) == 0.0


def test_evaluate_without_common_frames_exits_2(plane_seq, tmp_path, capsys):
    real = plane_seq / "seq" / "manifest.yaml"
    doc = yaml.safe_load(real.read_text())
    for e in doc["frames"]:
        e["frame_index"] += 100
        e["cloud"] = str(plane_seq / "seq" / e["cloud"])
    other = tmp_path / "shifted.yaml"
    other.write_text(yaml.safe_dump(doc))
    cfg = _config(plane_seq, "noeval.yaml")
    code = main(["evaluate", "--config", str(cfg), "--real", str(real), "--sim", str(other),
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_INPUT
    assert "--sim" in capsys.readouterr().err


def test_simulate_is_deterministic_across_runs_and_threads(plane_seq):
    cfg = _config(plane_seq, "det.yaml", target_profiles=["carla-default-32"])
    mesh = plane_seq / "detmesh.ply"
    from resim.ply import write_ply
    write_ply(plane_mesh(10.0, 0.0, divisions=4), mesh)
    outs = []
    for i, threads in enumerate((1, 4, 4)):
        out = plane_seq / f"det{i}"
        assert main(["simulate", "--config", str(cfg), "--mesh", str(mesh), "--out", str(out),
                     "--threads", str(threads)]) == EXIT_OK
        outs.append(_files(out))
    assert outs[0] and outs[0] == outs[1] == outs[2]


# --- stats --------------------------------------------------------------------


def _write_labels(path, sizes, cls="Vehicle"):
    lines = [f"{cls} 0 0 0 {l:.6f} {w:.6f} {h:.6f} 0 0" for l, w, h in sizes]
    path.write_text("\n".join(lines) + "\n")
    return path


def _divergence(capsys, *paths):
    assert main(["stats", *map(str, paths)]) == EXIT_OK
    text = capsys.readouterr().out
    matrix = text.split("\n\n", 1)[1]
    return list(csv.reader(io.StringIO(matrix)))


def test_stats_self_and_disjoint(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = _write_labels(tmp_path / "a.txt", rng.uniform([3.5, 1.6, 1.4], [5, 2, 1.8], size=(200, 3)))
    b = _write_labels(tmp_path / "b.txt", rng.uniform([8, 3, 3], [9, 4, 4], size=(200, 3)))
    m = _divergence(capsys, a, b)
    assert m[0] == ["source", str(a), str(b)]
    assert float(m[1][1]) == 0.0 and float(m[2][2]) == 0.0
    assert float(m[1][2]) == 1.0 == float(m[2][1])


def test_stats_reads_exported_labels_and_writes_csv(tmp_path):
    exported = tmp_path / "sim.txt"
    box = BoxLabel("Vehicle", (10.0, 0.0, 0.5), (4.0, 1.8, 1.5), 0.0)
    exported.write_text("# header\n" + format_export_line(box) + "\n")
    ingest = _write_labels(tmp_path / "real.txt", [(4.0, 1.8, 1.5)])
    out = tmp_path / "stats"
    assert main(["stats", str(exported), str(ingest), "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader(open(out / "divergence.csv")))
    assert float(rows[1][2]) == 0.0
    assert (out / "histograms.csv").read_text().startswith("source,class,dimension")


def test_stats_size_mapping_reduces_divergence(tmp_path, capsys):
    rng = np.random.default_rng(5)
    src = [BoxLabel("Vehicle", (0, 0, 0), tuple(s)) for s in rng.normal([4.0, 1.7, 1.5], 0.15, size=(400, 3))]
    tgt = [BoxLabel("Vehicle", (0, 0, 0), tuple(s)) for s in rng.normal([4.8, 2.0, 1.7], 0.25, size=(400, 3))]
    mapping = fit_size_map(src, tgt)
    mapped = [map_size(b.size, b.class_name, mapping) for b in src]
    ps = _write_labels(tmp_path / "src.txt", [b.size for b in src])
    pt = _write_labels(tmp_path / "tgt.txt", [b.size for b in tgt])
    pm = _write_labels(tmp_path / "mapped.txt", mapped)
    m = _divergence(capsys, ps, pt, pm)
    unmapped, after = float(m[1][2]), float(m[3][2])
    assert after < unmapped


def test_stats_bad_line_reports_file_and_line(tmp_path, capsys):
    p = tmp_path / "bad.txt"
    p.write_text("Vehicle 0 0 0 4 2 1.5 0 0\n\nVehicle 0 0 zero 4 2 1.5 0 0\n")
    assert main(["stats", str(p)]) == EXIT_INPUT
    assert f"{p}:3" in capsys.readouterr().err


def test_stats_rejects_bad_bin_width(tmp_path, capsys):
    p = _write_labels(tmp_path / "a.txt", [(4, 2, 1.5)])
    assert main(["stats", str(p), "--bin-width", "0"]) == EXIT_INPUT
    assert "--bin-width" in capsys.readouterr().err


def test_threads_environment_override(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("RESIM_THREADS", "many")
    cfg = tmp_path / "c.yaml"
    cfg.write_text("output: o\n")
    assert main(["reconstruct", "--config", str(cfg)]) == EXIT_INPUT
    assert "RESIM_THREADS" in capsys.readouterr().err
