import numpy as np
import pytest

from mapmerge import diagnostics
from mapmerge.cli_io import (
    EXIT_INPUT, EXIT_OK, EXIT_PIPELINE, InputError, SessionManifest, atomic_write, cli, loops_text,
    parse_key_value, read_cloud, read_config, read_intra_loops, read_loops, read_manifest_config,
    read_pose_file, read_session, run_manifest, write_cloud, write_pose_file, write_session,
)
from mapmerge.geometry import PointCloud, Pose
from mapmerge.pipeline import IntraLoop, LoopConstraint, PipelineConfig, Session
from mapmerge.pose_graph import QUERY

from conftest import random_pose


def _write(path, text):
    path.write_text(text)
    return path


# ------------------------------------------------------------ pose files ----

def test_pose_identity_line(tmp_path):
    out = read_pose_file(_write(tmp_path / "p.txt", "0 0 0 0 0 0 0 1\n"))
    assert len(out) == 1 and out[0][0] == 0 and out[0][1].allclose(Pose.identity(), atol=0)


def test_pose_comment_only(tmp_path):
    assert read_pose_file(_write(tmp_path / "p.txt", "# nothing\n\n   # here\n")) == []


def test_pose_non_unit_quaternion(tmp_path):
    p = _write(tmp_path / "p.txt", "0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 0.5\n")
    with pytest.raises(InputError, match=r"p\.txt:2"):
        read_pose_file(p)


def test_pose_near_unit_normalized(tmp_path):
    (_, p), = read_pose_file(_write(tmp_path / "p.txt", "3 1 2 3 0 0 0 1.0005\n"))
    np.testing.assert_allclose(p.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(p.translation, [1, 2, 3])


@pytest.mark.parametrize("line", ["0 0 0 0 0 0 1", "x 0 0 0 0 0 0 1", "0 0 0 a 0 0 0 1", "0 nan 0 0 0 0 0 1"])
def test_pose_malformed(tmp_path, line):
    with pytest.raises(InputError, match=":1"):
        read_pose_file(_write(tmp_path / "p.txt", line + "\n"))


def test_pose_round_trip(tmp_path, rng):
    poses = [random_pose(rng, 100.0) for _ in range(20)]
    write_pose_file(tmp_path / "p.txt", poses, "header")
    back = read_pose_file(tmp_path / "p.txt")
    assert [i for i, _ in back] == list(range(20))
    for a, (_, b) in zip(poses, back):
        assert a.allclose(b, atol=1e-6)


# ---------------------------------------------------------------- clouds ----

def test_cloud_single_point(tmp_path):
    p = _write(tmp_path / "c.ply", "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
               "property float y\nproperty float z\nend_header\n1 2 3\n")
    c = read_cloud(p)
    assert len(c) == 1 and np.array_equal(c.points, [[1, 2, 3]])


def test_cloud_round_trip(tmp_path, rng):
    pts = rng.uniform(-1, 1, (100, 3))
    write_cloud(PointCloud(pts), tmp_path / "c.ply")
    assert np.abs(read_cloud(tmp_path / "c.ply").points - pts).max() < 1e-7


def test_cloud_round_trip_normals(tmp_path, rng):
    n = rng.normal(size=(10, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    write_cloud(PointCloud(rng.uniform(-5, 5, (10, 3)), n), tmp_path / "c.ply")
    c = read_cloud(tmp_path / "c.ply")
    assert c.has_normals and np.abs(c.normals - n).max() < 1e-7


def test_cloud_empty_round_trip(tmp_path):
    write_cloud(PointCloud(np.zeros((0, 3))), tmp_path / "c.ply")
    assert len(read_cloud(tmp_path / "c.ply")) == 0


def test_cloud_binary_rejected(tmp_path):
    p = tmp_path / "c.ply"
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\n"
                  b"property float y\nproperty float z\nend_header\n" + np.zeros(3, np.float32).tobytes())
    with pytest.raises(InputError, match="unsupported PLY format"):
        read_cloud(p)


@pytest.mark.parametrize("body", [
    "element vertex 1\nproperty list uchar int idx\nend_header\n1 0\n",
    "element vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 1\n"
    "property list uchar int vertex_indices\nend_header\n0 0 0\n3 0 0 0\n",
    "element vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
])
def test_cloud_unsupported_layout(tmp_path, body):
    with pytest.raises(InputError):
        read_cloud(_write(tmp_path / "c.ply", "ply\nformat ascii 1.0\n" + body))


# -------------------------------------------------------------- sessions ----

def test_session_round_trip(tmp_path, rng):
    poses = [random_pose(rng, 10.0) for _ in range(3)]
    scans = [PointCloud(rng.uniform(-3, 3, (n, 3))) for n in (5, 1, 8)]
    cov = np.diag(np.arange(1.0, 7.0)) * 1e-3
    s = Session("q1", QUERY, poses, scans, [IntraLoop(0, 2, random_pose(rng), cov)])
    back = read_session(write_session(s, tmp_path / "s"))
    assert back.id == "q1" and back.role == QUERY and len(back) == 3
    for a, b in zip(s.scans, back.scans):
        assert np.abs(a.points - b.points).max() < 1e-7
    assert back.intra_loops[0].l == 0 and back.intra_loops[0].m == 2
    np.testing.assert_allclose(back.intra_loops[0].cov, cov, rtol=1e-8)


def test_session_missing_scan(tmp_path, rng):
    s = Session("c", "central", [Pose.identity()] * 2, [PointCloud(np.zeros((1, 3)))] * 2)
    write_session(s, tmp_path / "s")
    (tmp_path / "s" / "scans" / "000001.ply").unlink()
    with pytest.raises(InputError, match="missing scan"):
        read_session(tmp_path / "s")


def test_session_manifest_requires_keys(tmp_path):
    _write(tmp_path / "session.txt", "poses=poses.txt\n")
    with pytest.raises(InputError, match="missing keys"):
        SessionManifest.read(tmp_path)


def test_intra_loops_fields(tmp_path):
    with pytest.raises(InputError, match="9 or 30"):
        read_intra_loops(_write(tmp_path / "l.txt", "0 1 0 0 0 0 0 0 1 5\n"))


# ---------------------------------------------------------------- config ----

def test_key_value_parsing():
    assert parse_key_value("a=1\n# c\n b = x y # tail\n") == {"a": "1", "b": "x y"}
    with pytest.raises(InputError, match=":1"):
        parse_key_value("novalue\n")


def test_config_file(tmp_path):
    c = read_config(_write(tmp_path / "c.txt", "window=7\nd_max=1.5\n"))
    assert c.window == 7 and c.d_max == 1.5 and c.voxel_map == 2.0
    with pytest.raises(InputError):
        read_config(_write(tmp_path / "bad.txt", "windw=7\n"))


def test_manifest_config_echo_round_trip(tmp_path):
    cfg = PipelineConfig(voxel_submap=0.35, window=11, tau_mse=0.1 + 0.2, registration_mode="so3", seed=9)
    rec = diagnostics.Recorder()
    with rec.stage("loop search"):
        pass
    atomic_write(tmp_path / "m.txt", run_manifest(cfg, rec, {"accepted_loops": 4}))
    assert read_manifest_config(tmp_path / "m.txt") == cfg


def test_loops_report_round_trip(tmp_path, rng):
    loops = [LoopConstraint(3, 7, random_pose(rng), np.eye(6), 0.125, True, 0.5),
             LoopConstraint(4, 9, random_pose(rng), np.eye(6), float("inf"), False, 0.0)]
    atomic_write(tmp_path / "l.txt", loops_text(loops))
    back = read_loops(tmp_path / "l.txt")
    assert [(b.j, b.k, b.accepted, b.t_mse) for b in back] == [(3, 7, True, 0.125), (4, 9, False, float("inf"))]
    assert back[0].z.allclose(loops[0].z, atol=1e-6)


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write(tmp_path / "d" / "f.txt", "x")
    assert [p.name for p in (tmp_path / "d").iterdir()] == ["f.txt"]


# ------------------------------------------------------------------- cli ----

SYNTH = "seed=1\nn_nodes=60\n"


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    spec = _write(d / "spec.txt", SYNTH)
    assert cli(["synth", "--spec", str(spec), "--out", str(d / "sc")]) == EXIT_OK
    return d / "sc"


@pytest.fixture(scope="module")
def merged(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("merge") / "out"
    code = cli(["merge", str(synth_dir / "central"), str(synth_dir / "query"), "--out", str(out),
                "--window", "5", "--threads", "1"])
    assert code == EXIT_OK
    return out


def test_synth_layout(synth_dir):
    for name in ("central/session.txt", "query/session.txt", "ground_truth/gt_central.txt",
                 "ground_truth/gt_query.txt", "ground_truth/T_gt.txt", "ground_truth/spec.txt"):
        assert (synth_dir / name).is_file()
    assert len(read_session(synth_dir / "query")) == 60


def test_merge_writes_outputs(merged):
    for name in ("central_poses.txt", "query_poses.txt", "anchors.txt", "loops.txt", "graph.txt",
                 "merged_map.ply", "manifest.txt"):
        assert (merged / name).is_file()
    assert len(read_cloud(merged / "merged_map.ply")) > 0
    cfg = read_manifest_config(merged / "manifest.txt")
    assert cfg.window == 5 and cfg.threads == 1 and cfg.voxel_map == 2.0


def test_eval_after_merge(synth_dir, merged, tmp_path, capsys):
    assert cli(["eval", "--gt", str(synth_dir / "ground_truth"), "--est", str(merged),
                "--out", str(tmp_path / "m.txt")]) == EXIT_OK
    rows = parse_key_value((tmp_path / "m.txt").read_text().replace(" ", "="))
    # a 60-node route is too short for tight iSAE bounds; the scenario suite covers accuracy
    assert rows["isae_failure"] == "0" and float(rows["isae_translation_m"]) < 1.0
    assert int(rows["loops_tp"]) >= 0.9 * (int(rows["loops_tp"]) + int(rows["loops_fp"]))


def test_config_flags_win(synth_dir, tmp_path):
    cfg = _write(tmp_path / "c.txt", "window=9\nmin_loops=1000\n")
    out = tmp_path / "o"
    code = cli(["loops", str(synth_dir / "central"), str(synth_dir / "query"), "--config", str(cfg),
                "--window", "2", "--loop-stride", "30", "--initial", str(synth_dir / "ground_truth" / "T_gt.txt"),
                "--out", str(out)])
    assert code == EXIT_OK
    got = read_manifest_config(out / "manifest.txt")
    assert (got.window, got.min_loops, got.loop_stride) == (2, 1000, 30)
    assert len(read_loops(out / "loops.txt")) == 2


def test_merge_failure_leaves_no_output(synth_dir, tmp_path, capsys):
    out = tmp_path / "o"
    code = cli(["merge", str(synth_dir / "central"), str(synth_dir / "query"), "--out", str(out),
                "--window", "2", "--min-loops", "1000"])
    assert code == EXIT_PIPELINE and not out.exists()
    assert "insufficient loops" in capsys.readouterr().err


def test_merge_disjoint_worlds(tmp_path, capsys):
    for seed in (5, 6):
        spec = _write(tmp_path / f"s{seed}.txt", f"seed={seed}\nn_nodes=40\n")
        assert cli(["synth", "--spec", str(spec), "--out", str(tmp_path / str(seed))]) == EXIT_OK
    out = tmp_path / "o"
    code = cli(["merge", str(tmp_path / "5" / "central"), str(tmp_path / "6" / "query"), "--out", str(out),
                "--window", "5"])
    assert code == EXIT_PIPELINE and not out.exists()
    assert "insufficient loops" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert cli(["merge", "a", "b", "--bogus"]) == EXIT_INPUT
    assert "usage:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["register", "only-one"], ["merge", "a", "b", "--window", "x"]])
def test_bad_arguments(argv, capsys):
    assert cli(argv) == EXIT_INPUT


def test_missing_input_file(tmp_path, capsys):
    assert cli(["merge", str(tmp_path / "nope"), str(tmp_path / "nope2")]) == EXIT_INPUT
    assert "input error" in capsys.readouterr().err


def test_register_command(tmp_path, capsys):
    from conftest import structured_scene
    a = structured_scene(3)
    T = Pose.from_yaw(np.radians(40.0), (5.0, -3.0, 0.0))
    write_cloud(a, tmp_path / "a.ply")
    write_cloud(PointCloud(T.apply(a.points)), tmp_path / "b.ply")
    assert cli(["register", str(tmp_path / "a.ply"), str(tmp_path / "b.ply"), "--voxel", "1.0",
                "--out", str(tmp_path / "T.txt")]) == EXIT_OK
    (_, est), = read_pose_file(tmp_path / "T.txt")
    assert est.allclose(T, atol=0.2)
    table = capsys.readouterr().out
    assert "registration" in table and "loop search" not in table and "PGO" not in table


def test_threads_env(synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("MAPMERGE_THREADS", "2")
    out = tmp_path / "o"
    assert cli(["loops", str(synth_dir / "central"), str(synth_dir / "query"), "--window", "2",
                "--loop-stride", "30", "--initial", str(synth_dir / "ground_truth" / "T_gt.txt"),
                "--out", str(out)]) == EXIT_OK
    assert read_manifest_config(out / "manifest.txt").threads == 2
