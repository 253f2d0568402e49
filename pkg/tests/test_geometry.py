import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapmerge.geometry import (
    PointCloud, Pose, SpatialIndex, between, compose, kabsch, radius_neighbors, so3_exp, so3_log,
    transform_cloud, voxel_downsample,
)

from conftest import random_pose

vec3 = st.lists(st.floats(-50, 50), min_size=3, max_size=3)
rotvec = st.lists(st.floats(-3, 3), min_size=3, max_size=3)


@st.composite
def poses(draw):
    return Pose(so3_exp(np.array(draw(rotvec))), np.array(draw(vec3)))


def test_compose_examples():
    P = Pose.from_yaw(0.7, (1, 2, 3))
    assert compose(Pose.identity(), P).allclose(P)
    assert compose(P, P.inverse()).allclose(Pose.identity())
    out = compose(Pose.from_yaw(np.pi / 2, (1, 0, 0)), Pose(np.eye(3), (1, 0, 0)))
    assert out.allclose(Pose.from_yaw(np.pi / 2, (1, 1, 0)))


def test_between_examples():
    P = Pose.from_yaw(-1.2, (4, 0, 1))
    assert between(P, P).allclose(Pose.identity())
    assert between(Pose.identity(), P).allclose(P)
    out = between(Pose.from_yaw(np.pi / 2, (1, 0, 0)), Pose.from_yaw(np.pi / 2, (1, 1, 0)))
    assert out.allclose(Pose(np.eye(3), (1, 0, 0)))


def test_transform_cloud_examples():
    c = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    assert np.array_equal(transform_cloud(Pose.identity(), c).points, c.points)
    out = transform_cloud(Pose(np.eye(3), (0, 0, 1)), PointCloud([[0, 0, 0]]))
    assert np.allclose(out.points, [[0, 0, 1]])
    out = transform_cloud(Pose.from_yaw(np.pi / 2), PointCloud([[1, 0, 0]]))
    assert np.allclose(out.points, [[0, 1, 0]], atol=1e-12)


def test_transform_cloud_rotates_normals():
    c = PointCloud([[1, 0, 0]], [[1, 0, 0]])
    out = transform_cloud(Pose.from_yaw(np.pi / 2, (5, 5, 5)), c)
    assert np.allclose(out.normals, [[0, 1, 0]], atol=1e-12)


def test_voxel_downsample_examples():
    assert len(voxel_downsample(PointCloud(np.zeros((0, 3))), 1.0)) == 0
    assert np.allclose(voxel_downsample(PointCloud([[0.3, 0.2, 0.1]]), 1.0).points, [[0.3, 0.2, 0.1]])
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    out = voxel_downsample(PointCloud(corners), 2.0)
    assert np.allclose(out.points, [[0.5, 0.5, 0.5]])


def test_voxel_downsample_negative_coordinates_use_floor():
    out = voxel_downsample(PointCloud([[-0.1, 0, 0], [0.1, 0, 0]]), 1.0)
    assert len(out) == 2


def test_voxel_downsample_size_and_idempotence(rng):
    c = PointCloud(rng.uniform(-5, 5, (2000, 3)))
    d = voxel_downsample(c, 0.7)
    assert len(d) <= len(c)
    # centroids stay inside their own voxel, so a second pass changes nothing
    assert np.allclose(voxel_downsample(d, 0.7).points, d.points)


def test_radius_neighbors_examples(rng):
    pts = rng.uniform(0, 1, (100, 3))
    idx = SpatialIndex(pts)
    dmin = np.min(np.linalg.norm(pts[1:] - pts[0], axis=1))
    assert radius_neighbors(idx, pts[0] + 10, 0.1) == []
    assert 0 in radius_neighbors(idx, pts[0], 1e-9)
    got = radius_neighbors(idx, pts[0], 0.99 * dmin)
    assert got == [0]


@pytest.mark.parametrize("n", [10, 100, 1000])
def test_spatial_index_matches_linear_scan(rng, n):
    pts = rng.uniform(0, 1, (n, 3))
    idx = SpatialIndex(pts)
    for q in rng.uniform(0, 1, (20, 3)):
        d = np.linalg.norm(pts - q, axis=1)
        assert sorted(radius_neighbors(idx, q, 0.3)) == sorted(np.flatnonzero(d <= 0.3).tolist())
        dd, ii = idx.knn(q, k=5)
        assert np.allclose(np.sort(dd), np.sort(d)[:5])
        assert set(np.atleast_1d(ii).tolist()) == set(np.argsort(d)[:5].tolist())


@settings(max_examples=60, deadline=None)
@given(poses(), poses(), poses())
def test_compose_associative(a, b, c):
    assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(poses())
def test_pose_invariants(p):
    R = p.rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert compose(p, p.inverse()).allclose(Pose.identity(), atol=1e-9)
    q = Pose.from_quaternion(p.as_quaternion(), p.translation)
    assert q.allclose(p, atol=1e-9)
    assert Pose.exp(p.log()).allclose(p, atol=1e-8)


def test_so3_log_near_pi():
    w = np.array([0.0, 0.0, np.pi - 1e-9])
    assert np.allclose(so3_exp(so3_log(so3_exp(w))), so3_exp(w), atol=1e-9)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(2 * np.eye(3), np.zeros(3))


def test_pointcloud_invariants():
    with pytest.raises(ValueError):
        PointCloud([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [[2, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [[1, 0, 0], [0, 1, 0]])


def test_kabsch_recovers_transform(rng):
    T = random_pose(rng)
    src = rng.normal(size=(30, 3))
    R, t = kabsch(src, T.apply(src))
    assert Pose(R, t).allclose(T, atol=1e-9)
