import numpy as np
import pytest

from mapmerge.features import (
    FPFH_BINS, compute_fpfh, estimate_normals, extract_keypoints, match_features, mutual_nearest,
    tuple_filter,
)
from mapmerge.geometry import PointCloud, Pose, transform_cloud

from conftest import random_pose, structured_scene


def test_normals_plane():
    g = np.stack(np.meshgrid(np.arange(10.0), np.arange(10.0)), -1).reshape(-1, 2)
    c = estimate_normals(PointCloud(np.column_stack([g, np.zeros(len(g))])), 1.5)
    assert np.allclose(np.abs(c.normals[:, 2]), 1.0, atol=1e-3)


def test_normals_degenerate_neighbourhood():
    c = estimate_normals(PointCloud([[0, 0, 0], [0.1, 0, 0]]), 1.0)
    assert not c.valid_normals.any()


def test_normals_sphere(rng):
    p = rng.normal(size=(4000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    c = estimate_normals(PointCloud(p), 0.25)
    dots = np.abs(np.sum(c.normals * p, axis=1))
    assert np.all(dots[c.valid_normals] >= 0.99)


def test_normals_face_viewpoint():
    g = np.stack(np.meshgrid(np.arange(6.0), np.arange(6.0)), -1).reshape(-1, 2)
    c = estimate_normals(PointCloud(np.column_stack([g, np.zeros(len(g))])), 1.5)
    assert np.all(c.normals[:, 2] > 0)


@pytest.fixture(scope="module")
def described():
    c = estimate_normals(structured_scene(seed=3, extent=15, n_boxes=6, density=3.0), 1.5)
    return c.select(c.valid_normals)


def test_fpfh_layout_and_normalisation(described):
    f = compute_fpfh(described, 2.5)
    assert f.shape == (len(described), 3 * FPFH_BINS)
    sums = f.reshape(len(f), 3, FPFH_BINS).sum(axis=2)
    ok = np.isclose(sums, 100.0, atol=1e-3) | np.isclose(sums, 0.0)
    assert ok.all()
    assert np.isclose(sums, 100.0, atol=1e-3).mean() > 0.95


def test_fpfh_deterministic(described):
    assert np.array_equal(compute_fpfh(described, 2.5), compute_fpfh(described, 2.5))


def test_fpfh_rigid_invariance(described, rng):
    T = random_pose(rng, 30.0)
    f0 = compute_fpfh(described, 2.5)
    f1 = compute_fpfh(transform_cloud(T, described), 2.5)
    assert np.abs(f0 - f1).max() < 1e-6


def test_fpfh_isolated_point():
    c = PointCloud([[0, 0, 0], [100, 0, 0], [100.5, 0, 0]], [[0, 0, 1]] * 3)
    f = compute_fpfh(c, 1.0)
    assert np.all(f[0] == 0)
    assert f[1].sum() > 0


def test_fpfh_matches_bruteforce_reference(rng):
    """Small cloud against a direct double-loop implementation of the histogram."""
    pts = rng.uniform(0, 2, (40, 3))
    n = rng.normal(size=(40, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    r = 0.8
    f = compute_fpfh(PointCloud(pts, n), r)

    def pair_feature(p1, n1, p2, n2):
        dp = p2 - p1
        d = np.linalg.norm(dp)
        a1, a2 = n1 @ dp / d, n2 @ dp / d
        if np.arccos(abs(a1)) > np.arccos(abs(a2)):
            n1, n2, dp, f3 = n2, n1, -dp, -a2
        else:
            f3 = a1
        u = n1
        v = np.cross(dp, u)
        v /= np.linalg.norm(v)
        w = np.cross(u, v)
        f1 = np.arctan2(w @ n2, u @ n2)
        f2 = v @ n2
        return f1, f2, f3, d

    def bins(f1, f2, f3):
        edges = [(f1 + np.pi) / (2 * np.pi), (f2 + 1) / 2, (f3 + 1) / 2]
        return [min(int(np.floor(e * FPFH_BINS)), FPFH_BINS - 1) for e in edges]

    N = len(pts)
    spfh = np.zeros((N, 3 * FPFH_BINS))
    nbrs = [[] for _ in range(N)]
    for i in range(N):
        for j in range(N):
            if i == j or np.linalg.norm(pts[i] - pts[j]) > r:
                continue
            a, p, t, dist = pair_feature(pts[i], n[i], pts[j], n[j])
            for k, b in enumerate(bins(a, p, t)):
                spfh[i, k * FPFH_BINS + b] += 1
            nbrs[i].append((j, dist))
    for i in range(N):
        for k in range(3):
            s = spfh[i, k * FPFH_BINS:(k + 1) * FPFH_BINS].sum()
            if s:
                spfh[i, k * FPFH_BINS:(k + 1) * FPFH_BINS] *= 100.0 / s
    ref = np.zeros_like(spfh)
    for i in range(N):
        if not nbrs[i]:
            continue
        wsum = sum(1.0 / d for _, d in nbrs[i])
        ref[i] = 0.5 * (spfh[i] + sum(spfh[j] / d for j, d in nbrs[i]) / wsum)
    assert np.allclose(f, ref, atol=1e-6)


def test_mutual_nearest_symmetry(rng):
    a = rng.normal(size=(300, 33))
    b = rng.normal(size=(250, 33))
    pairs = mutual_nearest(a, b)
    D = ((a[:, None, :] - b[None]) ** 2).sum(-1)
    ab, ba = D.argmin(1), D.argmin(0)
    ref = {(i, ab[i]) for i in range(len(a)) if ba[ab[i]] == i}
    assert {tuple(p) for p in pairs.tolist()} == ref


def test_mutual_nearest_empty():
    assert mutual_nearest(np.zeros((0, 33)), np.ones((4, 33))).shape == (0, 2)


def test_tuple_filter_keeps_consistent_pairs(rng):
    src = rng.uniform(0, 20, (200, 3))
    T = random_pose(rng)
    dst = T.apply(src)
    good = np.column_stack([np.arange(100), np.arange(100)])
    dst[100:] = rng.uniform(-500, 500, (100, 3))
    bad = np.column_stack([np.arange(100, 200), np.arange(100, 200)])
    pairs = np.vstack([good, bad])
    kept = tuple_filter(src, dst, pairs, seed=1)
    assert len(kept) > 0
    assert np.all(kept[:, 0] < 100)
    assert np.array_equal(kept, tuple_filter(src, dst, pairs, seed=1))


def test_tuple_filter_too_few_pairs():
    assert len(tuple_filter(np.zeros((2, 3)), np.zeros((2, 3)), np.array([[0, 0], [1, 1]]))) == 0


@pytest.fixture(scope="module")
def scene_small():
    return structured_scene(seed=5, extent=30, n_boxes=10, density=4.0)


def test_match_self(scene_small):
    A = match_features(scene_small, scene_small, 1.0)
    assert len(A) > 0
    assert np.allclose(A.source_points, A.target_points)


def test_match_rigid_transform(scene_small):
    T = Pose.from_yaw(2.0, (12, -30, 1))
    A = match_features(scene_small, transform_cloud(T, scene_small), 1.0)
    # voxel centroids of the same surface patch move by up to one voxel diagonal after resampling
    err = np.linalg.norm(T.apply(A.source_points) - A.target_points, axis=1)
    assert np.mean(err < np.sqrt(3.0)) >= 0.8


def _survivors(a, b, voxel=1.0):
    ka, fa = extract_keypoints(a, voxel)
    kb, fb = extract_keypoints(b, voxel)
    mnn = mutual_nearest(fa, fb)
    return len(tuple_filter(ka.points, kb.points, mnn)), len(mnn)


def test_match_disjoint_prunes(scene_small):
    far = Pose(np.eye(3), (100, 0, 0))
    other = transform_cloud(far, structured_scene(seed=99, extent=80, n_boxes=30, density=4.0))
    kept, mnn = _survivors(scene_small, other)
    assert kept <= 0.1 * mnn


def test_match_disjoint_alike_scenes_still_pruned(scene_small):
    # equal edge-length statistics let random tuples pass more often; pruning stays active
    other = transform_cloud(Pose(np.eye(3), (100, 0, 0)),
                            structured_scene(seed=99, extent=30, n_boxes=10, density=4.0))
    kept, mnn = _survivors(scene_small, other)
    assert kept < 0.75 * mnn


def test_match_deterministic(scene_small):
    T = Pose.from_yaw(0.5, (3, 4, 0))
    b = transform_cloud(T, scene_small)
    assert np.array_equal(match_features(scene_small, b, 1.0).pairs, match_features(scene_small, b, 1.0).pairs)
