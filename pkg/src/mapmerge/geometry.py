"""Rigid-body math, point clouds, voxel downsampling and KD-tree queries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation


def hat(v):
    """Skew-symmetric matrix of a 3-vector, or a stack of them."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w):
    """Rotation matrices from rotation vectors (batched on leading axes)."""
    w = np.asarray(w, dtype=float)
    return Rotation.from_rotvec(w.reshape(-1, 3)).as_matrix().reshape(w.shape[:-1] + (3, 3))


def so3_log(R):
    R = np.asarray(R, dtype=float)
    return Rotation.from_matrix(R.reshape(-1, 3, 3)).as_rotvec().reshape(R.shape[:-2] + (3,))


def so3_right_jacobian_inv(w):
    """Inverse right Jacobian of SO(3), batched."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    W = hat(w)
    small = theta < 1e-5
    th = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)),
    )
    return np.eye(3) + 0.5 * W + coef[..., None, None] * (W @ W)


def project_to_so3(M):
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, q, t=(0.0, 0.0, 0.0)) -> "Pose":
        """``q`` is ``(x, y, z, w)``; it is normalized."""
        return cls(Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix(), t)

    @classmethod
    def from_yaw(cls, yaw: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(yaw_matrix(yaw), t)

    @classmethod
    def exp(cls, xi) -> "Pose":
        """Retraction from a 6-vector ``(rotvec, translation)``."""
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), xi[3:])

    def log(self) -> np.ndarray:
        return np.concatenate([so3_log(self.rotation), self.translation])

    def as_quaternion(self) -> np.ndarray:
        q = Rotation.from_matrix(self.rotation).as_quat()
        # canonical sign keeps text output deterministic
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def angle(self) -> float:
        """Geodesic rotation angle in radians."""
        return rotation_angle(self.rotation)

    def distance(self) -> float:
        return float(np.linalg.norm(self.translation))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self):
        r = np.degrees(so3_log(self.rotation))
        return f"Pose(rotvec_deg={np.round(r, 4).tolist()}, t={np.round(self.translation, 4).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def between(a: Pose, b: Pose) -> Pose:
    """Relative pose ``a^-1 * b``, so ``compose(a, between(a, b)) == b``."""
    Rt = a.rotation.T
    return Pose(Rt @ b.rotation, Rt @ (b.translation - a.translation))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (deg) difference between two poses."""
    d = between(a, b)
    return d.distance(), float(np.degrees(d.angle()))


class PointCloud:
    """Immutable array of 3D points with optional unit normals.

    Normals of points whose neighbourhood was too small to fit a plane are
    stored as NaN rows; ``valid_normals`` masks them out.
    """

    __slots__ = ("_points", "_normals")

    def __init__(self, points, normals=None):
        pts = np.array(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        self._points = pts
        if normals is not None:
            nrm = np.array(normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            ok = np.all(np.isfinite(nrm), axis=1)
            if ok.any() and np.abs(np.linalg.norm(nrm[ok], axis=1) - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length")
            nrm.setflags(write=False)
            normals = nrm
        self._normals = normals

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def normals(self):
        return self._normals

    @property
    def has_normals(self) -> bool:
        return self._normals is not None

    @property
    def valid_normals(self) -> np.ndarray:
        if self._normals is None:
            return np.zeros(len(self), dtype=bool)
        return np.all(np.isfinite(self._normals), axis=1)

    def __len__(self):
        return len(self._points)

    def __repr__(self):
        return f"PointCloud(n={len(self)}, normals={self.has_normals})"

    def select(self, idx) -> "PointCloud":
        nrm = None if self._normals is None else self._normals[idx]
        return PointCloud(self._points[idx], nrm)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self._points, normals)

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.empty((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        if all(c.has_normals for c in clouds):
            return PointCloud(pts, np.concatenate([c.normals for c in clouds]))
        return PointCloud(pts)


def transform_cloud(T: Pose, cloud: PointCloud) -> PointCloud:
    pts = cloud.points @ T.rotation.T + T.translation
    nrm = None if cloud.normals is None else cloud.normals @ T.rotation.T
    return PointCloud(pts, nrm)


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Centroid per occupied voxel, ordered by voxel key (lexicographic x, y, z).

    Normals are dropped; re-estimate them on the downsampled cloud.
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(np.empty((0, 3)))
    keys = voxel_keys(pts, voxel)
    keys -= keys.min(axis=0)
    ext = keys.max(axis=0) + 1
    if float(ext[0]) * float(ext[1]) * float(ext[2]) < 2.0**62:
        # mixed-radix packing preserves lexicographic key order
        packed = (keys[:, 0] * ext[1] + keys[:, 1]) * ext[2] + keys[:, 2]
        _, inverse = np.unique(packed, return_inverse=True)
    else:
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n = int(inverse.max()) + 1
    counts = np.bincount(inverse, minlength=n).astype(float)
    out = np.empty((n, 3))
    for d in range(3):
        out[:, d] = np.bincount(inverse, weights=pts[:, d], minlength=n) / counts
    return PointCloud(out)


class SpatialIndex:
    """Static KD-tree over a cloud's points (rebuilt per cloud, never updated)."""

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self):
        return len(self.points)

    def radius(self, query, r: float) -> list[int]:
        if not r > 0:
            raise ValueError("radius must be positive")
        if self._tree is None:
            return []
        return sorted(self._tree.query_ball_point(np.asarray(query, dtype=float), r))

    def radius_batch(self, queries, r: float) -> tuple[np.ndarray, np.ndarray]:
        """CSR neighbourhoods: ``indices[offsets[i]:offsets[i+1]]`` are within ``r`` of query i."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        if self._tree is None or len(queries) == 0:
            return np.zeros(len(queries) + 1, dtype=np.int64), np.empty(0, dtype=np.int64)
        lists = self._tree.query_ball_point(queries, r)
        lengths = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
        offsets = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        if offsets[-1] == 0:
            return offsets, np.empty(0, dtype=np.int64)
        indices = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=offsets[-1])
        return offsets, indices

    def knn(self, query, k: int = 1):
        """Distances and indices of the ``k`` nearest points (batched over queries)."""
        if self._tree is None:
            raise ValueError("cannot query an empty index")
        return self._tree.query(np.asarray(query, dtype=float), k=k)


def radius_neighbors(index: SpatialIndex, query, r: float) -> list[int]:
    return index.radius(query, r)


def kabsch(src: np.ndarray, dst: np.ndarray, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least-squares rigid fit ``dst ~ R @ src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    ws = w.sum()
    mu_s = (w[:, None] * src).sum(0) / ws
    mu_d = (w[:, None] * dst).sum(0) / ws
    H = (w[:, None] * (src - mu_s)).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s
