"""Normal estimation, FPFH descriptors and filtered feature correspondences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import diagnostics
from .geometry import PointCloud, voxel_downsample

NORMAL_RADIUS_FACTOR = 3.5
FPFH_RADIUS_FACTOR = 5.0
FPFH_BINS = 11
VIEWPOINT_Z_OFFSET = 1.0e3
_TIE = 1e-9


@dataclass
class CorrespondenceSet:
    """Index pairs ``(a, b)`` into ``source`` (central side) and ``target`` (query side).

    ``source``/``target`` are the keypoint clouds the indices refer to, i.e.
    the voxel-downsampled inputs when produced by :func:`match_features`.
    """

    pairs: np.ndarray
    source: PointCloud
    target: PointCloud

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.pairs)

    @property
    def source_points(self) -> np.ndarray:
        return self.source.points[self.pairs[:, 0]]

    @property
    def target_points(self) -> np.ndarray:
        return self.target.points[self.pairs[:, 1]]

    def subset(self, mask_or_idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pairs[mask_or_idx], self.source, self.target)


def _neighbour_pairs(points: np.ndarray, r: float, tree=None):
    """All ordered pairs (i, j), i != j, with |p_i - p_j| <= r."""
    tree = cKDTree(points) if tree is None else tree
    pairs = tree.query_pairs(r, output_type="ndarray")
    if len(pairs) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate([pairs[:, 0], pairs[:, 1]]), np.concatenate([pairs[:, 1], pairs[:, 0]])


def estimate_normals(cloud: PointCloud, r_normal: float) -> PointCloud:
    """PCA normals over radius neighbourhoods.

    Points with fewer than three neighbours (self included) get a NaN normal.
    Signs point toward the cloud centroid lifted far along +z.
    """
    if not r_normal > 0:
        raise ValueError("r_normal must be positive")
    pts = cloud.points
    n = len(pts)
    normals = np.full((n, 3), np.nan)
    if n == 0:
        return cloud.with_normals(normals)
    i, j = _neighbour_pairs(pts, r_normal)
    i = np.concatenate([i, np.arange(n)])
    j = np.concatenate([j, np.arange(n)])
    count = np.bincount(i, minlength=n).astype(float)
    valid = count >= 3
    if not valid.any():
        return cloud.with_normals(normals)

    # centred per neighbourhood to keep the covariance well conditioned
    q = pts[j] - pts[i]
    mean = np.stack([np.bincount(i, q[:, d], n) for d in range(3)], axis=1) / count[:, None]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(i, q[:, a] * q[:, b], n) / count - mean[:, a] * mean[:, b]
            cov[:, a, b] = s
            cov[:, b, a] = s
    _, vecs = np.linalg.eigh(cov[valid])
    nrm = vecs[:, :, 0]

    viewpoint = pts.mean(axis=0) + np.array([0.0, 0.0, VIEWPOINT_Z_OFFSET])
    flip = np.einsum("ij,ij->i", nrm, viewpoint - pts[valid]) < 0
    nrm[flip] *= -1.0
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    normals[valid] = nrm
    return cloud.with_normals(normals)


def _pair_features(p1, n1, p2, n2):
    """Darboux-frame angles (alpha, phi, theta) for batched point pairs."""
    dp = p2 - p1
    d = np.linalg.norm(dp, axis=1)
    d_safe = np.where(d > 0, d, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / d_safe
    a2 = np.einsum("ij,ij->i", n2, dp) / d_safe
    # source is the point whose normal makes the smaller angle with the line;
    # the margin keeps exact ties (common on planes and box edges) off the rounding noise
    swap = np.abs(a2) - np.abs(a1) > _TIE
    u = np.where(swap[:, None], n2, n1)
    nt = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    f_theta = np.where(swap, -a2, a1)

    v = np.cross(dp, u)
    v_norm = np.linalg.norm(v, axis=1)
    degenerate = (d == 0) | (v_norm < _TIE * d_safe)
    v = v / np.where(v_norm > 0, v_norm, 1.0)[:, None]
    w = np.cross(u, v)
    f_phi = np.einsum("ij,ij->i", v, nt)
    f_alpha = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", u, nt))
    f_alpha[np.abs(f_alpha) > np.pi - _TIE] = -np.pi  # one side of the wrap
    f_alpha[degenerate] = 0.0
    f_phi[degenerate] = 0.0
    f_theta = np.where(degenerate, 0.0, f_theta)
    return f_alpha, f_phi, f_theta


def _bin(values, lo, hi):
    idx = np.floor(FPFH_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


def compute_fpfh(cloud: PointCloud, r_fpfh: float) -> np.ndarray:
    """33-bin FPFH per point, each 11-bin block normalized to sum 100.

    Points with invalid normals, and points with no valid neighbour inside
    ``r_fpfh``, get an all-zero descriptor.
    """
    if not cloud.has_normals:
        raise ValueError("compute_fpfh needs a cloud with normals")
    if not r_fpfh > 0:
        raise ValueError("r_fpfh must be positive")
    n = len(cloud)
    nb = 3 * FPFH_BINS
    out = np.zeros((n, nb))
    valid_idx = np.flatnonzero(cloud.valid_normals)
    if len(valid_idx) < 2:
        return out
    pts = cloud.points[valid_idx]
    nrm = cloud.normals[valid_idx]
    m = len(valid_idx)
    up = cKDTree(pts).query_pairs(r_fpfh, output_type="ndarray")
    if len(up) == 0:
        return out
    # pair features are symmetric under the source/target swap: one evaluation per unordered pair
    a, b = up[:, 0], up[:, 1]
    f_alpha, f_phi, f_theta = _pair_features(pts[a], nrm[a], pts[b], nrm[b])
    i = np.concatenate([a, b])
    j = np.concatenate([b, a])
    bins = [np.tile(_bin(f_alpha, -np.pi, np.pi), 2),
            np.tile(FPFH_BINS + _bin(f_phi, -1.0, 1.0), 2),
            np.tile(2 * FPFH_BINS + _bin(f_theta, -1.0, 1.0), 2)]
    count = np.bincount(i, minlength=m).astype(float)
    incr = 100.0 / count[i]
    base = i * nb
    spfh = sum(np.bincount(base + bb, incr, m * nb) for bb in bins).reshape(m, nb)

    dist = np.tile(np.maximum(np.linalg.norm(pts[b] - pts[a], axis=1), 1e-12), 2)
    W = sp.csr_matrix((1.0 / dist, (i, j)), shape=(m, m))
    wsum = np.asarray(W.sum(axis=1)).ravel()
    has = wsum > 0
    neigh = np.zeros((m, nb))
    neigh[has] = (W @ spfh)[has] / wsum[has, None]
    fpfh = 0.5 * (spfh + neigh)
    fpfh[~has] = 0.0
    out[valid_idx] = fpfh
    return out


def _nearest_both(a: np.ndarray, b: np.ndarray, chunk: int = 1024):
    """Brute-force Euclidean nearest neighbours in both directions (a -> b, b -> a).

    Squared norms ride along as two extra columns, so one matrix product gives
    squared distances directly. A pass over row chunks yields the row argmins
    and the column minima with the chunk holding them; a second, small pass
    resolves each column's argmin inside its winning chunk.
    """
    one_a = np.ones((len(a), 1), a.dtype)
    one_b = np.ones((len(b), 1), b.dtype)
    A = np.hstack([a, np.einsum("ij,ij->i", a, a)[:, None], one_a])
    B = np.hstack([-2.0 * b, one_b, np.einsum("ij,ij->i", b, b)[:, None]]).astype(a.dtype)
    Bt = np.ascontiguousarray(B.T)
    ab = np.empty(len(a), dtype=np.int64)
    best = np.full(len(b), np.inf, dtype=a.dtype)
    owner = np.zeros(len(b), dtype=np.int64)
    starts = range(0, len(a), chunk)
    for s in starts:
        d = A[s:s + chunk] @ Bt
        ab[s:s + chunk] = np.argmin(d, axis=1)
        m = d.min(axis=0)
        better = m < best
        best[better] = m[better]
        owner[better] = s
    ba = np.zeros(len(b), dtype=np.int64)
    for s in starts:
        cols = np.flatnonzero(owner == s)
        if len(cols):
            ba[cols] = s + np.argmin(B[cols] @ A[s:s + chunk].T, axis=1)
    return ab, ba


def mutual_nearest(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Reciprocal nearest neighbours in descriptor space as (M, 2) index pairs."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.empty((0, 2), dtype=np.int64)
    # centring shrinks the norms that the expanded distance cancels against
    mu = np.asarray(desc_a, float).mean(axis=0)
    ab, ba = _nearest_both(np.asarray(desc_a, float) - mu, np.asarray(desc_b, float) - mu)
    a = np.arange(len(desc_a))
    keep = ba[ab] == a
    return np.stack([a[keep], ab[keep]], axis=1).astype(np.int64)


def tuple_filter(
    src: np.ndarray,
    dst: np.ndarray,
    pairs: np.ndarray,
    ratio: float = 0.9,
    max_tuples: int = 1000,
    trials_per_pair: int = 100,
    max_pairs: int = 3000,
    seed: int = 0,
) -> np.ndarray:
    """Random 3-tuple edge-length consistency test.

    A tuple is accepted when every edge length ratio between the two sides
    lies in ``[ratio, 1/ratio]``. Sampling stops after ``max_tuples`` accepted
    tuples or ``trials_per_pair * len(pairs)`` draws. Returns the kept pairs in
    first-seen order.
    """
    m = len(pairs)
    if m < 3:
        return pairs[:0]
    rng = np.random.default_rng(seed)
    P = src[pairs[:, 0]]
    Q = dst[pairs[:, 1]]
    accepted = []
    n_acc = 0
    remaining = trials_per_pair * m
    batch = 20000
    while remaining > 0 and n_acc < max_tuples:
        k = min(batch, remaining)
        remaining -= k
        t = rng.integers(0, m, size=(k, 3))
        ok = np.ones(k, dtype=bool)
        for u, v in ((0, 1), (1, 2), (2, 0)):
            li = np.linalg.norm(P[t[:, u]] - P[t[:, v]], axis=1)
            lj = np.linalg.norm(Q[t[:, u]] - Q[t[:, v]], axis=1)
            ok &= (li * ratio < lj) & (lj < li / ratio)
        hits = t[ok][: max_tuples - n_acc]
        accepted.append(hits)
        n_acc += len(hits)
    if n_acc == 0:
        return pairs[:0]
    flat = np.concatenate(accepted).ravel()
    _, first = np.unique(flat, return_index=True)
    keep = flat[np.sort(first)][:max_pairs]
    return pairs[keep]


@dataclass
class MatchConfig:
    tuple_ratio: float = 0.9
    max_tuples: int = 1000
    max_pairs: int = 3000
    seed: int = 0


def extract_keypoints(cloud: PointCloud, voxel: float):
    """Downsample, estimate normals and compute FPFH; drops invalid-normal points."""
    with diagnostics.timed(diagnostics.VOXEL):
        down = voxel_downsample(cloud, voxel)
    if len(down) == 0:
        raise ValueError("cloud is empty after voxel downsampling")
    with diagnostics.timed(diagnostics.DESCRIPTOR):
        down = estimate_normals(down, NORMAL_RADIUS_FACTOR * voxel)
        down = down.select(down.valid_normals)
        if len(down) == 0:
            raise ValueError("no point has a valid normal after downsampling")
        return down, compute_fpfh(down, FPFH_RADIUS_FACTOR * voxel)


def match_features(
    P_C: PointCloud, P_Q: PointCloud, voxel: float, config: MatchConfig | None = None
) -> CorrespondenceSet:
    """Feature correspondences between two clouds at voxel size ``voxel``.

    Mutual nearest neighbours in FPFH space, then the tuple consistency test.
    Indices refer to the returned keypoint clouds (``source`` from ``P_C``,
    ``target`` from ``P_Q``).
    """
    cfg = config or MatchConfig()
    kc, fc = extract_keypoints(P_C, voxel)
    kq, fq = extract_keypoints(P_Q, voxel)
    with diagnostics.timed(diagnostics.DESCRIPTOR):
        pairs = mutual_nearest(fc, fq)
        pairs = tuple_filter(
            kc.points, kq.points, pairs,
            ratio=cfg.tuple_ratio, max_tuples=cfg.max_tuples, max_pairs=cfg.max_pairs, seed=cfg.seed,
        )
    return CorrespondenceSet(pairs, kc, kq)
