"""Synthetic two-session scenarios over a procedurally built street world.

The world is a winding road lined with box buildings, poles and low walls on
a ground plane, sampled once into a point set. Scans are not ray cast: a node
sees every world point within a visibility radius and horizontal FoV sector,
randomly thinned, with range noise. The central session starts at the head of
the route; the query session starts further along it so that the measured map
overlap matches the requested fraction.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, Pose, so3_exp, voxel_downsample
from .pipeline import Session
from .pose_graph import CENTRAL, QUERY

SENSOR_HEIGHT = 1.8
MIN_RANGE = 1.0
OVERLAP_TOLERANCE = 0.03


@dataclass
class ScenarioSpec:
    seed: int = 0
    n_nodes: int = 500
    step: float = 1.0
    drift: float = 0.01  # per-step translation noise as a fraction of the step length
    overlap: float = 1.0
    world_width: float = 16.0  # half-width of the built corridor
    fov_central: float = 360.0
    fov_query: float = 70.0
    vfov_central: float = 90.0  # vertical field of view, symmetric about the horizon
    vfov_query: float = 77.0
    range_central: float = 15.0
    range_query: float = 25.0  # solid-state sensors trade FoV for range
    keep_central: float = 0.25
    keep_query: float = 0.6
    range_noise: float = 0.02
    surface_density: float = 6.0  # world points per square metre on structures
    ground_density: float = 1.0
    lane_central: float = -1.5
    lane_query: float = 1.5
    phase_query: float = 0.5  # query node offset along the route, in steps
    inter_yaw_deg: float = 100.0
    inter_offset: float = 80.0
    dynamic_change: float = 0.0  # fraction of structure points replaced in the query world
    transient_clusters: int = 0  # moving-object clusters injected per query scan

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")
        for name in ("step", "range_central", "range_query", "world_width", "surface_density", "ground_density"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if not 0.0 <= self.dynamic_change < 1.0:
            raise ValueError("dynamic_change must lie in [0, 1)")
        for name in ("fov_central", "fov_query", "vfov_central", "vfov_query"):
            if not 0.0 < getattr(self, name) <= 360.0:
                raise ValueError(f"{name} must lie in (0, 360]")
        for name in ("keep_central", "keep_query"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.drift < 0 or self.range_noise < 0 or self.transient_clusters < 0:
            raise ValueError("noise levels must be non-negative")

    @classmethod
    def from_dict(cls, values: dict) -> "ScenarioSpec":
        types = {f.name: f.default for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in types:
                raise ValueError(f"unknown scenario key {k!r}")
            kw[k] = type(types[k])(v) if isinstance(v, str) else v
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))


@dataclass
class Scenario:
    central: Session
    query: Session
    T_gt: Pose  # query ground-truth frame expressed in the central ground-truth frame
    gt_central: list
    gt_query: list
    spec: ScenarioSpec
    query_start: int = 0
    predicted_overlap: float = 1.0
    world: PointCloud = field(default=None, repr=False)

    def gt_query_world(self) -> list:
        """Query ground truth in the central frame."""
        return [self.T_gt @ p for p in self.gt_query]


# ---------------------------------------------------------------- world ----

class _Route:
    """Smooth open curve parametrized by arc length."""

    def __init__(self, rng, length: float, res: float = 0.1):
        n = int(np.ceil(length / res)) + 2
        s = np.arange(n) * res
        heading = rng.uniform(-np.pi, np.pi) + np.zeros(n)
        for _ in range(3):
            a = rng.uniform(0.15, 0.45)
            lam = rng.uniform(180.0, 600.0)
            heading += a * np.sin(2 * np.pi * s / lam + rng.uniform(0, 2 * np.pi))
        xy = np.zeros((n, 2))
        xy[1:] = np.cumsum(res * np.stack([np.cos(heading[:-1]), np.sin(heading[:-1])], 1), axis=0)
        self.s, self.xy, self.heading, self.length = s, xy, heading, s[-1]

    def at(self, s):
        s = np.clip(np.asarray(s, float), 0.0, self.length)
        xy = np.stack([np.interp(s, self.s, self.xy[:, 0]), np.interp(s, self.s, self.xy[:, 1])], -1)
        return xy, np.interp(s, self.s, self.heading)

    def frame(self, s, lateral=0.0):
        xy, h = self.at(s)
        left = np.stack([-np.sin(h), np.cos(h)], -1)
        return xy + np.asarray(lateral)[..., None] * left, h


def _sample_rect(rng, origin, u, v, density):
    """Random points on the parallelogram origin + a*u + b*v, a, b in [0, 1]."""
    area = np.linalg.norm(np.cross(u, v))
    n = rng.poisson(area * density)
    ab = rng.random((n, 2))
    return origin + ab[:, :1] * u + ab[:, 1:] * v


def _box_faces(rng, center, yaw, size, density, skip=None):
    """Vertical faces of a box standing on z = 0; ``skip`` drops one face (0-3)."""
    L, W, H = size
    c, s = np.cos(yaw), np.sin(yaw)
    ex, ey, ez = np.array([c, s, 0.0]), np.array([-s, c, 0.0]), np.array([0.0, 0.0, H])
    base = np.array([center[0], center[1], 0.0]) - 0.5 * L * ex - 0.5 * W * ey
    faces = [
        (base, L * ex), (base + W * ey, L * ex),
        (base, W * ey), (base + L * ex, W * ey),
    ]
    return np.concatenate([_sample_rect(rng, o, u, ez, density)
                           for i, (o, u) in enumerate(faces) if i != skip])


def _pole(rng, center, height, density, radius=0.15):
    n = rng.poisson(2 * np.pi * radius * height * density)
    a = rng.uniform(0, 2 * np.pi, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a),
                     rng.uniform(0, height, n)], 1)


def _tree(rng, center, density):
    """Trunk plus an ellipsoidal crown shell."""
    h = rng.uniform(2.0, 4.0)
    trunk = _pole(rng, center, h, density, radius=0.2)
    r = np.array([rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0)])
    area = 4 * np.pi * np.mean(r) ** 2
    v = rng.normal(size=(rng.poisson(area * density * 0.5), 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    crown = v * r + np.array([center[0], center[1], h + r[2]])
    return np.concatenate([trunk, crown])


def _building(rng, route: _Route, s, side, spec: ScenarioSpec):
    """One to three boxes of varying footprint and height sharing a frontage."""
    length = rng.uniform(6.0, 16.0)
    setback = rng.uniform(6.0, min(11.0, spec.world_width - 2))
    xy0, h0 = route.frame(s + length / 2, side * setback)
    yaw = h0 + rng.normal(0.0, 0.25)
    parts = []
    for _ in range(rng.integers(1, 4)):
        L = rng.uniform(3.0, length)
        D = rng.uniform(3.0, 9.0)
        along = rng.uniform(-0.5, 0.5) * (length - L)
        depth = side * (D / 2 + rng.uniform(0.0, 3.0))
        c = xy0 + along * np.array([np.cos(yaw), np.sin(yaw)]) + depth * np.array([-np.sin(yaw), np.cos(yaw)])
        # the face turned away from the road is never in view of the street
        back = 1 if side > 0 else 0
        parts.append(_box_faces(rng, c, yaw, (L, D, rng.uniform(3.0, 10.0)), spec.surface_density, back))
    return np.concatenate(parts), length


def _structures(rng, route: _Route, s_lo, s_hi, spec: ScenarioSpec):
    """List of point arrays, one per structure, along ``[s_lo, s_hi]``."""
    out = []
    for side in (-1.0, 1.0):
        s = s_lo + rng.uniform(0, 6)
        while s < s_hi:
            u = rng.random()
            if u < 0.7:
                pts, length = _building(rng, route, s, side, spec)
                out.append(pts)
            elif u < 0.85:
                # low wall parallel to the road
                length = rng.uniform(5.0, 14.0)
                xy, h = route.frame(s + length / 2, side * rng.uniform(4.5, 6.0))
                size = (length, 0.2, rng.uniform(1.0, 2.5))
                out.append(_box_faces(rng, xy, h + rng.normal(0.0, 0.05), size, spec.surface_density))
            else:
                length = rng.uniform(4.0, 10.0)
            s += length + rng.uniform(1.0, 6.0)
        s = s_lo + rng.uniform(0, 10)
        while s < s_hi:
            xy, _ = route.frame(s, side * rng.uniform(3.5, 5.0))
            if rng.random() < 0.5:
                out.append(_pole(rng, xy, rng.uniform(3.0, 8.0), spec.surface_density * 4))
            else:
                out.append(_tree(rng, xy, spec.surface_density))
            s += rng.uniform(6.0, 20.0)
    return out


def _ground(rng, route: _Route, spec: ScenarioSpec):
    lo = route.xy.min(0) - spec.world_width
    hi = route.xy.max(0) + spec.world_width
    g = 1.0 / np.sqrt(spec.ground_density)
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0], g), np.arange(lo[1], hi[1], g), indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], 1)
    pts = pts + rng.uniform(-0.5 * g, 0.5 * g, pts.shape)
    d, _ = cKDTree(route.xy[::5]).query(pts)
    pts = pts[d <= spec.world_width]
    return np.column_stack([pts, np.zeros(len(pts))])


# ---------------------------------------------------------------- scans ----

def _gt_poses(route: _Route, s, lateral) -> list:
    xy, h = route.frame(s, lateral)
    return [Pose.from_yaw(hh, (x, y, SENSOR_HEIGHT)) for (x, y), hh in zip(xy, h)]


def _fov_mask(local, fov_deg, vfov_deg):
    """Range, horizontal-sector and vertical-band mask on body-frame points."""
    rxy = np.hypot(local[:, 0], local[:, 1])
    m = np.linalg.norm(local, axis=1) >= MIN_RANGE
    if fov_deg < 360.0:
        m &= np.abs(np.arctan2(local[:, 1], local[:, 0])) <= np.radians(fov_deg) / 2
    if vfov_deg < 360.0:
        m &= np.abs(np.arctan2(local[:, 2], rxy)) <= np.radians(vfov_deg) / 2
    return m


def _visible(tree, points, pose: Pose, scan_range, fov_deg, vfov_deg):
    """Indices of world points a sensor at ``pose`` sees."""
    idx = np.asarray(sorted(tree.query_ball_point(pose.translation, scan_range)), dtype=np.int64)
    if len(idx) == 0:
        return idx
    return idx[_fov_mask(pose.inverse().apply(points[idx]), fov_deg, vfov_deg)]


def _scan_rng(seed, s, tag):
    return np.random.default_rng([seed, int(round(s * 1000)) & 0x7FFFFFFF, tag])


def _make_scan(tree, points, pose, s, spec: ScenarioSpec, rng_max, fov, vfov, keep, transients=0):
    idx = np.asarray(sorted(tree.query_ball_point(pose.translation, rng_max)), dtype=np.int64)
    rng = _scan_rng(spec.seed, s, 1)
    u = rng.random(len(idx))
    noise = rng.normal(0.0, spec.range_noise, (len(idx), 3)) if spec.range_noise > 0 else np.zeros((len(idx), 3))
    local = pose.inverse().apply(points[idx]) if len(idx) else np.zeros((0, 3))
    m = _fov_mask(local, fov, vfov) & (u < keep)
    pts = local[m] + noise[m]
    if transients:
        trng = _scan_rng(spec.seed, s, 2)
        extra = []
        for _ in range(transients):
            rr = trng.uniform(4.0, min(rng_max, 20.0) - 2.0)
            b = trng.uniform(-0.5, 0.5) * min(np.radians(fov), np.pi)
            c = np.array([rr * np.cos(b), rr * np.sin(b)])
            box = _box_faces(trng, c, trng.uniform(-np.pi, np.pi), (4.2, 1.8, 1.5),
                             spec.surface_density * keep)
            box[:, 2] -= SENSOR_HEIGHT
            extra.append(box)
        pts = np.concatenate([pts] + extra)
    return PointCloud(pts)


def _drifted(gt: list, rng, spec: ScenarioSpec) -> list:
    """Dead-reckoned poses: ground-truth increments with per-step noise."""
    out = [gt[0]]
    sig_t = spec.drift * spec.step
    sig_yaw = 0.1 * spec.drift * spec.step
    for a, b in zip(gt[:-1], gt[1:]):
        inc = a.inverse() @ b
        if spec.drift > 0:
            w = rng.normal(0.0, [0.3 * sig_yaw, 0.3 * sig_yaw, sig_yaw])
            inc = inc @ Pose(so3_exp(w), rng.normal(0.0, sig_t, 3))
        out.append(out[-1] @ inc)
    return out


# -------------------------------------------------------------- overlap ----

def map_overlap(M_Q: PointCloud, M_C: PointCloud, radius: float = 1.0, voxel: float = 1.0) -> float:
    """Fraction of (voxelized) query map points within ``radius`` of the central map."""
    q = voxel_downsample(M_Q, voxel).points
    if len(q) == 0 or len(M_C) == 0:
        return 0.0
    d, _ = cKDTree(M_C.points).query(q, distance_upper_bound=radius)
    return float(np.mean(d <= radius))


def _choose_query_start(route, coarse, spec, n_master):
    """Query start index whose predicted overlap is closest to the target."""
    n = spec.n_nodes
    tree = cKDTree(coarse)
    c_cov = np.zeros(len(coarse), bool)
    for p in _gt_poses(route, np.arange(n) * spec.step, spec.lane_central):
        c_cov[_visible(tree, coarse, p, spec.range_central, spec.fov_central, spec.vfov_central)] = True
    near_c = np.zeros(len(coarse), bool)
    if c_cov.any():
        d, _ = cKDTree(coarse[c_cov]).query(coarse, distance_upper_bound=1.0)
        near_c = d <= 1.0
    starts = n_master - n + 1
    s_q = (np.arange(n_master) + spec.phase_query) * spec.step
    vis = [_visible(tree, coarse, p, spec.range_query, spec.fov_query, spec.vfov_query)
           for p in _gt_poses(route, s_q, spec.lane_query)]
    count = np.zeros(len(coarse), np.int64)
    covered = overl = 0

    def add(ids, sgn):
        nonlocal covered, overl
        before = count[ids] > 0
        count[ids] += sgn
        after = count[ids] > 0
        ch = after.astype(int) - before.astype(int)
        covered += int(ch.sum())
        overl += int(ch[near_c[ids]].sum())

    for m in range(n):
        add(vis[m], 1)
    ratios = np.zeros(starts)
    for k0 in range(starts):
        if k0:
            add(vis[k0 - 1], -1)
            add(vis[k0 + n - 1], 1)
        ratios[k0] = overl / covered if covered else 0.0
    err = np.abs(ratios - spec.overlap)
    k0 = int(np.argmin(err))
    if err[k0] > OVERLAP_TOLERANCE:
        raise ValueError(f"infeasible overlap {spec.overlap:.3f}: closest achievable is {ratios[k0]:.3f}")
    return k0, float(ratios[k0])


# ----------------------------------------------------------------- main ----

def generate_scenario(spec: ScenarioSpec | None = None) -> Scenario:
    """Deterministic two-session scenario for ``spec``."""
    spec = spec or ScenarioSpec()
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.n_nodes
    n_master = 2 * n + 2
    route = _Route(rng, (n_master + 2) * spec.step + 2 * max(spec.range_central, spec.range_query))
    s_hi = route.length
    structures = _structures(rng, route, 0.0, s_hi, spec)
    ground = _ground(rng, route, spec)
    world = np.concatenate([ground] + structures)

    coarse = voxel_downsample(PointCloud(world), 1.0).points
    if spec.overlap >= 1.0 - 1e-12:
        k0, predicted = 0, 1.0
    else:
        k0, predicted = _choose_query_start(route, coarse, spec, n_master)

    # the query sees a changed world: some structures replaced by new ones
    q_world = world
    if spec.dynamic_change > 0:
        crng = np.random.default_rng([spec.seed, 3])
        sizes = np.array([len(s) for s in structures])
        target = spec.dynamic_change * sizes.sum()
        order = crng.permutation(len(structures))
        cut = int(np.searchsorted(np.cumsum(sizes[order]), target)) + 1
        removed = set(order[:cut].tolist())
        kept = [s for i, s in enumerate(structures) if i not in removed]
        added, n_added = [], 0
        while n_added < sizes[order[:cut]].sum():
            s0 = crng.uniform(0.0, s_hi - 20.0)
            new = _structures(crng, route, s0, s0 + 15.0, spec)
            added.extend(new)
            n_added += sum(len(a) for a in new)
        q_world = np.concatenate([ground] + kept + added)

    s_c = np.arange(n) * spec.step
    s_q = (np.arange(n) + k0 + spec.phase_query) * spec.step
    gt_c = _gt_poses(route, s_c, spec.lane_central)
    gt_q_world = _gt_poses(route, s_q, spec.lane_query)

    tree_c = cKDTree(world)
    tree_q = tree_c if q_world is world else cKDTree(q_world)
    scans_c = [_make_scan(tree_c, world, p, s, spec, spec.range_central, spec.fov_central, spec.vfov_central,
                          spec.keep_central)
               for p, s in zip(gt_c, s_c)]
    scans_q = [_make_scan(tree_q, q_world, p, s, spec, spec.range_query, spec.fov_query,
                          spec.vfov_query, spec.keep_query,
                          spec.transient_clusters)
               for p, s in zip(gt_q_world, s_q)]

    b = np.radians(30.0)
    T_gt = Pose.from_yaw(np.radians(spec.inter_yaw_deg),
                         (spec.inter_offset * np.cos(b), spec.inter_offset * np.sin(b), 0.0))
    T_inv = T_gt.inverse()
    gt_q = [T_inv @ p for p in gt_q_world]

    est_c = _drifted(gt_c, np.random.default_rng([spec.seed, 4]), spec)
    est_q = _drifted(gt_q, np.random.default_rng([spec.seed, 5]), spec)
    central = Session("central", CENTRAL, est_c, scans_c)
    query = Session("query", QUERY, est_q, scans_q)
    return Scenario(central, query, T_gt, gt_c, gt_q, spec, k0, predicted, PointCloud(world))
