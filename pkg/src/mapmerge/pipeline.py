"""Two-session map merging: map accumulation, map-to-map alignment, inter-session
loop search with submap registration, pose-graph optimization and the merged map.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import diagnostics
from .fine_alignment import AlignmentError, IcpResult, icp_truncated, validate_loop
from .geometry import PointCloud, Pose, between, kabsch, transform_cloud, voxel_downsample
from .pose_graph import (
    ANCHOR_CENTRAL, ANCHOR_QUERY, CENTRAL, QUERY, INTER_LOOP,
    OptimizationReport, OptimizerConfig, PoseGraph, optimize, set_anchor_covariances,
)
from .registration import (
    FULL_SO3, YAW_ONLY, RegistrationConfig, RegistrationError, register,
)

log = logging.getLogger(__name__)

SUB2SUB = "sub2sub"
S2SUB = "s2sub"


class InsufficientLoopsError(RuntimeError):
    """Too few inter-session loops were accepted to optimize the merge."""


@dataclass
class IntraLoop:
    l: int
    m: int
    z: Pose  # node m expressed in the frame of node l
    cov: np.ndarray


@dataclass
class Session:
    id: str
    role: str
    poses: list
    scans: list
    intra_loops: list = field(default_factory=list)

    def __post_init__(self):
        if self.role not in (CENTRAL, QUERY):
            raise ValueError(f"role must be {CENTRAL!r} or {QUERY!r}, got {self.role!r}")
        if len(self.poses) != len(self.scans):
            raise ValueError("poses and scans differ in length")
        if len(self.poses) < 2:
            raise ValueError("a session needs at least two nodes")
        for p in self.poses:
            if not (np.all(np.isfinite(p.rotation)) and np.all(np.isfinite(p.translation))):
                raise ValueError("non-finite node pose")

    @property
    def nodes(self):
        return list(zip(self.poses, self.scans))

    def __len__(self):
        return len(self.poses)

    def with_poses(self, poses) -> "Session":
        return Session(self.id, self.role, list(poses), self.scans, self.intra_loops)


@dataclass
class PipelineConfig:
    voxel_map: float = 2.0
    voxel_submap: float = 0.4
    window: int = 20
    d_max: float = 2.0
    tau_mse: float = 0.4
    loop_stride: int = 5
    search_radius: float = 10.0
    registration_mode: str = YAW_ONLY
    loop_mode: str = SUB2SUB
    noise_bound_map: float = 1.0
    noise_bound_submap: float = 0.3
    cbar: float = 1.0
    anchor_cov_central: float = 1e-6
    anchor_cov_query: float = 1e4
    prior_cov: float = 1e-6
    odom_sigma_rotation: float = 1e-3
    odom_sigma_translation: float = 1e-2
    inter_cov: float = 1e-2
    kernel_scale: float = 1.0
    min_inlier_fraction: float = 0.05
    min_loops: int = 3
    max_iterations: int = 100
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("voxel_map", "voxel_submap", "d_max", "tau_mse", "search_radius",
                     "noise_bound_map", "noise_bound_submap", "cbar", "anchor_cov_central",
                     "anchor_cov_query", "prior_cov", "odom_sigma_rotation",
                     "odom_sigma_translation", "inter_cov", "kernel_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.loop_stride < 1:
            raise ValueError("loop_stride must be >= 1")
        if self.registration_mode not in (YAW_ONLY, FULL_SO3):
            raise ValueError(f"unknown registration mode {self.registration_mode!r}")
        if self.loop_mode not in (SUB2SUB, S2SUB):
            raise ValueError(f"unknown loop mode {self.loop_mode!r}")

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_dict(cls, values: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = _coerce(getattr(base, k), v)
        return dataclasses.replace(base, **kw)


def _fmt_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(default, v):
    if not isinstance(v, str):
        return v
    if isinstance(default, bool):
        return v.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v


@dataclass
class LoopConstraint:
    j: int  # central node
    k: int  # query node
    z: Pose  # query node k expressed in the frame of central node j
    cov: np.ndarray
    t_mse: float
    accepted: bool
    inlier_fraction: float = 0.0
    coarse: bool = True  # False when submap registration failed and the map prior was used


@dataclass
class MergeResult:
    central: Session
    query: Session
    anchors: tuple  # (central anchor, query anchor)
    report: OptimizationReport
    loops: list
    initial_alignment: Pose
    graph: PoseGraph
    timings: diagnostics.Recorder
    query_input: list = field(default_factory=list)

    def recovered_alignment(self) -> Pose:
        """Rigid fit taking input query-frame node positions to merged world positions.

        Summarizes the query-to-central transform the merge settled on, with
        the per-node drift corrections averaged out.
        """
        src = np.array([p.translation for p in self.query_input])
        dst = np.array([p.translation for p in self.world_poses(QUERY)])
        R, t = kabsch(src, dst)
        return Pose(R, t)

    def world_poses(self, role: str) -> list:
        s, a = (self.central, self.anchors[0]) if role == CENTRAL else (self.query, self.anchors[1])
        return [a @ p for p in s.poses]


def worker_count(requested: int | None = None) -> int:
    """Worker cap from the argument or ``MAPMERGE_THREADS`` (0 = all cores)."""
    n = requested
    if n is None:
        n = int(os.environ.get("MAPMERGE_THREADS", "1") or 1)
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


# --------------------------------------------------------------------------

def accumulate_map(session: Session, voxel: float) -> PointCloud:
    """All scans placed at their node poses, voxel-downsampled."""
    with diagnostics.timed(diagnostics.VOXEL):
        parts = [transform_cloud(p, s) for p, s in zip(session.poses, session.scans)]
        return voxel_downsample(PointCloud.concatenate(parts), voxel)


def _registration_config(cfg: PipelineConfig, noise_bound: float) -> RegistrationConfig:
    rc = RegistrationConfig(noise_bound=noise_bound, cbar=cfg.cbar, mode=cfg.registration_mode)
    rc.match.seed = cfg.seed
    return rc


def initial_alignment(M_C: PointCloud, M_Q: PointCloud, voxel: float,
                      cfg: PipelineConfig | None = None) -> Pose:
    """Transform taking query-map coordinates into central-map coordinates."""
    cfg = cfg or PipelineConfig()
    res = register(M_C, M_Q, voxel, config=_registration_config(cfg, cfg.noise_bound_map))
    diagnostics.count("correspondences", res.n_correspondences)
    log.info("map-to-map: %d correspondences, clique %d, %d inliers",
             res.n_correspondences, res.n_clique, len(res.inlier_pairs))
    return res.transform.inverse()


class _SubmapBuilder:
    """Per-node voxelized scans assembled into node-centred submaps."""

    def __init__(self, session: Session, voxel: float):
        self.session = session
        self.voxel = voxel
        with diagnostics.timed(diagnostics.VOXEL):
            self.scans = [voxel_downsample(s, voxel) for s in session.scans]

    def build(self, k: int, window: int) -> PointCloud:
        with diagnostics.timed(diagnostics.VOXEL):
            poses = self.session.poses
            inv = poses[k].inverse()
            lo, hi = max(0, k - window), min(len(poses), k + window + 1)
            parts = [transform_cloud(inv @ poses[i], self.scans[i]) for i in range(lo, hi)]
            return voxel_downsample(PointCloud.concatenate(parts), self.voxel)


def _loop_covariance(cfg: PipelineConfig, t_mse: float) -> np.ndarray:
    scale = 1.0 + (t_mse / cfg.tau_mse if np.isfinite(t_mse) else 1.0)
    return cfg.inter_cov * scale * np.eye(6)


def _evaluate_candidate(j, k, sub_c, sub_q, prior: Pose, cfg: PipelineConfig) -> LoopConstraint:
    rc = _registration_config(cfg, cfg.noise_bound_submap)
    coarse = True
    try:
        # T maps central-submap coordinates into query-submap coordinates
        init = register(sub_c, sub_q, cfg.voxel_submap, config=rc).transform.inverse()
    except RegistrationError as exc:
        log.debug("candidate (%d, %d): coarse registration failed: %s", j, k, exc)
        init, coarse = prior, False
    with diagnostics.timed(diagnostics.OPTIM):
        try:
            res = icp_truncated(sub_q, sub_c, init, cfg.d_max)
        except AlignmentError:
            res = IcpResult(init, float("inf"), 0, 0, False, len(sub_q))
    ok = validate_loop(res, cfg.tau_mse, cfg.min_inlier_fraction)
    return LoopConstraint(j, k, res.transform, _loop_covariance(cfg, res.t_mse), res.t_mse, ok,
                          res.inlier_fraction, coarse)


def loop_candidates(C: Session, Q: Session, T_align: Pose, cfg: PipelineConfig) -> list:
    """``(j, k)`` pairs: every stride-th query node and its nearest central node."""
    pc = np.array([p.translation for p in C.poses])
    tree = cKDTree(pc)
    out = []
    for k in range(0, len(Q), cfg.loop_stride):
        warped = T_align.apply(Q.poses[k].translation)
        d, j = tree.query(warped, k=1)
        if d <= cfg.search_radius:
            out.append((int(j), k))
    return out


def find_inter_loops(C: Session, Q: Session, T_align: Pose,
                     cfg: PipelineConfig | None = None) -> list:
    """Evaluate all loop candidates; returns every constraint with its accept flag."""
    cfg = cfg or PipelineConfig()
    cands = loop_candidates(C, Q, T_align, cfg)
    if not cands:
        return []
    sb_c = _SubmapBuilder(C, cfg.voxel_submap)
    sb_q = _SubmapBuilder(Q, cfg.voxel_submap)
    q_window = 0 if cfg.loop_mode == S2SUB else cfg.window

    def run(jk):
        j, k = jk
        sub_c = sb_c.build(j, cfg.window)
        sub_q = sb_q.build(k, q_window)
        prior = between(C.poses[j], T_align @ Q.poses[k])
        return _evaluate_candidate(j, k, sub_c, sub_q, prior, cfg)

    n = worker_count(cfg.threads)
    if n == 1:
        loops = [run(c) for c in cands]
    else:
        with ThreadPoolExecutor(n) as ex:
            loops = list(ex.map(run, cands))
    diagnostics.count("candidates", len(cands))
    diagnostics.count("loops", sum(c.accepted for c in loops))
    return loops


def build_graph(C: Session, Q: Session, T_align: Pose, loops, cfg: PipelineConfig) -> PoseGraph:
    g = PoseGraph()
    for kind, s in ((CENTRAL, C), (QUERY, Q)):
        for i, p in enumerate(s.poses):
            g.add_node((kind, i), p)
    g.add_node((ANCHOR_CENTRAL, 0), Pose.identity())
    g.add_node((ANCHOR_QUERY, 0), T_align)

    prior_cov = cfg.prior_cov * np.eye(6)
    odom_cov = np.diag([cfg.odom_sigma_rotation**2] * 3 + [cfg.odom_sigma_translation**2] * 3)
    for kind, s in ((CENTRAL, C), (QUERY, Q)):
        g.add_prior((kind, 0), s.poses[0], prior_cov)
        for i in range(1, len(s)):
            g.add_odometry((kind, i - 1), (kind, i), between(s.poses[i], s.poses[i - 1]), odom_cov)
        for lp in s.intra_loops:
            g.add_intra_loop((kind, lp.m), (kind, lp.l), lp.z, lp.cov)
    for lc in loops:
        if lc.accepted:
            g.add_inter_loop((CENTRAL, lc.j), (QUERY, lc.k), lc.z.inverse(), lc.cov)
    set_anchor_covariances(g, cfg.anchor_cov_central * np.eye(6), cfg.anchor_cov_query * np.eye(6))
    return g


def merge(C: Session, Q: Session, cfg: PipelineConfig | None = None,
          recorder: diagnostics.Recorder | None = None) -> MergeResult:
    """Full two-session merge. Raises on alignment failure or too few loops."""
    cfg = cfg or PipelineConfig()
    rec = recorder or diagnostics.Recorder()
    with rec.stage("map-to-map alignment") as st:
        M_C = accumulate_map(C, cfg.voxel_map)
        M_Q = accumulate_map(Q, cfg.voxel_map)
        st.counts["points"] += len(M_C) + len(M_Q)
        T_align = initial_alignment(M_C, M_Q, cfg.voxel_map, cfg)
    with rec.stage("loop search"):
        loops = find_inter_loops(C, Q, T_align, cfg)
    n_acc = sum(lc.accepted for lc in loops)
    if n_acc < cfg.min_loops:
        raise InsufficientLoopsError(
            f"insufficient loops: {n_acc} accepted inter-session loops of {len(loops)} "
            f"candidates (need {cfg.min_loops})")
    with rec.stage("PGO") as st:
        with diagnostics.timed(diagnostics.OPTIM):
            g = build_graph(C, Q, T_align, loops, cfg)
            st.counts["factors"] += len(g.factors)
            rep = optimize(g, OptimizerConfig(max_iterations=cfg.max_iterations,
                                              kernel_scale=cfg.kernel_scale))
    return MergeResult(
        C.with_poses(g.session_poses(CENTRAL)),
        Q.with_poses(g.session_poses(QUERY)),
        (g.nodes[(ANCHOR_CENTRAL, 0)], g.nodes[(ANCHOR_QUERY, 0)]),
        rep, loops, T_align, g, rec, list(Q.poses),
    )


def build_global_map(sessions, anchors, voxel: float) -> PointCloud:
    """Union of every session's scans at anchor-composed poses, voxel-downsampled."""
    parts = []
    for s, a in zip(sessions, anchors):
        parts.extend(transform_cloud(a @ p, scan) for p, scan in zip(s.poses, s.scans))
    return voxel_downsample(PointCloud.concatenate(parts), voxel)


def inter_loop_count(graph: PoseGraph) -> int:
    return sum(f.kind == INTER_LOOP for f in graph.factors)
