"""Decoupled outlier-robust registration.

Pipeline: feature correspondences -> consistency-graph maximum clique ->
GNC-TLS rotation over translation-invariant measurements (TIMs) ->
component-wise translation by interval consensus.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import diagnostics
from .features import CorrespondenceSet, MatchConfig, match_features
from .geometry import PointCloud, Pose, kabsch, project_to_so3, yaw_matrix

log = logging.getLogger(__name__)

FULL_SO3 = "so3"
YAW_ONLY = "yaw"


class RegistrationError(RuntimeError):
    """A registration stage could not produce an estimate."""


@dataclass
class TimPairSet:
    alphas: np.ndarray
    betas: np.ndarray
    source_pairs: np.ndarray  # (K, 2): correspondence indices n, n+1 (wrapping)

    def __len__(self):
        return len(self.alphas)


@dataclass
class RegistrationConfig:
    noise_bound: float = 0.3
    cbar: float = 1.0
    mode: str = YAW_ONLY
    gnc_factor: float = 1.4
    gnc_max_iters: int = 100
    gnc_weight_tol: float = 1e-6
    clique_budget: int = 20_000
    min_inliers: int = 3
    match: MatchConfig = field(default_factory=MatchConfig)


@dataclass
class RegistrationResult:
    transform: Pose
    inlier_pairs: CorrespondenceSet
    converged: bool
    iterations: int
    n_correspondences: int = 0
    n_clique: int = 0


def build_tims(A: CorrespondenceSet) -> TimPairSet:
    """Chain TIMs: element n pairs with element n+1, the last with the first."""
    m = len(A)
    if m < 2:
        raise RegistrationError(f"need at least 2 correspondences for TIMs, got {m}")
    pa = A.source_points
    pb = A.target_points
    nxt = np.roll(np.arange(m), -1)
    return TimPairSet(pa - pa[nxt], pb - pb[nxt], np.stack([np.arange(m), nxt], axis=1))


# --------------------------------------------------------------------------
# maximum clique

def consistency_graph(src: np.ndarray, dst: np.ndarray, noise_bound: float) -> np.ndarray:
    """Edge (i, j) iff pairwise lengths agree within ``2 * noise_bound``."""
    adj = np.abs(cdist(src, src) - cdist(dst, dst)) <= 2.0 * noise_bound
    np.fill_diagonal(adj, False)
    return adj


def core_numbers(adj: np.ndarray) -> np.ndarray:
    n = len(adj)
    deg = adj.sum(axis=1).astype(np.int64)
    core = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    k = 0
    for _ in range(n):
        cand = np.where(alive, deg, np.iinfo(np.int64).max)
        v = int(np.argmin(cand))
        k = max(k, int(deg[v]))
        core[v] = k
        alive[v] = False
        deg -= adj[v]
    return core


def _greedy_clique(adj: np.ndarray, core: np.ndarray, seeds: int = 16) -> list[int]:
    """Greedy clique growth from the highest-core vertices.

    Each step adds the candidate with the most neighbours among the remaining
    candidates.
    """
    n = len(adj)
    A = adj.astype(np.float32)
    order = np.lexsort((np.arange(n), -core))
    best: list[int] = []
    for v in order[:seeds]:
        if core[v] + 1 <= len(best):
            break
        clique = [int(v)]
        cand = adj[v] & (core >= len(best))
        # neighbours inside the candidate set, kept current as candidates drop out
        score = A @ cand.astype(np.float32)
        while cand.any():
            idx = np.flatnonzero(cand)
            u = int(idx[np.argmax(score[idx])])
            clique.append(u)
            dropped = cand & ~adj[u]
            cand &= adj[u]
            if dropped.any():
                score -= A[dropped].sum(axis=0)
        if len(clique) > len(best):
            best = clique
    return best


class _Budget(Exception):
    pass


def _bnb_clique(adj: np.ndarray, lower: int, budget: int) -> tuple[list[int], bool]:
    """Exact branch and bound with greedy-colouring bounds on int bitsets.

    Finds a clique larger than ``lower`` or proves none exists. The second
    return value is False when ``budget`` work units (vertices coloured
    across all expansions) ran out first.
    """
    n = len(adj)
    order = np.lexsort((np.arange(n), -adj.sum(axis=1)))
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    nbrs = []
    for v in order:
        bits = 0
        for u in pos[np.flatnonzero(adj[v])]:
            bits |= 1 << int(u)
        nbrs.append(bits)

    best: list[int] = []
    best_size = lower
    steps = 0

    def colour_sort(P):
        verts, bounds = [], []
        uncoloured = P
        c = 0
        while uncoloured:
            c += 1
            Q = uncoloured
            while Q:
                low = Q & -Q
                v = low.bit_length() - 1
                Q &= ~nbrs[v] & ~low
                uncoloured &= ~low
                verts.append(v)
                bounds.append(c)
        return verts, bounds

    def expand(R, P):
        nonlocal best, best_size, steps
        verts, bounds = colour_sort(P)
        steps += len(verts)
        if steps > budget:
            raise _Budget
        for idx in range(len(verts) - 1, -1, -1):
            if len(R) + bounds[idx] <= best_size:
                return
            v = verts[idx]
            newP = P & nbrs[v]
            if newP:
                expand(R + [v], newP)
            elif len(R) + 1 > best_size:
                best = R + [v]
                best_size = len(best)
            P &= ~(1 << v)

    complete = True
    try:
        expand([], (1 << n) - 1)
    except _Budget:
        complete = False
    return sorted(int(order[v]) for v in best), complete


def max_clique(adj: np.ndarray, budget: int = 20_000) -> tuple[list[int], bool]:
    """Maximum clique of a boolean adjacency matrix.

    Core-number pruning and a greedy seed bound the exact search. Returns the
    sorted vertex list and whether optimality was proven within ``budget``
    branch-and-bound work units (otherwise the best clique found).
    """
    adj = np.asarray(adj, dtype=bool)
    n = len(adj)
    if n == 0:
        raise RegistrationError("empty consistency graph")
    core = core_numbers(adj)
    best = sorted(_greedy_clique(adj, core))
    # a clique larger than |best| needs every member at core >= |best|
    keep = np.flatnonzero(core >= len(best))
    if len(keep) <= len(best):
        return best, True
    found, complete = _bnb_clique(adj[np.ix_(keep, keep)], len(best), budget)
    if len(found) > len(best):
        best = sorted(int(keep[v]) for v in found)
    if not complete:
        log.debug("max clique budget exhausted; returning clique of size %d", len(best))
    return best, complete


def max_clique_prune(A: CorrespondenceSet, noise_bound: float, budget: int = 20_000):
    """Keep the correspondences of the maximum pairwise-consistent clique.

    Returns ``(surviving correspondences, TIMs rebuilt over them)``; the TIM
    set is None when fewer than two survive.
    """
    if not noise_bound > 0:
        raise ValueError("noise_bound must be positive")
    if len(A) == 0:
        raise RegistrationError("empty consistency graph")
    adj = consistency_graph(A.source_points, A.target_points, noise_bound)
    clique, _ = max_clique(adj, budget)
    kept = A.subset(np.asarray(clique, dtype=np.int64))
    return kept, (build_tims(kept) if len(kept) >= 2 else None)


# --------------------------------------------------------------------------
# rotation

def _weighted_rotation(alphas, betas, w, mode):
    if mode == YAW_ONLY:
        a, b = alphas[:, :2], betas[:, :2]
        s = np.sum(w * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
        c = np.sum(w * (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
        return yaw_matrix(np.arctan2(s, c))
    H = (w[:, None] * alphas).T @ betas
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    return Vt.T @ D @ U.T


def _check_geometry(alphas, w, mode):
    active = alphas[w > 0]
    if mode == YAW_ONLY:
        if np.linalg.norm(active[:, :2], axis=1).max(initial=0.0) < 1e-9:
            raise RegistrationError("TIMs have no horizontal extent; yaw is unobservable")
        return
    if len(active) < 2:
        raise RegistrationError("degenerate TIM geometry")
    s = np.linalg.svd(active, compute_uv=False)
    if s[1] < 1e-9 * max(s[0], 1e-12):
        raise RegistrationError("TIMs are collinear; rotation is unobservable")


def gnc_rotation(
    tims: TimPairSet,
    cbar: float,
    mode: str = FULL_SO3,
    gnc_factor: float = 1.4,
    max_iters: int = 100,
    weight_tol: float = 1e-6,
):
    """GNC truncated-least-squares rotation over TIMs.

    ``cbar`` is the residual truncation in meters. Returns
    ``(R, weights, iterations, converged)``.
    """
    if mode not in (FULL_SO3, YAW_ONLY):
        raise ValueError(f"unknown rotation mode {mode!r}")
    K = len(tims)
    need = 3 if mode == FULL_SO3 else 2
    if K < need:
        raise RegistrationError(f"{mode} rotation needs at least {need} TIMs, got {K}")
    alphas = np.asarray(tims.alphas, dtype=float)
    betas = np.asarray(tims.betas, dtype=float)
    c2 = cbar**2
    w = np.ones(K)
    _check_geometry(alphas, w, mode)

    R = _weighted_rotation(alphas, betas, w, mode)
    res = np.sum((betas - alphas @ R.T) ** 2, axis=1)
    max_res = res.max()
    if max_res <= c2:
        return R, w, 1, True
    mu = 1.0 / (2.0 * max_res / c2 - 1.0)

    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        th1 = (mu + 1.0) / mu * c2
        th2 = mu / (mu + 1.0) * c2
        w_new = np.where(
            res >= th1, 0.0,
            np.where(res <= th2, 1.0, np.sqrt(c2 * mu * (mu + 1.0) / np.maximum(res, 1e-300)) - mu),
        )
        w_new = np.clip(w_new, 0.0, 1.0)
        if not w_new.any():
            raise RegistrationError("all GNC weights collapsed to zero")
        delta = np.abs(w_new - w).max()
        w = w_new
        _check_geometry(alphas, w, mode)
        R = project_to_so3(_weighted_rotation(alphas, betas, w, mode))
        res = np.sum((betas - alphas @ R.T) ** 2, axis=1)
        if delta < weight_tol:
            converged = True
            break
        mu *= gnc_factor
    return R, w, it, converged


# --------------------------------------------------------------------------
# translation

def _max_overlap_members(v: np.ndarray, half_width: float) -> np.ndarray:
    """Members of the largest set of intervals [v - h, v + h] sharing a common point."""
    n = len(v)
    starts = v - half_width
    ends = v + half_width
    # closed intervals: at equal coordinates, process starts before ends
    coords = np.concatenate([starts, ends])
    kinds = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    order = np.lexsort((kinds, coords))
    depth = np.cumsum(np.where(kinds[order] == 0, 1, -1))
    best = int(np.argmax(depth))
    x = coords[order][best]
    return np.flatnonzero((starts <= x) & (x <= ends))


def cote_translation(
    A: CorrespondenceSet, R: np.ndarray, noise_bound: float, cbar: float = 1.0
) -> np.ndarray:
    """Per-axis consensus translation from discrepancies ``p_b - R p_a``."""
    if len(A) == 0:
        raise RegistrationError("translation needs at least one correspondence")
    v = A.target_points - A.source_points @ np.asarray(R).T
    t = np.empty(3)
    for axis in range(3):
        members = _max_overlap_members(v[:, axis], noise_bound * cbar)
        t[axis] = v[members, axis].mean()
    return t


# --------------------------------------------------------------------------

def solve(A: CorrespondenceSet, config: RegistrationConfig | None = None) -> RegistrationResult:
    """Robust rigid estimate ``p_b ~ R p_a + t`` from putative correspondences."""
    with diagnostics.timed(diagnostics.OPTIM):
        return _solve(A, config)


def _solve(A, config):
    cfg = config or RegistrationConfig()
    if len(A) < cfg.min_inliers:
        raise RegistrationError(f"only {len(A)} correspondences (need {cfg.min_inliers})")
    kept, tims = max_clique_prune(A, cfg.noise_bound, cfg.clique_budget)
    if len(kept) < cfg.min_inliers:
        raise RegistrationError(f"max clique has {len(kept)} members (need {cfg.min_inliers})")
    # a TIM bounds noise at twice the per-point bound
    R, _, iters, converged = gnc_rotation(
        tims, 2.0 * cfg.noise_bound * cfg.cbar, cfg.mode,
        cfg.gnc_factor, cfg.gnc_max_iters, cfg.gnc_weight_tol,
    )
    t = cote_translation(kept, R, cfg.noise_bound, cfg.cbar)
    resid = np.linalg.norm(kept.target_points - kept.source_points @ R.T - t, axis=1)
    inliers = kept.subset(resid <= np.sqrt(3.0) * cfg.noise_bound * cfg.cbar)
    if len(inliers) < cfg.min_inliers:
        raise RegistrationError(f"only {len(inliers)} inliers after translation estimate")
    return RegistrationResult(Pose(R, t), inliers, converged, iters, len(A), len(kept))


def register(
    P_C: PointCloud,
    P_Q: PointCloud,
    voxel: float,
    mode: str | None = None,
    config: RegistrationConfig | None = None,
) -> RegistrationResult:
    """Estimate the transform taking ``P_C`` coordinates into ``P_Q`` coordinates."""
    cfg = config or RegistrationConfig()
    if mode is not None and mode != cfg.mode:
        cfg = RegistrationConfig(**{**cfg.__dict__, "mode": mode})
    if len(P_C) == 0 or len(P_Q) == 0:
        raise RegistrationError("cannot register an empty cloud")
    try:
        A = match_features(P_C, P_Q, voxel, cfg.match)
    except ValueError as exc:
        raise RegistrationError(str(exc)) from exc
    return solve(A, cfg)


def closed_form(A: CorrespondenceSet) -> Pose:
    """Plain least-squares fit (no outlier handling)."""
    R, t = kabsch(A.source_points, A.target_points)
    return Pose(R, t)
