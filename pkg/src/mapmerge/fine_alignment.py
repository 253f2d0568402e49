"""Truncated point-to-point ICP and truncated-MSE loop validation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, Pose, SpatialIndex, kabsch, so3_log


class AlignmentError(RuntimeError):
    """ICP lost every correspondence (no overlap or a bad initial guess)."""


@dataclass
class IcpResult:
    transform: Pose
    t_mse: float
    n_inliers: int
    iterations: int
    converged: bool
    n_source: int = 0
    # truncated cost sum(min(d^2, d_max^2)) after each accepted iteration
    cost_history: list = field(default_factory=list)

    @property
    def inlier_fraction(self) -> float:
        return self.n_inliers / self.n_source if self.n_source else 0.0


def _as_index(target) -> SpatialIndex:
    return target if isinstance(target, SpatialIndex) else SpatialIndex(target)


def t_mse(source: PointCloud, target, T: Pose, d_max: float) -> tuple[float, int]:
    """Mean of squared NN distances over source points with ``d_n <= d_max``.

    Returns ``(inf, 0)`` when no source point has a neighbour within ``d_max``.
    """
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    index = _as_index(target)
    if len(source) == 0 or len(index) == 0:
        return float("inf"), 0
    d, _ = index.knn(T.apply(source.points), k=1)
    inl = d <= d_max
    n = int(inl.sum())
    if n == 0:
        return float("inf"), 0
    return float(np.mean(d[inl] ** 2)), n


def plain_mse(source: PointCloud, target, T: Pose) -> float:
    """Untruncated mean squared NN distance."""
    index = _as_index(target)
    d, _ = index.knn(T.apply(source.points), k=1)
    return float(np.mean(d**2))


def icp_truncated(
    source: PointCloud,
    target,
    init: Pose,
    d_max: float,
    max_iterations: int = 50,
    tol_translation: float = 1e-6,
    tol_rotation: float = 1e-6,
) -> IcpResult:
    """Point-to-point ICP ignoring pairs farther apart than ``d_max``.

    The returned transform maps ``source`` into the ``target`` frame. Raises
    :class:`AlignmentError` when an iteration has no surviving pair.
    """
    if len(source) == 0:
        raise AlignmentError("empty source cloud")
    index = _as_index(target)
    if len(index) == 0:
        raise AlignmentError("empty target cloud")
    src = source.points
    T = init
    converged = False
    history = []
    it = 0
    for it in range(1, max_iterations + 1):
        moved = T.apply(src)
        d, j = index.knn(moved, k=1)
        inl = d <= d_max
        if inl.sum() < 3:
            raise AlignmentError(f"only {int(inl.sum())} correspondences within d_max at iteration {it}")
        history.append(float(np.sum(np.minimum(d**2, d_max**2))))
        # incremental fit in the target frame, composed on the left
        R, t = kabsch(moved[inl], index.points[j[inl]])
        step = Pose(R, t)
        T = step @ T
        if np.linalg.norm(t) < tol_translation and np.linalg.norm(so3_log(R)) < tol_rotation:
            converged = True
            break
    mse, n_in = t_mse(source, index, T, d_max)
    history.append(float(np.sum(np.minimum(index.knn(T.apply(src), k=1)[0] ** 2, d_max**2))))
    return IcpResult(T, mse, n_in, it, converged, len(source), history)


def validate_loop(result: IcpResult, tau_mse: float, min_inlier_fraction: float = 0.05) -> bool:
    """Accept when ICP converged, t-MSE <= tau and enough source points matched."""
    if not result.converged or not np.isfinite(result.t_mse):
        return False
    if result.t_mse > tau_mse:
        return False
    return result.inlier_fraction >= min_inlier_fraction
