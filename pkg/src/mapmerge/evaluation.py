"""Trajectory alignment, inter-session alignment error (iSAE), APE and loop TP/FP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, between, kabsch, pose_error

# failure bounds for a multi-session merge: 100 m or 20 deg
FAILURE_TRANSLATION = 100.0
FAILURE_ROTATION_DEG = 20.0
TP_TRANSLATION = 2.0
TP_ROTATION_DEG = 10.0


class DegenerateTrajectoryError(ValueError):
    pass


@dataclass
class TrajectoryPair:
    estimated: list
    ground_truth: list

    def __post_init__(self):
        if len(self.estimated) != len(self.ground_truth):
            raise ValueError("estimated and ground-truth trajectories differ in length")

    def positions(self):
        est = np.array([p.translation for p in self.estimated]).reshape(-1, 3)
        gt = np.array([p.translation for p in self.ground_truth]).reshape(-1, 3)
        return est, gt


@dataclass
class IsaeResult:
    translation_error: float
    rotation_error: float
    T_iSAE: Pose

    @property
    def failed(self) -> bool:
        return is_failure(self.translation_error, self.rotation_error)


def is_failure(translation_error: float, rotation_error_deg: float) -> bool:
    return translation_error > FAILURE_TRANSLATION or rotation_error_deg > FAILURE_ROTATION_DEG


def align_trajectory(pair: TrajectoryPair) -> Pose:
    """Rigid (scale 1) least-squares fit mapping estimated positions onto ground truth."""
    est, gt = pair.positions()
    if len(est) < 3:
        raise DegenerateTrajectoryError(f"need at least 3 poses to align, got {len(est)}")
    s = np.linalg.svd(est - est.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-12):
        raise DegenerateTrajectoryError("trajectory positions are collinear")
    R, t = kabsch(est, gt)
    return Pose(R, t)


def isae(C_pair: TrajectoryPair, Q_pair: TrajectoryPair, T_gt: Pose) -> IsaeResult:
    """Residual of ``align(C)^-1 * T_gt * align(Q)``.

    ``T_gt`` maps query ground-truth frame coordinates into the central
    ground-truth frame.
    """
    a_c = align_trajectory(C_pair)
    a_q = align_trajectory(Q_pair)
    T = a_c.inverse() @ T_gt @ a_q
    return IsaeResult(T.distance(), float(np.degrees(T.angle())), T)


def ape_rmse(pair: TrajectoryPair) -> float:
    """Translation RMSE after rigid alignment."""
    A = align_trajectory(pair)
    est, gt = pair.positions()
    d = A.apply(est) - gt
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def loop_error(z: Pose, gt_central: Pose, gt_query: Pose) -> tuple[float, float]:
    """Error of a loop measurement ``z`` (query node in central node frame)."""
    return pose_error(between(gt_central, gt_query), z)


def classify_loops(constraints, ground_truth_poses) -> tuple[int, int]:
    """Count (TP, FP) loops: TP when both errors are under 2 m and 10 deg.

    ``ground_truth_poses`` is ``(central_poses, query_poses)`` in one frame.
    """
    gt_c, gt_q = ground_truth_poses
    tp = fp = 0
    for c in constraints:
        dt, dr = loop_error(c.z, gt_c[c.j], gt_q[c.k])
        if dt < TP_TRANSLATION and dr < TP_ROTATION_DEG:
            tp += 1
        else:
            fp += 1
    return tp, fp


def metrics_text(rows: dict) -> str:
    """One ``name value`` row per metric."""
    return "".join(f"{k} {v:.9g}\n" if isinstance(v, float) else f"{k} {v}\n" for k, v in rows.items())


# synthetic scenarios with ground truth live next to the metrics that consume them
from .scenario import Scenario, ScenarioSpec, generate_scenario, map_overlap  # noqa: E402,F401
