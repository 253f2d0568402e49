"""Synthetic two-session pose graphs with known ground truth."""
import numpy as np

from mapmerge.geometry import Pose, between, so3_exp
from mapmerge.pose_graph import ANCHOR_CENTRAL, ANCHOR_QUERY, CENTRAL, QUERY, PoseGraph, set_anchor_covariances

AC, AQ = (ANCHOR_CENTRAL, 0), (ANCHOR_QUERY, 0)


def trajectory(rng, n, start=Pose.identity(), step=1.0, turn=0.15, climb=0.0):
    poses = [start]
    for _ in range(n - 1):
        inc = Pose(so3_exp([rng.normal(0, 0.01), rng.normal(0, 0.01), rng.normal(0, turn)]),
                   [step, rng.normal(0, 0.05), climb + rng.normal(0, 0.01)])
        poses.append(poses[-1] @ inc)
    return poses


def perturb(rng, p: Pose, sigma_r, sigma_t) -> Pose:
    return p @ Pose(so3_exp(rng.normal(0, sigma_r, 3)), rng.normal(0, sigma_t, 3))


class TwoSession:
    """Ground truth for a central and a query session sharing one world."""

    def __init__(self, rng, n=20, T_query=None):
        self.T = T_query or Pose.from_yaw(np.radians(100), (30.0, 20.0, 1.0))
        self.world_c = trajectory(rng, n)
        # the query drives over the same route, slightly offset
        self.world_q = [p @ Pose.from_yaw(0.05, (0.3, 0.8, 0.0)) for p in self.world_c]
        self.c = self.world_c
        self.q = [self.T.inverse() @ p for p in self.world_q]
        self.n = n

    def loop_z(self, j, k) -> Pose:
        """Inter-loop measurement: central node j expressed in the frame of query node k."""
        return between(self.world_q[k], self.world_c[j])

    def graph(self, rng=None, odo_noise=(0.0, 0.0), init_c=None, init_q=None, anchor_q=None,
              loops=None, cov_c=1e-6, cov_q=1e4, loop_cov=1e-2, anchor_priors=True, corrupt=(),
              anchor_init=None):
        """``anchor_q`` sets the query anchor estimate and its prior; ``anchor_init`` the estimate only."""
        g = PoseGraph()
        init_c = init_c or self.c
        init_q = init_q or self.q
        for i, p in enumerate(init_c):
            g.add_node((CENTRAL, i), p)
        for i, p in enumerate(init_q):
            g.add_node((QUERY, i), p)
        g.add_node(AC, Pose.identity())
        g.add_node(AQ, anchor_q or self.T)
        g.add_prior((CENTRAL, 0), self.c[0], 1e-6 * np.eye(6))
        g.add_prior((QUERY, 0), self.q[0], 1e-6 * np.eye(6))
        odo_cov = np.diag([1e-4] * 3 + [1e-2] * 3)
        for kind, poses in ((CENTRAL, self.c), (QUERY, self.q)):
            for i in range(1, len(poses)):
                z = between(poses[i], poses[i - 1])
                if rng is not None and odo_noise[0] > 0:
                    z = perturb(rng, z, *odo_noise)
                g.add_odometry((kind, i - 1), (kind, i), z, odo_cov)
        loops = loops if loops is not None else [(j, j) for j in range(0, self.n, 2)]
        for idx, (j, k) in enumerate(loops):
            z = self.loop_z(j, k)
            if idx in corrupt:
                d = rng.normal(size=3)
                z = Pose(z.rotation, z.translation + 50.0 * d / np.linalg.norm(d))
            g.add_inter_loop((CENTRAL, j), (QUERY, k), z, loop_cov * np.eye(6))
        if anchor_priors:
            set_anchor_covariances(g, cov_c * np.eye(6), cov_q * np.eye(6))
        if anchor_init is not None:
            g.nodes[AQ] = anchor_init
        return g

    def node_errors(self, g):
        """Largest (translation, rotation-rad) error of world-frame nodes."""
        worst_t = worst_r = 0.0
        for kind, truth, anchor in ((CENTRAL, self.world_c, AC), (QUERY, self.world_q, AQ)):
            for i, p in enumerate(truth):
                est = g.nodes[anchor] @ g.nodes[(kind, i)]
                d = between(p, est)
                worst_t = max(worst_t, d.distance())
                worst_r = max(worst_r, d.angle())
        return worst_t, worst_r
