"""Register two overlapping crops of one scene related by a large yaw.

The crops share only part of their extent, so some putative feature matches
pair unrelated places. The max-clique step keeps a mutually consistent
subset and the robust rotation solve ignores whatever outliers survive it.
"""
import numpy as np

from mapmerge import PointCloud, Pose, register
from mapmerge.features import match_features
from mapmerge.geometry import pose_error
from mapmerge.registration import RegistrationConfig
from mapmerge.scenario import ScenarioSpec, generate_scenario

rng = np.random.default_rng(0)

# a slice of the synthetic corridor world serves as the scene
world = generate_scenario(ScenarioSpec(seed=0, n_nodes=60)).world.points
x0 = world[:, 0].min()
a = world[world[:, 0] < x0 + 60]
b = world[(world[:, 0] > x0 + 20) & (world[:, 0] < x0 + 80)]

truth = Pose.from_yaw(np.radians(120.0), (40.0, -25.0, 0.0))
A = PointCloud(a)
B = PointCloud(truth.apply(b) + rng.normal(0, 0.02, b.shape))
print(f"cloud A: {len(A)} points, cloud B: {len(B)} points")

voxel = 1.0
cfg = RegistrationConfig(noise_bound=0.5)
matches = match_features(A, B, voxel, cfg.match)
resid = np.linalg.norm(truth.apply(matches.source_points) - matches.target_points, axis=1)
print(f"{len(matches)} putative matches, {np.mean(resid < 1.5):.0%} of them near the truth")

res = register(A, B, voxel, config=cfg)
dt, dr = pose_error(res.transform, truth)
print(f"max clique kept {res.n_clique}, final inliers {len(res.inlier_pairs)}")
print(f"error against truth: {dt:.3f} m, {dr:.3f} deg")
