"""Multi-session point-cloud map merging with robust global registration and pose-graph optimization."""
from .geometry import PointCloud, Pose, between, compose, kabsch, transform_cloud, voxel_downsample
from .features import CorrespondenceSet, MatchConfig, compute_fpfh, extract_keypoints, match_features
from .registration import RegistrationConfig, RegistrationError, RegistrationResult, register, solve
from .fine_alignment import AlignmentError, IcpResult, icp_truncated, t_mse, validate_loop
from .pose_graph import OptimizerConfig, PoseGraph, UnderconstrainedError, optimize
from .pipeline import (
    InsufficientLoopsError, IntraLoop, LoopConstraint, MergeResult, PipelineConfig, Session,
    build_global_map, find_inter_loops, initial_alignment, merge,
)
from .evaluation import (
    Scenario, ScenarioSpec, TrajectoryPair, ape_rmse, classify_loops, generate_scenario, isae,
    map_overlap,
)
from .diagnostics import Recorder, report
from .cli_io import cli, read_cloud, read_pose_file, read_session, write_cloud, write_pose_file, write_session

__version__ = "0.1.0"
