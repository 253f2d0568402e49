import numpy as np
import pytest

from mapmerge.geometry import PointCloud, Pose, so3_exp


def random_pose(rng, t_scale=10.0, yaw_only=False):
    if yaw_only:
        return Pose.from_yaw(rng.uniform(-np.pi, np.pi), rng.uniform(-t_scale, t_scale, 3))
    w = rng.normal(size=3)
    w *= rng.uniform(0, np.pi) / np.linalg.norm(w)
    return Pose(so3_exp(w), rng.uniform(-t_scale, t_scale, 3))


def _box_surface(rng, lo, hi, density):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    pts = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        area = np.prod(hi[others] - lo[others])
        for face in (lo[axis], hi[axis]):
            n = max(1, int(area * density))
            p = rng.uniform(lo, hi, size=(n, 3))
            p[:, axis] = face
            pts.append(p)
    return np.vstack(pts)


def structured_scene(seed=0, extent=40.0, n_boxes=14, density=8.0):
    """Ground plane plus randomly sized boxes and poles: rich, non-repetitive geometry."""
    rng = np.random.default_rng(seed)
    ground = rng.uniform([-extent, -extent, 0], [extent, extent, 0], size=(int(4 * extent * extent * 0.5), 3))
    parts = [ground]
    for _ in range(n_boxes):
        c = rng.uniform(-extent * 0.8, extent * 0.8, 2)
        size = rng.uniform([2, 2, 2], [9, 9, 8])
        lo = np.array([c[0], c[1], 0.0])
        parts.append(_box_surface(rng, lo, lo + size, density))
    for _ in range(n_boxes):
        c = rng.uniform(-extent, extent, 2)
        h = rng.uniform(3, 7)
        z = rng.uniform(0, h, int(h * 30))
        a = rng.uniform(0, 2 * np.pi, len(z))
        parts.append(np.column_stack([c[0] + 0.2 * np.cos(a), c[1] + 0.2 * np.sin(a), z]))
    return PointCloud(np.vstack(parts))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scene():
    return structured_scene()


# one PASS/FAIL line per acceptance criterion, shown even when output is captured
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
