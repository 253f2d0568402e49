"""Plain-text file formats, configuration loading and the ``mapmerge`` command line."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics
from .evaluation import TrajectoryPair, ape_rmse, classify_loops, isae, metrics_text
from .fine_alignment import AlignmentError
from .geometry import PointCloud, Pose
from .pipeline import (
    CENTRAL, QUERY, InsufficientLoopsError, IntraLoop, LoopConstraint, PipelineConfig, Session,
    accumulate_map, build_global_map, find_inter_loops, initial_alignment, merge, worker_count,
)
from .pose_graph import UnderconstrainedError, graph_to_text
from .registration import FULL_SO3, YAW_ONLY, RegistrationConfig, RegistrationError, register
from .scenario import ScenarioSpec, generate_scenario

log = logging.getLogger(__name__)

QUAT_TOLERANCE = 1e-3
EXIT_OK, EXIT_PIPELINE, EXIT_INPUT = 0, 1, 2
MANIFEST_NAME = "session.txt"


class InputError(ValueError):
    """Malformed or missing input file."""


# ------------------------------------------------------------ atomic io ----

def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_key_value(text: str, source: str = "<text>") -> dict:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_key_value(path) -> dict:
    return parse_key_value(_read_text(path), str(path))


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc


def read_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    try:
        return PipelineConfig.from_dict(read_key_value(path), base)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- poses ----

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def pose_tokens(p: Pose) -> list[str]:
    return [_fmt(v) for v in (*p.translation, *p.as_quaternion())]


def parse_pose(tokens, where: str = "") -> Pose:
    """Pose from ``tx ty tz qx qy qz qw``; the quaternion must be unit within 1e-3."""
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise InputError(f"{where}: non-numeric pose value") from exc
    if len(vals) != 7 or not np.all(np.isfinite(vals)):
        raise InputError(f"{where}: expected 7 finite numbers, got {len(vals)}")
    q = vals[3:]
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > QUAT_TOLERANCE:
        raise InputError(f"{where}: quaternion norm {norm:.6g} is not unit within {QUAT_TOLERANCE}")
    return Pose.from_quaternion(q / norm, vals[:3])


def read_pose_file(path) -> list[tuple[int, Pose]]:
    """Lines of ``index tx ty tz qx qy qz qw``; ``#`` comments and blank lines are skipped."""
    out = []
    for n, line in enumerate(_read_text(path).splitlines(), 1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        where = f"{path}:{n}"
        if len(toks) != 8:
            raise InputError(f"{where}: expected 8 fields, got {len(toks)}")
        try:
            idx = int(toks[0])
        except ValueError as exc:
            raise InputError(f"{where}: bad index {toks[0]!r}") from exc
        out.append((idx, parse_pose(toks[1:], where)))
    return out


def pose_file_text(poses, header: str | None = None) -> str:
    """Text of a pose file; ``poses`` is a list of Pose or of (index, Pose)."""
    lines = [f"# {header}"] if header else []
    for i, item in enumerate(poses):
        idx, p = item if isinstance(item, tuple) else (i, item)
        lines.append(" ".join([str(idx)] + pose_tokens(p)))
    return "\n".join(lines) + "\n"


def write_pose_file(path, poses, header: str | None = None) -> None:
    atomic_write(path, pose_file_text(poses, header))


# ---------------------------------------------------------------- clouds ----

def read_cloud(path) -> PointCloud:
    """ASCII PLY with float x, y, z (and optional nx, ny, nz) vertex properties."""
    try:
        with open(path, "r", errors="replace") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    if not lines or lines[0].strip() != "ply":
        raise InputError(f"{path}: not a PLY file")
    props, n_vertex, elements, fmt = [], None, [], None
    body = None
    for i, line in enumerate(lines[1:], 1):
        toks = line.split()
        if not toks or toks[0] in ("comment", "obj_info"):
            continue
        if toks[0] == "format":
            fmt = toks[1] if len(toks) > 1 else ""
        elif toks[0] == "element":
            elements.append((toks[1], int(toks[2])))
            if toks[1] == "vertex":
                n_vertex = int(toks[2])
        elif toks[0] == "property":
            if elements and elements[-1][0] == "vertex":
                if toks[1] == "list":
                    raise InputError(f"{path}: list properties on vertices are unsupported")
                props.append(toks[-1])
        elif toks[0] == "end_header":
            body = i + 1
            break
    if fmt != "ascii":
        raise InputError(f"{path}: unsupported PLY format {fmt!r} (only ascii is read)")
    if body is None or n_vertex is None:
        raise InputError(f"{path}: missing vertex element or end_header")
    if any(name != "vertex" and count > 0 for name, count in elements):
        raise InputError(f"{path}: unsupported element layout {elements}")
    if elements[0][0] != "vertex":
        raise InputError(f"{path}: vertex element must come first")
    try:
        col = [props.index(c) for c in ("x", "y", "z")]
    except ValueError as exc:
        raise InputError(f"{path}: vertex element lacks x, y, z") from exc
    rows = [ln for ln in lines[body:body + n_vertex]]
    if len(rows) != n_vertex:
        raise InputError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
    if n_vertex == 0:
        return PointCloud(np.zeros((0, 3)))
    try:
        data = np.array([r.split() for r in rows], dtype=float).reshape(n_vertex, -1)
    except ValueError as exc:
        raise InputError(f"{path}: malformed vertex row") from exc
    if data.shape[1] != len(props):
        raise InputError(f"{path}: vertex rows have {data.shape[1]} values, header declares {len(props)}")
    normals = None
    if all(c in props for c in ("nx", "ny", "nz")):
        normals = data[:, [props.index(c) for c in ("nx", "ny", "nz")]]
    return PointCloud(data[:, col], normals)


def cloud_text(cloud: PointCloud) -> str:
    has_n = cloud.has_normals
    head = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
            "property float x", "property float y", "property float z"]
    if has_n:
        head += ["property float nx", "property float ny", "property float nz"]
    head.append("end_header")
    data = np.hstack([cloud.points, cloud.normals]) if has_n else cloud.points
    body = "\n".join(" ".join(_fmt(v) for v in row) for row in data)
    return "\n".join(head) + "\n" + (body + "\n" if len(data) else "")


def write_cloud(cloud: PointCloud, path) -> None:
    atomic_write(path, cloud_text(cloud))


# -------------------------------------------------------------- sessions ----

@dataclass
class SessionManifest:
    root: Path
    poses: Path
    scans: Path
    pattern: str = "{index:06d}.ply"
    intra_loops: Path | None = None
    id: str = ""
    role: str = CENTRAL

    @classmethod
    def read(cls, path) -> "SessionManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        kv = read_key_value(path)
        root = path.parent
        missing = [k for k in ("poses", "scans") if k not in kv]
        if missing:
            raise InputError(f"{path}: missing keys {missing}")
        m = cls(
            root=root,
            poses=root / kv["poses"],
            scans=root / kv["scans"],
            pattern=kv.get("pattern", "{index:06d}.ply"),
            intra_loops=root / kv["intra_loops"] if kv.get("intra_loops") else None,
            id=kv.get("id", root.name),
            role=kv.get("role", CENTRAL),
        )
        if m.role not in (CENTRAL, QUERY):
            raise InputError(f"{path}: role must be central or query")
        if not m.poses.is_file():
            raise InputError(f"{path}: pose file {m.poses} does not exist")
        if not m.scans.is_dir():
            raise InputError(f"{path}: scan directory {m.scans} does not exist")
        return m

    def text(self) -> str:
        lines = [f"id={self.id}", f"role={self.role}",
                 f"poses={self.poses.relative_to(self.root)}",
                 f"scans={self.scans.relative_to(self.root)}", f"pattern={self.pattern}"]
        if self.intra_loops is not None:
            lines.append(f"intra_loops={self.intra_loops.relative_to(self.root)}")
        return "\n".join(lines) + "\n"


def _cov_from_upper(vals) -> np.ndarray:
    iu = np.triu_indices(6)
    C = np.zeros((6, 6))
    C[iu] = vals
    return C + np.triu(C, 1).T


def read_intra_loops(path, default_cov: float = 1e-2) -> list[IntraLoop]:
    """Lines of ``l m tx ty tz qx qy qz qw [21 upper-triangular covariance values]``."""
    out = []
    for n, line in enumerate(_read_text(path).splitlines(), 1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        where = f"{path}:{n}"
        if len(toks) not in (9, 30):
            raise InputError(f"{where}: expected 9 or 30 fields, got {len(toks)}")
        try:
            l, m = int(toks[0]), int(toks[1])
            cov = _cov_from_upper([float(t) for t in toks[9:]]) if len(toks) == 30 else default_cov * np.eye(6)
        except ValueError as exc:
            raise InputError(f"{where}: malformed value") from exc
        out.append(IntraLoop(l, m, parse_pose(toks[2:9], where), cov))
    return out


def read_session(manifest) -> Session:
    m = manifest if isinstance(manifest, SessionManifest) else SessionManifest.read(manifest)
    entries = read_pose_file(m.poses)
    if len(entries) < 2:
        raise InputError(f"{m.poses}: a session needs at least two poses")
    idx = [i for i, _ in entries]
    if idx != list(range(len(idx))):
        raise InputError(f"{m.poses}: node indices must be 0..N-1 in order")
    scans = []
    for i in idx:
        p = m.scans / m.pattern.format(index=i)
        if not p.is_file():
            raise InputError(f"missing scan {p}")
        scans.append(read_cloud(p))
    loops = read_intra_loops(m.intra_loops) if m.intra_loops is not None else []
    for lp in loops:
        if not (0 <= lp.l < len(idx) and 0 <= lp.m < len(idx)):
            raise InputError(f"{m.intra_loops}: loop ({lp.l}, {lp.m}) references a missing node")
    return Session(m.id, m.role, [p for _, p in entries], scans, loops)


def write_session(session: Session, directory) -> Path:
    """Write poses, scans and manifest under ``directory``; returns the manifest path."""
    d = Path(directory)
    m = SessionManifest(d, d / "poses.txt", d / "scans", id=session.id, role=session.role)
    for i, scan in enumerate(session.scans):
        write_cloud(scan, m.scans / m.pattern.format(index=i))
    write_pose_file(m.poses, session.poses)
    if session.intra_loops:
        m.intra_loops = d / "intra_loops.txt"
        iu = np.triu_indices(6)
        atomic_write(m.intra_loops, "".join(
            " ".join([str(lp.l), str(lp.m)] + pose_tokens(lp.z) + [_fmt(v) for v in lp.cov[iu]]) + "\n"
            for lp in session.intra_loops))
    atomic_write(d / MANIFEST_NAME, m.text())
    return d / MANIFEST_NAME


# --------------------------------------------------------------- reports ----

LOOP_HEADER = "# j k tx ty tz qx qy qz qw t_mse inlier_fraction accepted"


def loops_text(loops) -> str:
    lines = [LOOP_HEADER]
    for lc in loops:
        lines.append(" ".join([str(lc.j), str(lc.k)] + pose_tokens(lc.z)
                              + [_fmt(lc.t_mse), _fmt(lc.inlier_fraction), str(int(lc.accepted))]))
    return "\n".join(lines) + "\n"


def read_loops(path, cfg: PipelineConfig | None = None) -> list[LoopConstraint]:
    cfg = cfg or PipelineConfig()
    out = []
    for n, line in enumerate(_read_text(path).splitlines(), 1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        if len(toks) != 12:
            raise InputError(f"{path}:{n}: expected 12 fields, got {len(toks)}")
        z = parse_pose(toks[2:9], f"{path}:{n}")
        out.append(LoopConstraint(int(toks[0]), int(toks[1]), z, cfg.inter_cov * np.eye(6),
                                  float(toks[9]), bool(int(toks[11])), float(toks[10])))
    return out


def run_manifest(cfg: PipelineConfig, rec: diagnostics.Recorder, extra: dict | None = None) -> str:
    parts = ["[config]\n", cfg.to_text()]
    if extra:
        parts += ["[result]\n", "".join(f"{k}={v}\n" for k, v in extra.items())]
    parts += ["[counts]\n", diagnostics.counts_text(rec), "[timings]\n", diagnostics.report(rec)]
    return "".join(parts)


def read_manifest_config(path) -> PipelineConfig:
    """Effective configuration echoed in a run manifest."""
    text = _read_text(path)
    start = text.index("[config]\n") + len("[config]\n")
    end = text.find("\n[", start)
    return PipelineConfig.from_dict(parse_key_value(text[start:end if end >= 0 else None]))


# ------------------------------------------------------------------- cli ----

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(f"{self.prog}: {message}")


_FLAG_KEYS = {
    "voxel_map": float, "voxel_submap": float, "window": int, "d_max": float, "tau_mse": float,
    "loop_stride": int, "search_radius": float, "registration_mode": str, "loop_mode": str,
    "min_loops": int, "seed": int, "threads": int,
}


def _add_config_flags(p):
    p.add_argument("--config", help="key=value configuration file")
    for key, typ in _FLAG_KEYS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)


def _config_from_args(args) -> PipelineConfig:
    cfg = read_config(args.config) if args.config else PipelineConfig()
    flags = {k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k) is not None}
    if "threads" not in flags and not (args.config and "threads" in read_key_value(args.config)):
        flags["threads"] = worker_count(None)
    try:
        return PipelineConfig.from_dict(flags, cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mapmerge", description="Merge two point-cloud SLAM sessions into one map.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("merge", help="full two-session merge")
    m.add_argument("central", help="central session manifest (file or directory)")
    m.add_argument("query", help="query session manifest (file or directory)")
    m.add_argument("--out", default="mapmerge_out")
    m.add_argument("--map-voxel", type=float, default=None,
                   help="voxel size of the merged map (default: submap voxel)")
    _add_config_flags(m)

    r = sub.add_parser("register", help="register two point clouds")
    r.add_argument("cloud_a")
    r.add_argument("cloud_b")
    r.add_argument("--voxel", type=float, default=2.0)
    r.add_argument("--mode", choices=(YAW_ONLY, FULL_SO3), default=YAW_ONLY)
    r.add_argument("--noise-bound", type=float, default=1.0)
    r.add_argument("--out", help="write the transform as a pose file")

    lp = sub.add_parser("loops", help="inter-session loop search only")
    lp.add_argument("central")
    lp.add_argument("query")
    lp.add_argument("--initial", help="pose file whose first pose is the query-to-central transform")
    lp.add_argument("--out", default="mapmerge_loops")
    _add_config_flags(lp)

    e = sub.add_parser("eval", help="iSAE and APE against ground truth")
    e.add_argument("--gt", required=True, help="ground-truth directory written by synth")
    e.add_argument("--est", required=True, help="output directory written by merge")
    e.add_argument("--out", help="also write the metrics here")

    s = sub.add_parser("synth", help="generate a synthetic two-session scenario")
    s.add_argument("--spec", help="key=value scenario file")
    s.add_argument("--out", required=True)
    return p


def _cmd_merge(args) -> int:
    cfg = _config_from_args(args)
    C = read_session(args.central)
    Q = read_session(args.query)
    rec = diagnostics.Recorder()
    res = merge(C, Q, cfg, rec)
    with rec.stage("map assembly"):
        with diagnostics.timed(diagnostics.VOXEL):
            gmap = build_global_map([res.central, res.query], res.anchors, args.map_voxel or cfg.voxel_submap)
    out = Path(args.out)
    write_pose_file(out / "central_poses.txt", res.world_poses(CENTRAL), "central nodes, merged frame")
    write_pose_file(out / "query_poses.txt", res.world_poses(QUERY), "query nodes, merged frame")
    write_pose_file(out / "anchors.txt", list(res.anchors), "0 = central anchor, 1 = query anchor")
    atomic_write(out / "loops.txt", loops_text(res.loops))
    atomic_write(out / "graph.txt", graph_to_text(res.graph))
    write_cloud(gmap, out / "merged_map.ply")
    extra = {
        "accepted_loops": sum(lc.accepted for lc in res.loops),
        "candidate_loops": len(res.loops),
        "initial_cost": _fmt(res.report.initial_cost),
        "final_cost": _fmt(res.report.final_cost),
        "iterations": res.report.iterations,
        "converged": int(res.report.converged),
        "initial_alignment": " ".join(pose_tokens(res.initial_alignment)),
        "map_points": len(gmap),
    }
    atomic_write(out / "manifest.txt", run_manifest(cfg, rec, extra))
    sys.stdout.write(diagnostics.report(rec))
    return EXIT_OK


def _cmd_register(args) -> int:
    a, b = read_cloud(args.cloud_a), read_cloud(args.cloud_b)
    rec = diagnostics.Recorder()
    cfg = RegistrationConfig(noise_bound=args.noise_bound, mode=args.mode)
    with rec.stage("registration") as st:
        res = register(a, b, args.voxel, config=cfg)
        st.counts["correspondences"] += res.n_correspondences
    print(" ".join(["0"] + pose_tokens(res.transform)))
    if args.out:
        write_pose_file(args.out, [res.transform], "transform taking cloud_a into cloud_b")
    sys.stdout.write(diagnostics.report(rec))
    return EXIT_OK


def _cmd_loops(args) -> int:
    cfg = _config_from_args(args)
    C, Q = read_session(args.central), read_session(args.query)
    rec = diagnostics.Recorder()
    if args.initial:
        entries = read_pose_file(args.initial)
        if not entries:
            raise InputError(f"{args.initial}: no pose")
        T = entries[0][1]
    else:
        with rec.stage("map-to-map alignment"):
            T = initial_alignment(accumulate_map(C, cfg.voxel_map), accumulate_map(Q, cfg.voxel_map),
                                  cfg.voxel_map, cfg)
    with rec.stage("loop search"):
        loops = find_inter_loops(C, Q, T, cfg)
    out = Path(args.out)
    atomic_write(out / "loops.txt", loops_text(loops))
    atomic_write(out / "manifest.txt", run_manifest(
        cfg, rec, {"accepted_loops": sum(lc.accepted for lc in loops), "candidate_loops": len(loops)}))
    sys.stdout.write(loops_text(loops))
    return EXIT_OK


def _poses_only(path) -> list:
    return [p for _, p in read_pose_file(path)]


def _cmd_eval(args) -> int:
    gt, est = Path(args.gt), Path(args.est)
    gt_c, gt_q = _poses_only(gt / "gt_central.txt"), _poses_only(gt / "gt_query.txt")
    T = _poses_only(gt / "T_gt.txt")
    if len(T) != 1:
        raise InputError(f"{gt / 'T_gt.txt'}: expected exactly one pose")
    est_c, est_q = _poses_only(est / "central_poses.txt"), _poses_only(est / "query_poses.txt")
    try:
        pc, pq = TrajectoryPair(est_c, gt_c), TrajectoryPair(est_q, gt_q)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    res = isae(pc, pq, T[0])
    rows = {
        "isae_translation_m": res.translation_error,
        "isae_rotation_deg": res.rotation_error,
        "isae_failure": int(res.failed),
        "ape_central_m": ape_rmse(pc),
        "ape_query_m": ape_rmse(pq),
    }
    if (est / "loops.txt").is_file():
        acc = [lc for lc in read_loops(est / "loops.txt") if lc.accepted]
        tp, fp = classify_loops(acc, (gt_c, [T[0] @ p for p in gt_q]))
        rows.update({"loops_tp": tp, "loops_fp": fp})
    text = metrics_text(rows)
    sys.stdout.write(text)
    if args.out:
        atomic_write(args.out, text)
    return EXIT_OK


def _cmd_synth(args) -> int:
    spec = ScenarioSpec()
    if args.spec:
        try:
            spec = ScenarioSpec.from_dict(read_key_value(args.spec))
        except (TypeError, ValueError) as exc:
            raise InputError(f"{args.spec}: {exc}") from exc
    sc = generate_scenario(spec)
    out = Path(args.out)
    write_session(sc.central, out / "central")
    write_session(sc.query, out / "query")
    write_pose_file(out / "ground_truth" / "gt_central.txt", sc.gt_central, "central frame")
    write_pose_file(out / "ground_truth" / "gt_query.txt", sc.gt_query, "query frame")
    write_pose_file(out / "ground_truth" / "T_gt.txt", [sc.T_gt], "query frame in central frame")
    atomic_write(out / "ground_truth" / "spec.txt", spec.to_text()
                 + f"query_start={sc.query_start}\npredicted_overlap={sc.predicted_overlap:.6f}\n")
    print(f"wrote {out}: {len(sc.central)} central and {len(sc.query)} query nodes")
    return EXIT_OK


_COMMANDS = {"merge": _cmd_merge, "register": _cmd_register, "loops": _cmd_loops,
             "eval": _cmd_eval, "synth": _cmd_synth}


def cli(argv=None) -> int:
    """Run the command line; returns 0 on success, 1 on pipeline failure, 2 on input errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (InsufficientLoopsError, RegistrationError, AlignmentError, UnderconstrainedError) as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (InputError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(cli())
