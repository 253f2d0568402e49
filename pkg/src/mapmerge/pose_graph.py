"""Multi-session pose graph with anchor nodes, solved by batch Levenberg-Marquardt.

Conventions
-----------
* Tangent vectors are ``(rotation, translation)``; covariances follow that order.
* ``a (-) b`` is ``b^-1 * a``. Odometry and intra-session loop factors between
  ``a`` and ``b`` measure ``a (-) b``; the inter-session factor measures
  ``(anchor_C * x_C) (-) (anchor_Q * x_Q)``.
* A factor residual is ``log(z^-1 * prediction)`` with log on SO(3) x R^3,
  and the retraction is ``R <- R exp(w)``, ``t <- t + R v``.

Every factor is evaluated as ``E = z^-1 (dB xB)^-1 (dA xA)`` where absent
slots are the identity, which lets all factors be linearized in one batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Pose, between, hat, so3_exp, so3_log, so3_right_jacobian_inv

log = logging.getLogger(__name__)

CENTRAL = "central"
QUERY = "query"
ANCHOR_CENTRAL = "anchor-central"
ANCHOR_QUERY = "anchor-query"
SESSION_KINDS = (CENTRAL, QUERY, ANCHOR_CENTRAL, ANCHOR_QUERY)

PRIOR = "prior"
ODOMETRY = "odometry"
INTRA_LOOP = "intra-loop"
INTER_LOOP = "inter-loop"
FACTOR_KINDS = (PRIOR, ODOMETRY, INTRA_LOOP, INTER_LOOP)

NodeId = tuple  # (session kind, index)


class UnderconstrainedError(RuntimeError):
    """The normal equations are singular (e.g. an unanchored node)."""


def pose_minus(a: Pose, b: Pose) -> Pose:
    """``a (-) b = b^-1 a``."""
    return between(b, a)


def _check_spd(cov, name="covariance") -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (6, 6):
        raise ValueError(f"{name} must be 6x6, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ValueError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} is not positive definite") from exc
    return cov


def sqrt_information(cov) -> np.ndarray:
    """Upper-triangular ``S`` with ``S^T S = cov^-1``."""
    info = np.linalg.inv(cov)
    info = 0.5 * (info + info.T)
    return np.linalg.cholesky(info).T


@dataclass
class Factor:
    kind: str
    endpoints: tuple
    measurement: Pose
    covariance: np.ndarray
    robust: bool = False

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        need = {PRIOR: 1, ODOMETRY: 2, INTRA_LOOP: 2, INTER_LOOP: 4}[self.kind]
        if len(self.endpoints) != need:
            raise ValueError(f"{self.kind} factor needs {need} endpoints")
        self.endpoints = tuple(tuple(e) for e in self.endpoints)
        self.covariance = _check_spd(self.covariance)

    def slots(self) -> tuple:
        """Endpoint ids in (anchor A, node A, anchor B, node B) order; None = identity."""
        e = self.endpoints
        if self.kind == PRIOR:
            return (None, e[0], None, None)
        if self.kind == INTER_LOOP:
            x_c, x_q, d_c, d_q = e
            return (d_c, x_c, d_q, x_q)
        return (None, e[0], None, e[1])


@dataclass
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


@dataclass
class OptimizerConfig:
    max_iterations: int = 100
    relative_tolerance: float = 1e-8
    kernel_scale: float = 1.0
    initial_lambda: float = 1e-5
    dense_max_nodes: int = 200


class PoseGraph:
    """Nodes keyed by ``(session kind, index)`` plus a list of factors."""

    def __init__(self):
        self.nodes: dict = {}
        self.factors: list[Factor] = []

    def add_node(self, node_id, pose: Pose):
        kind, idx = node_id
        if kind not in SESSION_KINDS:
            raise ValueError(f"unknown node kind {kind!r}")
        self.nodes[(kind, int(idx))] = pose

    def add_factor(self, factor: Factor) -> Factor:
        for e in factor.endpoints:
            if e not in self.nodes:
                raise KeyError(f"factor references unknown node {e}")
        self.factors.append(factor)
        return factor

    def add_prior(self, node_id, z: Pose, cov, robust=False):
        return self.add_factor(Factor(PRIOR, (node_id,), z, cov, robust))

    def add_odometry(self, a, b, z: Pose, cov):
        return self.add_factor(Factor(ODOMETRY, (a, b), z, cov, False))

    def add_intra_loop(self, a, b, z: Pose, cov, robust=True):
        return self.add_factor(Factor(INTRA_LOOP, (a, b), z, cov, robust))

    def add_inter_loop(self, x_c, x_q, z: Pose, cov, robust=True,
                       anchors=((ANCHOR_CENTRAL, 0), (ANCHOR_QUERY, 0))):
        return self.add_factor(Factor(INTER_LOOP, (x_c, x_q, anchors[0], anchors[1]), z, cov, robust))

    def remove_factors(self, predicate):
        self.factors = [f for f in self.factors if not predicate(f)]

    def copy(self) -> "PoseGraph":
        g = PoseGraph()
        g.nodes = dict(self.nodes)
        g.factors = list(self.factors)
        return g

    def session_poses(self, kind) -> list[Pose]:
        idx = sorted(i for k, i in self.nodes if k == kind)
        return [self.nodes[(kind, i)] for i in idx]

    def residuals(self) -> np.ndarray:
        """Unwhitened 6-vector residual of every factor at the current estimates."""
        lin = _Linearizer(self)
        e, _ = lin.evaluate(lin.R0, lin.t0, jacobians=False)
        return e


def inter_loop_residual(x_Cj: Pose, x_Qk: Pose, delta_C: Pose, delta_Q: Pose, z: Pose) -> np.ndarray:
    """``log(z^-1 * ((delta_C x_Cj) (-) (delta_Q x_Qk)))``."""
    pred = pose_minus(delta_C @ x_Cj, delta_Q @ x_Qk)
    return between(z, pred).log()


def set_anchor_covariances(graph: PoseGraph, cov_central, cov_query,
                           anchors=((ANCHOR_CENTRAL, 0), (ANCHOR_QUERY, 0))):
    """(Re)install anchor priors at the anchors' current estimates."""
    cov_central = _check_spd(cov_central, "central anchor covariance")
    cov_query = _check_spd(cov_query, "query anchor covariance")
    targets = set(anchors)
    graph.remove_factors(lambda f: f.kind == PRIOR and f.endpoints[0] in targets)
    graph.add_prior(anchors[0], graph.nodes[anchors[0]], cov_central)
    graph.add_prior(anchors[1], graph.nodes[anchors[1]], cov_query)


def adjoint(R, t):
    """Batched adjoint for (rotation, translation) tangent order."""
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat(t) @ R
    return out


def _mul(Ra, ta, Rb, tb):
    return Ra @ Rb, (Ra @ tb[..., None])[..., 0] + ta


def _inv(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -(Rt @ t[..., None])[..., 0]


class _Linearizer:
    def __init__(self, graph: PoseGraph):
        self.ids = list(graph.nodes)
        self.index = {nid: i for i, nid in enumerate(self.ids)}
        n = len(self.ids)
        self.n = n
        self.R0 = np.stack([graph.nodes[k].rotation for k in self.ids]) if n else np.zeros((0, 3, 3))
        self.t0 = np.stack([graph.nodes[k].translation for k in self.ids]) if n else np.zeros((0, 3))
        F = len(graph.factors)
        self.slots = np.full((F, 4), -1, dtype=np.int64)
        zR = np.empty((F, 3, 3))
        zt = np.empty((F, 3))
        self.S = np.empty((F, 6, 6))
        self.robust = np.zeros(F, dtype=bool)
        for f_i, f in enumerate(graph.factors):
            for s, nid in enumerate(f.slots()):
                if nid is not None:
                    self.slots[f_i, s] = self.index[nid]
            zR[f_i] = f.measurement.rotation
            zt[f_i] = f.measurement.translation
            self.S[f_i] = sqrt_information(f.covariance)
            self.robust[f_i] = f.robust
        self.zinvR, self.zinvt = _inv(zR, zt)

    def evaluate(self, R, t, jacobians=True):
        n = self.n
        Rp = np.concatenate([R, np.eye(3)[None]])
        tp = np.concatenate([t, np.zeros((1, 3))])
        sl = np.where(self.slots < 0, n, self.slots)
        dAR, dAt = Rp[sl[:, 0]], tp[sl[:, 0]]
        xAR, xAt = Rp[sl[:, 1]], tp[sl[:, 1]]
        dBR, dBt = Rp[sl[:, 2]], tp[sl[:, 2]]
        xBR, xBt = Rp[sl[:, 3]], tp[sl[:, 3]]
        AR, At = _mul(dAR, dAt, xAR, xAt)
        dBiR, dBit = _inv(dBR, dBt)
        M2R, M2t = _mul(dBiR, dBit, AR, At)  # dB^-1 A
        xBiR, xBit = _inv(xBR, xBt)
        PR, Pt = _mul(xBiR, xBit, M2R, M2t)
        ER, Et = _mul(self.zinvR, self.zinvt, PR, Pt)
        phi = so3_log(ER)
        e = np.concatenate([phi, Et], axis=1)
        if not jacobians:
            return e, None
        D = np.zeros((len(e), 6, 6))
        D[:, :3, :3] = so3_right_jacobian_inv(phi)
        D[:, 3:, 3:] = ER
        J = np.empty((4, len(e), 6, 6))
        J[1] = D
        J[0] = D @ adjoint(*_inv(xAR, xAt))
        J[2] = -D @ adjoint(*_inv(AR, At)) @ adjoint(dBR, dBt)
        J[3] = -D @ adjoint(*_inv(M2R, M2t)) @ adjoint(xBR, xBt)
        return e, J


def _retract(R, t, dx):
    dx = dx.reshape(-1, 6)
    Rn = R @ so3_exp(dx[:, :3])
    tn = t + (R @ dx[:, 3:, None])[..., 0]
    return Rn, tn


class _Problem:
    def __init__(self, graph: PoseGraph, cfg: OptimizerConfig):
        self.lin = _Linearizer(graph)
        self.cfg = cfg
        self.c2 = cfg.kernel_scale**2

    def cost_terms(self, e):
        r = (self.lin.S @ e[..., None])[..., 0]
        s = np.sum(r * r, axis=1)
        rho = np.where(self.lin.robust, self.c2 * np.log1p(s / self.c2), s)
        w = np.where(self.lin.robust, 1.0 / (1.0 + s / self.c2), 1.0)
        return r, rho, w

    def cost(self, R, t) -> float:
        e, _ = self.lin.evaluate(R, t, jacobians=False)
        return float(self.cost_terms(e)[1].sum())

    def normal_equations(self, R, t):
        lin = self.lin
        e, J = lin.evaluate(R, t)
        r, rho, w = self.cost_terms(e)
        Jw = lin.S[None] @ J  # whitened
        dim = 6 * lin.n
        g = np.zeros(dim)
        rows, cols, vals = [], [], []
        ar6 = np.arange(6)
        for p in range(4):
            mp = lin.slots[:, p] >= 0
            if not mp.any():
                continue
            vp = lin.slots[mp, p]
            gp = np.einsum("fki,fk->fi", Jw[p, mp], w[mp, None] * r[mp])
            np.add.at(g, (6 * vp[:, None] + ar6).ravel(), gp.ravel())
            for q in range(4):
                m = mp & (lin.slots[:, q] >= 0)
                if not m.any():
                    continue
                blk = np.einsum("fki,fkj->fij", Jw[p, m] * w[m, None, None], Jw[q, m])
                ri = 6 * lin.slots[m, p][:, None, None] + ar6[None, :, None]
                ci = 6 * lin.slots[m, q][:, None, None] + ar6[None, None, :]
                rows.append(np.broadcast_to(ri, blk.shape).ravel())
                cols.append(np.broadcast_to(ci, blk.shape).ravel())
                vals.append(blk.ravel())
        if rows:
            H = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
            ).tocsc()
        else:
            H = sp.csc_matrix((dim, dim))
        return H, g, float(rho.sum())

    def solve(self, H, g, lam):
        diag = H.diagonal()
        A = H + sp.diags(lam * diag + 1e-12 * max(diag.max(initial=0.0), 1.0))
        if self.lin.n <= self.cfg.dense_max_nodes:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A.toarray()), -g)
        return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(-g)


def _check_constrained(graph: PoseGraph, H) -> None:
    # structural: every node must reach a prior through factor connectivity
    parent = {nid: nid for nid in graph.nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    GROUND = ("__ground__", 0)
    parent[GROUND] = GROUND
    for f in graph.factors:
        ends = list(f.endpoints) + ([GROUND] if f.kind == PRIOR else [])
        root = find(ends[0])
        for e in ends[1:]:
            parent[find(e)] = root
    g_root = find(GROUND)
    loose = [nid for nid in graph.nodes if find(nid) != g_root]
    if loose:
        raise UnderconstrainedError(f"{len(loose)} node(s) not tied to any prior, e.g. {loose[0]}")
    # numeric: undamped system must be non-singular
    diag = np.abs(H.diagonal())
    if diag.size and diag.min() <= 1e-14 * diag.max():
        raise UnderconstrainedError("normal equations have an empty diagonal entry")
    try:
        lu = spla.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise UnderconstrainedError(f"singular normal equations: {exc}") from exc
    u = np.abs(lu.U.diagonal())
    if u.min() <= 1e-14 * u.max():
        raise UnderconstrainedError("singular normal equations")


def optimize(graph: PoseGraph, config: OptimizerConfig | None = None) -> OptimizationReport:
    """Levenberg-Marquardt on the robustified cost; updates ``graph.nodes`` in place."""
    cfg = config or OptimizerConfig()
    if not graph.factors:
        raise UnderconstrainedError("graph has no factors")
    prob = _Problem(graph, cfg)
    R, t = prob.lin.R0.copy(), prob.lin.t0.copy()
    H, g, cost = prob.normal_equations(R, t)
    _check_constrained(graph, H)
    initial = cost
    lam = cfg.initial_lambda
    converged = False
    it = 0
    while it < cfg.max_iterations:
        it += 1
        if cost <= 1e-30:
            converged = True
            break
        try:
            dx = prob.solve(H, g, lam)
        except (np.linalg.LinAlgError, RuntimeError):
            lam *= 10.0
            continue
        Rn, tn = _retract(R, t, dx)
        new_cost = prob.cost(Rn, tn)
        if np.isfinite(new_cost) and new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            R, t, cost = Rn, tn, new_cost
            lam = max(lam / 10.0, 1e-12)
            if rel < cfg.relative_tolerance:
                converged = True
                break
            H, g, _ = prob.normal_equations(R, t)
        else:
            lam *= 10.0
            if lam > 1e10:
                # no descent direction left at this point
                converged = True
                break
    for k, nid in enumerate(prob.lin.ids):
        graph.nodes[nid] = Pose(R[k], t[k])
    log.debug("LM: cost %.6g -> %.6g in %d iterations", initial, cost, it)
    return OptimizationReport(initial, cost, it, converged)


def factor_jacobians(graph: PoseGraph):
    """Residuals and analytic Jacobians (unwhitened) for every factor.

    Returns ``(e, J)`` with ``J[s, f]`` the 6x6 Jacobian of factor ``f``
    with respect to slot ``s`` (anchor A, node A, anchor B, node B), and the
    slot-to-node map.
    """
    lin = _Linearizer(graph)
    e, J = lin.evaluate(lin.R0, lin.t0)
    slot_ids = [[lin.ids[i] if i >= 0 else None for i in row] for row in lin.slots]
    return e, J, slot_ids


def retract(pose: Pose, dx) -> Pose:
    """The retraction used by the optimizer."""
    Rn, tn = _retract(pose.rotation[None], pose.translation[None], np.asarray(dx, dtype=float))
    return Pose(Rn[0], tn[0])


# --------------------------------------------------------------------------
# text serialization

def _fmt(x) -> str:
    return format(float(x), ".17g")


def _node_token(nid) -> str:
    return f"{nid[0]}:{nid[1]}"


def _parse_node_token(tok: str):
    kind, _, idx = tok.rpartition(":")
    if kind not in SESSION_KINDS:
        raise ValueError(f"bad node id {tok!r}")
    return (kind, int(idx))


def _pose_tokens(p: Pose) -> list[str]:
    return [_fmt(v) for v in p.as_quaternion()] + [_fmt(v) for v in p.translation]


def graph_to_text(graph: PoseGraph) -> str:
    """One node or factor per line.

    ``NODE <kind> <index> qx qy qz qw tx ty tz``
    ``FACTOR <kind> <robust 0|1> <n> <kind:index>... qx qy qz qw tx ty tz <21 cov>``
    Covariance entries are the row-major upper triangle.
    """
    iu = np.triu_indices(6)
    lines = ["# mapmerge pose graph v1"]
    for nid, pose in graph.nodes.items():
        lines.append(" ".join(["NODE", nid[0], str(nid[1])] + _pose_tokens(pose)))
    for f in graph.factors:
        toks = ["FACTOR", f.kind, str(int(f.robust)), str(len(f.endpoints))]
        toks += [_node_token(e) for e in f.endpoints]
        toks += _pose_tokens(f.measurement)
        toks += [_fmt(v) for v in f.covariance[iu]]
        lines.append(" ".join(toks))
    return "\n".join(lines) + "\n"


def _pose_from_tokens(toks) -> Pose:
    vals = [float(v) for v in toks]
    return Pose.from_quaternion(vals[:4], vals[4:7])


def graph_from_text(text: str) -> PoseGraph:
    g = PoseGraph()
    iu = np.triu_indices(6)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        try:
            if toks[0] == "NODE":
                g.add_node((toks[1], int(toks[2])), _pose_from_tokens(toks[3:10]))
            elif toks[0] == "FACTOR":
                kind, robust, n = toks[1], bool(int(toks[2])), int(toks[3])
                ends = tuple(_parse_node_token(t) for t in toks[4:4 + n])
                rest = toks[4 + n:]
                if len(rest) != 7 + 21:
                    raise ValueError("expected 7 pose values and 21 covariance entries")
                cov = np.zeros((6, 6))
                cov[iu] = [float(v) for v in rest[7:]]
                cov = cov + np.triu(cov, 1).T
                g.add_factor(Factor(kind, ends, _pose_from_tokens(rest[:7]), cov, robust))
            else:
                raise ValueError(f"unknown record {toks[0]!r}")
        except (ValueError, IndexError, KeyError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return g
