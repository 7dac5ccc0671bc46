"""SE(2) pose graph: construction from tracks and loops, Levenberg-Marquardt
optimisation, and g2o text import/export."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .core import IDENTITY, Fingerprint, NodeId, Pose2, Transform2, between, normalize_angle, normalize_angles
from .fingerprint import LoopCandidate, similarity
from .pdr import odometry_edges
from .varmodel import VarianceModel

log = logging.getLogger(__name__)


class EdgeKind(str, Enum):
    ODOMETRY = "odometry"
    MERGE = "merge"
    FINGERPRINT_LOOP = "fingerprint_loop"
    TURNING_LOOP = "turning_loop"


@dataclass
class Edge:
    frm: NodeId
    to: NodeId
    kind: EdgeKind
    measurement: Transform2
    information: np.ndarray

    def __post_init__(self) -> None:
        info = np.asarray(self.information, dtype=float)
        if info.shape != (3, 3):
            raise ValueError("information matrix must be 3x3")
        if not np.allclose(info, info.T, rtol=0, atol=1e-12) or np.any(np.diag(info) < 0):
            raise ValueError("information matrix must be symmetric with non-negative diagonal")
        self.information = info


def information_from_variances(vx: float, vy: float, vth: float) -> np.ndarray:
    return np.diag([1.0 / vx, 1.0 / vy, 1.0 / vth])


@dataclass
class EdgeCovariancePolicy:
    variance_model: VarianceModel
    turning_xy_variance: float = 5.0
    orientation_variance: float = 1000.0
    odometry_sigma_xy: float = 0.05
    odometry_sigma_theta: float = 0.02

    def __post_init__(self) -> None:
        top = self.variance_model.query(1.0)
        if not self.turning_xy_variance < top:
            # turning loops are meant to be the tighter constraint
            raise ValueError(
                f"turning-loop xy variance {self.turning_xy_variance:g} must be below "
                f"the fingerprint variance at similarity 1 ({top:g})"
            )

    def odometry_information(self) -> np.ndarray:
        v = self.odometry_sigma_xy**2
        return information_from_variances(v, v, self.odometry_sigma_theta**2)

    def fingerprint_information(self, s: float) -> np.ndarray:
        v = self.variance_model.query(s)
        return information_from_variances(v, v, self.orientation_variance)

    def turning_information(self) -> np.ndarray:
        v = self.turning_xy_variance
        return information_from_variances(v, v, self.orientation_variance)


@dataclass
class PoseGraph:
    nodes: dict[NodeId, Pose2] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    anchor: NodeId | None = None

    def add_edge(self, e: Edge) -> None:
        for n in (e.frm, e.to):
            if n not in self.nodes:
                raise KeyError(f"edge references unknown node {n}")
        self.edges.append(e)

    def copy(self) -> PoseGraph:
        return PoseGraph(dict(self.nodes), list(self.edges), self.anchor)

    def count(self, kind: EdgeKind) -> int:
        return sum(1 for e in self.edges if e.kind == kind)

    def components(self) -> tuple[int, dict[NodeId, int]]:
        order = list(self.nodes)
        index = {n: k for k, n in enumerate(order)}
        i = [index[e.frm] for e in self.edges]
        j = [index[e.to] for e in self.edges]
        adj = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(len(order), len(order)))
        ncomp, labels = connected_components(adj, directed=False)
        return ncomp, {n: int(labels[k]) for n, k in index.items()}

    def unreached(self) -> list[NodeId]:
        """Nodes not connected to the anchor."""
        if self.anchor is None or not self.nodes:
            return list(self.nodes)
        _, label = self.components()
        home = label[self.anchor]
        return [n for n, c in label.items() if c != home]


class GraphError(RuntimeError):
    pass


def merge_tracks(
    tracks: Mapping[int, Sequence[Pose2]],
    policy: EdgeCovariancePolicy,
    start_fingerprints: Mapping[int, Fingerprint] | None = None,
    rss_offset: float = 100.0,
) -> PoseGraph:
    """Nodes at raw odometric poses, per-track odometry edges, and merge edges
    tying the first node of every track to the first node of the lowest user.

    When ``start_fingerprints`` is given, a track is only merged if its first
    scan overlaps the base track's first scan.
    """
    if not tracks:
        raise ValueError("no tracks to merge")
    users = sorted(tracks)
    g = PoseGraph()
    for u in users:
        for t, p in enumerate(tracks[u]):
            g.nodes[NodeId(u, t)] = p
    g.anchor = NodeId(users[0], 0)
    odo_info = policy.odometry_information()
    for u in users:
        if len(tracks[u]) >= 2:
            for (a, b), z in odometry_edges(tracks[u], u):
                g.edges.append(Edge(a, b, EdgeKind.ODOMETRY, z, odo_info))
    base = users[0]
    for u in users[1:]:
        if start_fingerprints is None:
            s = 0.0
        else:
            # with scans available, a shared start needs overlapping first scans
            fa, fb = start_fingerprints.get(base), start_fingerprints.get(u)
            s = similarity(fa, fb, rss_offset) if fa is not None and fb is not None else 0.0
            if s <= 0.0:
                continue
        g.edges.append(
            Edge(NodeId(base, 0), NodeId(u, 0), EdgeKind.MERGE, IDENTITY, policy.fingerprint_information(s))
        )
    return g


def add_loop_edges(
    g: PoseGraph,
    turning_loops: Iterable[LoopCandidate],
    fingerprint_loops: Iterable[LoopCandidate],
    policy: EdgeCovariancePolicy,
) -> PoseGraph:
    out = g.copy()
    t_info = policy.turning_information()
    for c in turning_loops:
        out.add_edge(Edge(c.a, c.b, EdgeKind.TURNING_LOOP, IDENTITY, t_info))
    for c in fingerprint_loops:
        out.add_edge(Edge(c.a, c.b, EdgeKind.FINGERPRINT_LOOP, IDENTITY, policy.fingerprint_information(c.similarity)))
    return out


def residual(e: Edge, xi: Pose2, xj: Pose2) -> np.ndarray:
    """Measurement minus prediction, heading component wrapped."""
    zh = between(xi, xj)
    z = e.measurement
    return np.array([z.dx - zh.dx, z.dy - zh.dy, normalize_angle(z.dtheta - zh.dtheta)])


# ---------------------------------------------------------------------------
# vectorised residuals / Jacobians over all edges


@dataclass
class _EdgeArrays:
    i: np.ndarray
    j: np.ndarray
    z: np.ndarray  # (E, 3)
    info: np.ndarray  # (E, 3, 3)


def _edge_arrays(g: PoseGraph, index: Mapping[NodeId, int]) -> _EdgeArrays:
    m = len(g.edges)
    i = np.fromiter((index[e.frm] for e in g.edges), dtype=np.int64, count=m)
    j = np.fromiter((index[e.to] for e in g.edges), dtype=np.int64, count=m)
    z = np.array([[e.measurement.dx, e.measurement.dy, e.measurement.dtheta] for e in g.edges]).reshape(m, 3)
    info = np.array([e.information for e in g.edges]).reshape(m, 3, 3)
    return _EdgeArrays(i, j, z, info)


def residuals_and_jacobians(x: np.ndarray, ea: _EdgeArrays, with_jacobians: bool = True):
    """Residuals r (E,3) and, optionally, dr/dxi and dr/dxj (E,3,3)."""
    xi, xj = x[ea.i], x[ea.j]
    c, s = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
    pred = np.column_stack([c * dx + s * dy, -s * dx + c * dy, xj[:, 2] - xi[:, 2]])
    r = ea.z - pred
    r[:, 2] = normalize_angles(r[:, 2])
    if not with_jacobians:
        return r, None, None
    m = len(r)
    # d pred / d xi
    Ji = np.zeros((m, 3, 3))
    Ji[:, 0, 0], Ji[:, 0, 1], Ji[:, 0, 2] = -c, -s, -s * dx + c * dy
    Ji[:, 1, 0], Ji[:, 1, 1], Ji[:, 1, 2] = s, -c, -c * dx - s * dy
    Ji[:, 2, 2] = -1.0
    Jj = np.zeros((m, 3, 3))
    Jj[:, 0, 0], Jj[:, 0, 1] = c, s
    Jj[:, 1, 0], Jj[:, 1, 1] = -s, c
    Jj[:, 2, 2] = 1.0
    # residual = z - pred
    return r, -Ji, -Jj


def chi2(x: np.ndarray, ea: _EdgeArrays) -> float:
    r, _, _ = residuals_and_jacobians(x, ea, with_jacobians=False)
    return float(np.einsum("ei,eij,ej->", r, ea.info, r))


def _normal_equations(x: np.ndarray, ea: _EdgeArrays, var_of: np.ndarray, nvar: int):
    """H = J^T W J (sparse) and g = J^T W r over the free variables."""
    r, Ji, Jj = residuals_and_jacobians(x, ea)
    WJi = np.einsum("eab,ebc->eac", ea.info, Ji)
    WJj = np.einsum("eab,ebc->eac", ea.info, Jj)
    Wr = np.einsum("eab,eb->ea", ea.info, r)
    blocks = {
        ("i", "i"): np.einsum("eba,ebc->eac", Ji, WJi),
        ("i", "j"): np.einsum("eba,ebc->eac", Ji, WJj),
        ("j", "i"): np.einsum("eba,ebc->eac", Jj, WJi),
        ("j", "j"): np.einsum("eba,ebc->eac", Jj, WJj),
    }
    node = {"i": ea.i, "j": ea.j}
    rows, cols, vals = [], [], []
    a3 = np.arange(3)
    for (p, q), blk in blocks.items():
        bp, bq = var_of[node[p]], var_of[node[q]]
        keep = (bp >= 0) & (bq >= 0)
        vr = np.broadcast_to(bp[keep][:, None, None] + a3[None, :, None], (int(keep.sum()), 3, 3))
        vc = np.broadcast_to(bq[keep][:, None, None] + a3[None, None, :], (int(keep.sum()), 3, 3))
        rows.append(vr.ravel())
        cols.append(vc.ravel())
        vals.append(blk[keep].ravel())
    H = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nvar, nvar)
    ).tocsc()
    H.sum_duplicates()
    g = np.zeros(nvar)
    for p, J in (("i", Ji), ("j", Jj)):
        gv = np.einsum("eba,eb->ea", J, Wr)
        base = var_of[node[p]]
        keep = base >= 0
        np.add.at(g, (base[keep][:, None] + a3[None, :]).ravel(), gv[keep].ravel())
    return H, g


def _polish(x, ea, var_of, nvar, free_idx, current, trace, steps):
    """Gauss-Newton steps kept while each halves the gradient and chi^2 holds to round-off.

    Near the optimum chi^2 changes fall below its floating-point resolution,
    but the gradient still resolves the remaining error.
    """
    H, grad = _normal_equations(x, ea, var_of, nvar)
    norm = float(np.abs(grad).max())
    for _ in range(steps):
        if norm == 0.0:
            break
        try:
            delta = splu(H.tocsc()).solve(-grad)
        except RuntimeError:
            break
        if not np.all(np.isfinite(delta)):
            break
        cand = x.copy()
        cand[free_idx] += delta.reshape(-1, 3)
        cand[:, 2] = normalize_angles(cand[:, 2])
        new = chi2(cand, ea)
        if new > current * (1.0 + 1e-12):
            break
        H_new, grad_new = _normal_equations(cand, ea, var_of, nvar)
        norm_new = float(np.abs(grad_new).max())
        if not norm_new <= 0.5 * norm:
            break
        x, H, grad, norm = cand, H_new, grad_new, norm_new
        if new < current:
            current = new
            trace.append(new)
    return x, current


@dataclass
class OptimizeReport:
    chi2_trace: list[float]
    iterations: int
    accepted: int
    final_lambda: float
    converged: bool


def optimize(
    g: PoseGraph,
    max_iterations: int = 100,
    chi2_tolerance: float = 1e-9,
    lambda0: float = 1e-4,
    lambda_up: float = 4.0,
    lambda_down: float = 2.0,
    lambda_max: float = 1e12,
    report: dict | None = None,
    polish_steps: int = 50,
) -> tuple[PoseGraph, list[float]]:
    """Minimise the information-weighted squared residuals over all nodes but the anchor.

    Returns the optimised graph and chi^2 after the initial state and after
    every accepted step. ``report``, when given, receives iteration counts.
    After convergence up to ``polish_steps`` undamped steps refine the
    solution below the resolution of chi^2 itself.
    """
    if g.anchor is None or g.anchor not in g.nodes:
        raise GraphError("graph has no anchor node")
    missing = g.unreached()
    if missing:
        users = sorted({n.user for n in missing})
        raise GraphError(f"graph is disconnected: track(s) {users} not reachable from anchor {tuple(g.anchor)}")

    order = list(g.nodes)
    index = {n: k for k, n in enumerate(order)}
    x = np.array([[p.x, p.y, p.theta] for p in (g.nodes[n] for n in order)], dtype=float).reshape(-1, 3)
    anchor = index[g.anchor]
    var_of = np.full(len(order), -1, dtype=np.int64)
    free = [k for k in range(len(order)) if k != anchor]
    var_of[free] = 3 * np.arange(len(free))
    nvar = 3 * len(free)

    result = g.copy()
    if not g.edges or nvar == 0:
        if report is not None:
            report.update(iterations=0, accepted=0, final_lambda=lambda0, converged=True)
        return result, [0.0] if not g.edges else [chi2(x, _edge_arrays(g, index))]

    ea = _edge_arrays(g, index)
    current = chi2(x, ea)
    trace = [current]
    lam = lambda0
    iterations = accepted = 0
    converged = current == 0.0
    free_idx = np.array(free, dtype=np.int64)

    while not converged and iterations < max_iterations:
        iterations += 1
        H, grad = _normal_equations(x, ea, var_of, nvar)
        diag = H.diagonal()
        diag = np.where(diag > 0, diag, 1.0)
        improved = False
        while True:
            A = (H + sp.diags(lam * diag, format="csc")).tocsc()
            try:
                delta = splu(A).solve(-grad)
                ok = np.all(np.isfinite(delta))
            except RuntimeError:
                ok = False
            if not ok:
                if lam >= lambda_max:
                    raise GraphError(f"normal equations could not be solved at iteration {iterations} (lambda={lam:g})")
                lam = min(lam * lambda_up, lambda_max)
                continue
            cand = x.copy()
            cand[free_idx] += delta.reshape(-1, 3)
            cand[:, 2] = normalize_angles(cand[:, 2])
            new = chi2(cand, ea)
            if new < current:
                x = cand
                rel = (current - new) / current
                current = new
                trace.append(new)
                accepted += 1
                lam = max(lam / lambda_down, 1e-12)
                improved = True
                converged = rel < chi2_tolerance or new == 0.0
                break
            if lam >= lambda_max:
                break
            lam = min(lam * lambda_up, lambda_max)
        if not improved:
            converged = True
            break

    if converged and polish_steps:
        x, current = _polish(x, ea, var_of, nvar, free_idx, current, trace, polish_steps)

    for n, k in index.items():
        if k != anchor:
            result.nodes[n] = Pose2.from_array(x[k])
    log.debug("LM: %d iterations, %d accepted, chi2 %.6g -> %.6g", iterations, accepted, trace[0], trace[-1])
    if report is not None:
        report.update(iterations=iterations, accepted=accepted, final_lambda=lam, converged=converged)
    return result, trace


# ---------------------------------------------------------------------------
# g2o text format

_ID_STRIDE = 1_000_000


def g2o_id(n: NodeId) -> int:
    return n.user * _ID_STRIDE + n.step


def node_from_g2o_id(k: int) -> NodeId:
    return NodeId(k // _ID_STRIDE, k % _ID_STRIDE)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_g2o(g: PoseGraph, out: TextIO) -> None:
    for n in sorted(g.nodes):
        p = g.nodes[n]
        out.write(f"VERTEX_SE2 {g2o_id(n)} {_fmt(p.x)} {_fmt(p.y)} {_fmt(p.theta)}\n")
    if g.anchor is not None:
        out.write(f"FIX {g2o_id(g.anchor)}\n")
    for e in g.edges:
        z, w = e.measurement, e.information
        upper = [w[0, 0], w[0, 1], w[0, 2], w[1, 1], w[1, 2], w[2, 2]]
        out.write(
            f"EDGE_SE2 {g2o_id(e.frm)} {g2o_id(e.to)} {_fmt(z.dx)} {_fmt(z.dy)} {_fmt(z.dtheta)} "
            + " ".join(_fmt(v) for v in upper)
            + "\n"
        )


def dumps_g2o(g: PoseGraph) -> str:
    buf = io.StringIO()
    write_g2o(g, buf)
    return buf.getvalue()


def _infer_kind(a: NodeId, b: NodeId, info: np.ndarray, turning_info: float) -> EdgeKind:
    if a.user == b.user and b.step == a.step + 1:
        return EdgeKind.ODOMETRY
    if a.step == 0 and b.step == 0 and a.user != b.user:
        return EdgeKind.MERGE
    if math.isclose(info[0, 0], turning_info):
        return EdgeKind.TURNING_LOOP
    return EdgeKind.FINGERPRINT_LOOP


def read_g2o(text: str, turning_xy_variance: float = 5.0) -> PoseGraph:
    """Parse VERTEX_SE2 / EDGE_SE2 / FIX lines; edge kinds are inferred from ids."""
    g = PoseGraph()
    fixed = None
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "VERTEX_SE2":
                g.nodes[node_from_g2o_id(int(parts[1]))] = Pose2(*map(float, parts[2:5]))
            elif tag == "FIX":
                fixed = node_from_g2o_id(int(parts[1]))
            elif tag == "EDGE_SE2":
                a, b = node_from_g2o_id(int(parts[1])), node_from_g2o_id(int(parts[2]))
                dx, dy, dth = map(float, parts[3:6])
                u = list(map(float, parts[6:12]))
                info = np.array([[u[0], u[1], u[2]], [u[1], u[3], u[4]], [u[2], u[4], u[5]]])
                kind = _infer_kind(a, b, info, 1.0 / turning_xy_variance)
                g.add_edge(Edge(a, b, kind, Transform2(dx, dy, dth), info))
        except (ValueError, IndexError, KeyError) as exc:
            raise ValueError(f"g2o line {lineno}: {exc}") from exc
    g.anchor = fixed if fixed is not None else (min(g.nodes) if g.nodes else None)
    return g
