"""Pose graphs with dead-reckoning and loop-closure edges, their corruption,
Levenberg-Marquardt optimisation and the two trajectory/map metrics.

Nodes are planar poses ``(x, y, yaw)`` with a fixed depth; node 0 is the
gauge anchor.  Dead-reckoning (DR) edges are SE(2) relative poses between
consecutive nodes.  Loop-closure (LC) edges constrain the world-frame xy
offset between two nodes with a 2x2 covariance Q.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import cloud, geom
from .geom import PlanarShift
from .mccov import PerturbationPrior, _rng
from .register import GicpConfig, GicpTarget, NoCorrespondences, gicp_register_xy, naive_information_xy

log = logging.getLogger(__name__)

JITTER = 1e-9
DEFAULT_DR_SIGMA = (0.1, 0.1, 0.1)


class SingularSystem(np.linalg.LinAlgError):
    pass


class LengthMismatch(ValueError):
    pass


class NoOverlap(ValueError):
    pass


class GraphFormatError(ValueError):
    pass


def wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def rot2(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def pose_xyyaw(t: geom.RigidTransform) -> np.ndarray:
    return np.array([t.translation[0], t.translation[1], t.yaw])


def se2_relative(a, b) -> np.ndarray:
    """Pose of ``b`` expressed in the frame of ``a`` (both ``(x, y, yaw)``)."""
    d = rot2(a[2]).T @ (np.asarray(b[:2]) - a[:2])
    return np.array([d[0], d[1], wrap(b[2] - a[2])])


def se2_compose(a, rel) -> np.ndarray:
    p = np.asarray(a[:2]) + rot2(a[2]) @ rel[:2]
    return np.array([p[0], p[1], wrap(a[2] + rel[2])])


@dataclass
class DrEdge:
    i: int
    j: int
    rel: np.ndarray
    info: np.ndarray


@dataclass
class LcEdge:
    i: int
    j: int
    z: PlanarShift
    q: np.ndarray
    candidate: int = -1


@dataclass
class PoseGraph:
    nodes: np.ndarray
    z: np.ndarray
    dr_edges: list = field(default_factory=list)
    lc_edges: list = field(default_factory=list)
    anchor: int = 0

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        self.z = np.array(self.z, dtype=float).reshape(-1)
        if len(self.z) != len(self.nodes):
            raise ValueError("one depth per node required")

    def __len__(self):
        return len(self.nodes)

    def copy(self) -> "PoseGraph":
        return PoseGraph(self.nodes.copy(), self.z.copy(),
                         [DrEdge(e.i, e.j, e.rel.copy(), e.info.copy()) for e in self.dr_edges],
                         [LcEdge(e.i, e.j, e.z, e.q.copy(), e.candidate) for e in self.lc_edges],
                         self.anchor)

    def with_lc_covariances(self, qs: dict) -> "PoseGraph":
        """Copy whose LC edges take Q from ``qs[candidate id]``."""
        g = self.copy()
        for e in g.lc_edges:
            e.q = np.asarray(qs[e.candidate], dtype=float)
        return g

    def transforms(self):
        return [geom.from_xy_yaw(n[0], n[1], n[2], z) for n, z in zip(self.nodes, self.z)]

    def positions(self) -> np.ndarray:
        return np.column_stack([self.nodes[:, :2], self.z])


@dataclass
class CorruptionConfig:
    r_c: np.ndarray = field(default_factory=lambda: np.diag([0, 0, 0, 0, 0, 0.01]))
    seed: int = 0

    def __post_init__(self):
        self.r_c = np.asarray(self.r_c, dtype=float).reshape(6, 6)
        if np.linalg.eigvalsh(0.5 * (self.r_c + self.r_c.T)).min() < -1e-12:
            raise ValueError("R_c must be positive semi-definite")

    @property
    def planar(self) -> np.ndarray:
        """The (x, y, yaw) block; z, roll and pitch cannot move planar nodes."""
        ix = [0, 1, 5]
        return self.r_c[np.ix_(ix, ix)]


@dataclass
class LcPolicy:
    coverage: float = 0.6
    prior: PerturbationPrior = field(default_factory=PerturbationPrior)

    def __post_init__(self):
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError("coverage threshold must be in (0, 1]")


# -- loop-closure detection ----------------------------------------------------

def footprint(points):
    """Convex xy hull of a cloud, or None when the cloud is degenerate."""
    xy = np.asarray(points)[:, :2]
    try:
        return ConvexHull(xy)
    except (QhullError, ValueError):
        return None


def overlap(candidate_points, hull, tol: float = 1e-9) -> float:
    """Fraction of candidate points whose xy lies inside ``hull``."""
    if hull is None or len(candidate_points) == 0:
        return 0.0
    eq = hull.equations
    xy = np.asarray(candidate_points)[:, :2]
    inside = (xy @ eq[:, :2].T + eq[:, 2] <= tol).all(axis=1)
    return float(inside.mean())


def detect_lc(candidate: cloud.Submap, prior_submaps, policy: LcPolicy | None = None, hulls=None) -> list:
    """Ids of the priors whose footprint holds at least ``coverage`` of the candidate."""
    policy = policy or LcPolicy()
    out = []
    for k, s in enumerate(prior_submaps):
        hull = hulls[k] if hulls is not None else footprint(s.points)
        if overlap(candidate.points, hull) >= policy.coverage:
            out.append(s.id)
    return out


# -- graph construction ---------------------------------------------------------

def corrupt_trajectory(nodes, cfg: CorruptionConfig) -> np.ndarray:
    """Random walk of per-step planar noise integrated along the chain.

    Step ``k`` (node k-1 to k) is perturbed in the frame of node k-1; node 0
    stays put.  Yaw noise therefore bends every later segment.
    """
    nodes = np.asarray(nodes, dtype=float)
    cov = cfg.planar
    out = nodes.copy()
    if not np.any(cov):
        return out
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    root = v * np.sqrt(np.clip(w, 0, None))
    for k in range(1, len(nodes)):
        eps = root @ rng.standard_normal(3)
        # the yaw error rotates this step and accumulates into the heading
        heading_err = wrap(out[k - 1, 2] - nodes[k - 1, 2] + eps[2])
        step = rot2(heading_err) @ (nodes[k, :2] - nodes[k - 1, :2]) + rot2(out[k - 1, 2]) @ eps[:2]
        out[k, :2] = out[k - 1, :2] + step
        out[k, 2] = wrap(nodes[k, 2] + heading_err)
    return out


def dr_information(sigma=DEFAULT_DR_SIGMA) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    if np.any(s <= 0):
        raise ValueError("DR sigmas must be positive")
    return np.diag(1.0 / s**2)


@dataclass
class LcRecord:
    candidate: int
    matched: list
    perturbation: np.ndarray
    estimate: np.ndarray
    correction: np.ndarray
    naive_q: np.ndarray | None
    converged: bool


@dataclass
class BuiltGraph:
    graph: PoseGraph
    gt_nodes: np.ndarray
    lc: list
    dropped: list


def build_corrupted_graph(submaps, poses, policy: LcPolicy | None = None, gicp: GicpConfig | None = None,
                          corruption: CorruptionConfig | None = None,
                          dr_sigma=DEFAULT_DR_SIGMA, seed: int = 0) -> BuiltGraph:
    """Chain DR edges, detect and register loop closures, then corrupt.

    Each detected candidate is shifted by a draw from the perturbation prior
    and registered onto the concatenation of its matched priors (as corrected
    so far).  The corrected candidate replaces the original for later
    detections.  The LC measurement between the candidate ``i`` and a matched
    prior ``a`` is the offset of their corrected positions.  Finally the
    node poses are corrupted and DR edges re-read from the corrupted chain.
    Every LC edge carries Q = 9 I until :meth:`PoseGraph.with_lc_covariances`.
    """
    policy = policy or LcPolicy()
    gicp = gicp or GicpConfig()
    corruption = corruption or CorruptionConfig(seed=seed)
    if len(submaps) < 2:
        raise ValueError("need at least two submaps")
    gt = np.array([pose_xyyaw(p) for p in poses])
    zs = np.array([p.translation[2] for p in poses])
    by_id = {s.id: k for k, s in enumerate(submaps)}
    graph_maps, hulls, offsets = [], [], {}
    lc_edges, records, dropped = [], [], []
    for k, s in enumerate(submaps):
        matched = []
        if k > 0:
            # the previous node is already tied in by its DR edge
            matched = detect_lc(s, graph_maps[:-1], policy, hulls[:-1])
        if matched:
            rng = _rng(seed, s.id, 0)
            shift = rng.multivariate_normal(np.zeros(2), policy.prior.sigma)
            src = s.shifted(*shift)
            fused = np.concatenate([graph_maps[by_id[m]].points for m in matched])
            target = cloud.Submap(-1, fused)
            try:
                res = gicp_register_xy(src, target, cfg=gicp, target_ctx=GicpTarget(fused, gicp))
                naive = naive_information_xy(src, target, res.shift, gicp).covariance
            except (NoCorrespondences, ValueError) as exc:
                dropped.append((s.id, str(exc)))
                graph_maps.append(s)
                hulls.append(footprint(s.points))
                continue
            corr = shift + res.shift.as_array()
            offsets[s.id] = corr
            fixed = s.shifted(*corr)
            graph_maps.append(fixed)
            hulls.append(footprint(fixed.points))
            records.append(LcRecord(s.id, matched, shift, res.shift.as_array(), corr, naive, res.converged))
            for m in matched:
                a = by_id[m]
                zab = (gt[k, :2] + corr) - (gt[a, :2] + offsets.get(m, np.zeros(2)))
                lc_edges.append(LcEdge(a, k, PlanarShift(*zab), policy.prior.sigma.copy(), s.id))
        else:
            graph_maps.append(s)
            hulls.append(footprint(s.points))
    nodes = corrupt_trajectory(gt, corruption)
    info = dr_information(dr_sigma)
    dr = [DrEdge(k - 1, k, se2_relative(nodes[k - 1], nodes[k]), info.copy()) for k in range(1, len(nodes))]
    return BuiltGraph(PoseGraph(nodes, zs, dr, lc_edges), gt, records, dropped)


# -- optimisation ---------------------------------------------------------------

@dataclass
class OptimizeReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


def _sqrt_info(m):
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + m.T)
    try:
        return np.linalg.cholesky(m).T
    except np.linalg.LinAlgError:
        return np.linalg.cholesky(m + JITTER * np.eye(len(m))).T


def _lc_sqrt_info(q):
    q = 0.5 * (np.asarray(q, dtype=float) + np.asarray(q, dtype=float).T)
    try:
        np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        q = q + JITTER * np.eye(2)
    return _sqrt_info(np.linalg.inv(q))


class _Problem:
    def __init__(self, g: PoseGraph):
        self.g = g
        self.n = len(g)
        self.dr_w = [_sqrt_info(e.info) for e in g.dr_edges]
        self.lc_w = [_lc_sqrt_info(e.q) for e in g.lc_edges]
        self.free = [k for k in range(self.n) if k != g.anchor]
        self.col = {k: 3 * c for c, k in enumerate(self.free)}
        self.m = 3 * len(g.dr_edges) + 2 * len(g.lc_edges)

    def residuals(self, x, jac=True):
        g = self.g
        r = np.empty(self.m)
        jm = np.zeros((self.m, 3 * len(self.free))) if jac else None
        row = 0
        for e, w in zip(g.dr_edges, self.dr_w):
            a, b = x[e.i], x[e.j]
            ra = rot2(a[2])
            dp = b[:2] - a[:2]
            pred = np.array([*(ra.T @ dp), wrap(b[2] - a[2])])
            res = pred - e.rel
            res[2] = wrap(res[2])
            r[row:row + 3] = w @ res
            if jac:
                ja = np.zeros((3, 3))
                jb = np.zeros((3, 3))
                ja[:2, :2] = -ra.T
                dra = np.array([[-np.sin(a[2]), np.cos(a[2])], [-np.cos(a[2]), -np.sin(a[2])]])
                ja[:2, 2] = dra @ dp
                ja[2, 2] = -1.0
                jb[:2, :2] = ra.T
                jb[2, 2] = 1.0
                self._put(jm, row, e.i, w @ ja)
                self._put(jm, row, e.j, w @ jb)
            row += 3
        for e, w in zip(g.lc_edges, self.lc_w):
            res = (x[e.j, :2] - x[e.i, :2]) - e.z.as_array()
            r[row:row + 2] = w @ res
            if jac:
                ji = np.zeros((2, 3))
                ji[:, :2] = -np.eye(2)
                self._put(jm, row, e.i, w @ ji)
                self._put(jm, row, e.j, -(w @ ji))
            row += 2
        return r, jm

    def _put(self, jm, row, node, block):
        if node in self.col:
            c = self.col[node]
            jm[row:row + len(block), c:c + 3] += block

    def update(self, x, delta):
        y = x.copy()
        y[self.free] += delta.reshape(-1, 3)
        y[:, 2] = wrap(y[:, 2])
        return y


def graph_cost(g: PoseGraph, nodes=None) -> float:
    p = _Problem(g)
    r, _ = p.residuals(g.nodes if nodes is None else np.asarray(nodes, dtype=float), jac=False)
    return float(r @ r)


def optimize(graph: PoseGraph, max_iterations: int = 100, rel_tol: float = 1e-9):
    """Levenberg-Marquardt over every node but the anchor.

    Returns the optimised copy of the graph and an :class:`OptimizeReport`.
    Steps that raise the cost are rejected, so the final cost never exceeds
    the initial one.
    """
    p = _Problem(graph)
    x = graph.nodes.copy()
    r, jm = p.residuals(x)
    cost0 = cost = float(r @ r)
    if not p.free:
        return graph.copy(), OptimizeReport(cost0, cost0, 0, True)
    h = jm.T @ jm
    if np.linalg.matrix_rank(h) < h.shape[0]:
        raise SingularSystem("normal equations are rank-deficient beyond the anchored gauge")
    lam = 1e-4 * float(np.max(np.diag(h)))
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        grad = jm.T @ r
        a = h + lam * np.diag(np.diag(h))
        try:
            delta = -np.linalg.solve(a, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
        y = p.update(x, delta)
        r_new, _ = p.residuals(y, jac=False)
        c_new = float(r_new @ r_new)
        if c_new <= cost:
            rel = (cost - c_new) / max(cost, 1e-300)
            x, cost = y, c_new
            r, jm = p.residuals(x)
            h = jm.T @ jm
            lam = max(lam / 10.0, 1e-12)
            if rel < rel_tol or cost == 0.0:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e16:
                converged = True
                break
    out = graph.copy()
    out.nodes = x
    return out, OptimizeReport(cost0, cost, it, converged)


# -- metrics --------------------------------------------------------------------

def rmse_xyz(estimated, gt) -> float:
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(gt, dtype=float)
    if est.shape != ref.shape:
        raise LengthMismatch(f"trajectory shapes differ: {est.shape} vs {ref.shape}")
    return float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


def place_submap(s: cloud.Submap, gt_pose, est_pose) -> np.ndarray:
    """Points of ``s`` (recorded at ``gt_pose``) moved to ``est_pose``; poses are ``(x, y, yaw)``."""
    rel = geom.compose(geom.from_xy_yaw(*est_pose), geom.inverse(geom.from_xy_yaw(*gt_pose)))
    return geom.apply(rel, s.points)


def _grid_means(points, cell):
    keys = np.floor(points[:, :2] / cell).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros(len(uniq))
    np.add.at(sums, inv, points[:, 2])
    counts = np.bincount(inv, minlength=len(uniq))
    return {tuple(k): v for k, v in zip(uniq.tolist(), sums / counts)}


def map_to_map(placed: dict, pairs, cell: float = 1.0) -> float:
    """RMS of mean-depth differences over co-occupied grid cells of every pair.

    ``placed`` maps node index to its points in the estimated world frame.
    """
    if cell <= 0:
        raise ValueError("cell size must be positive")
    grids = {}
    sq, n = 0.0, 0
    for a, b in sorted({tuple(sorted(p)) for p in pairs}):
        for k in (a, b):
            if k not in grids:
                grids[k] = _grid_means(np.asarray(placed[k]), cell)
        ga, gb = grids[a], grids[b]
        common = ga.keys() & gb.keys()
        for c in common:
            sq += (ga[c] - gb[c]) ** 2
        n += len(common)
    if n == 0:
        raise NoOverlap("no co-occupied cells among the given pairs")
    return float(np.sqrt(sq / n))


def graph_map_to_map(g: PoseGraph, submaps, gt_nodes, cell: float = 1.0) -> float:
    pairs = [(e.i, e.j) for e in g.lc_edges]
    used = {k for p in pairs for k in p}
    placed = {k: place_submap(submaps[k], gt_nodes[k], g.nodes[k]) for k in used}
    return map_to_map(placed, pairs, cell)


# -- text format ----------------------------------------------------------------

def _pose7_xyyaw(n, z):
    return geom.to_pose7(geom.from_xy_yaw(n[0], n[1], n[2], z))


def write_graph(g: PoseGraph, path) -> None:
    lines = []
    for k, (n, z) in enumerate(zip(g.nodes, g.z)):
        lines.append("NODE %d %s" % (k, " ".join("%.17g" % v for v in _pose7_xyyaw(n, z))))
    ix = [0, 1, 5]
    iu = np.triu_indices(6)
    for e in g.dr_edges:
        info6 = np.zeros((6, 6))
        info6[np.ix_(ix, ix)] = e.info
        vals = list(_pose7_xyyaw(e.rel, 0.0)) + list(info6[iu])
        lines.append("EDGE_DR %d %d %s" % (e.i, e.j, " ".join("%.17g" % v for v in vals)))
    for e in g.lc_edges:
        info = np.linalg.inv(e.q)
        vals = [e.z.dx, e.z.dy, info[0, 0], info[0, 1], info[1, 1]]
        lines.append("EDGE_LC %d %d %s" % (e.i, e.j, " ".join("%.17g" % v for v in vals)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> PoseGraph:
    nodes, zs, dr, lc = {}, {}, [], []
    ix = [0, 1, 5]
    iu = np.triu_indices(6)
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "NODE" and len(tok) == 9:
                t = geom.from_pose7([float(v) for v in tok[2:]])
                nodes[int(tok[1])] = pose_xyyaw(t)
                zs[int(tok[1])] = t.translation[2]
            elif tok[0] == "EDGE_DR" and len(tok) == 3 + 7 + 21:
                t = geom.from_pose7([float(v) for v in tok[3:10]])
                info6 = np.zeros((6, 6))
                info6[iu] = [float(v) for v in tok[10:]]
                info6 = info6 + np.triu(info6, 1).T
                dr.append(DrEdge(int(tok[1]), int(tok[2]), pose_xyyaw(t), info6[np.ix_(ix, ix)]))
            elif tok[0] == "EDGE_LC" and len(tok) == 8:
                dx, dy, ixx, ixy, iyy = (float(v) for v in tok[3:])
                q = np.linalg.inv(np.array([[ixx, ixy], [ixy, iyy]]))
                lc.append(LcEdge(int(tok[1]), int(tok[2]), PlanarShift(dx, dy), 0.5 * (q + q.T)))
            else:
                raise GraphFormatError(f"{path}:{ln}: unrecognised record")
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise GraphFormatError(f"{path}:{ln}: {exc}") from exc
    ids = sorted(nodes)
    if ids != list(range(len(ids))):
        raise GraphFormatError(f"{path}: node ids must be 0..N-1")
    return PoseGraph(np.array([nodes[k] for k in ids]), np.array([zs[k] for k in ids]), dr, lc)
