"""GICP restricted to a planar (x, y) translation, and the naive information baseline.

Rotation and depth are taken as known, so the registration solves for a
2-vector ``t`` that minimises ``sum d_i^T (C_tgt + C_src)^-1 d_i`` with
``d_i = (p_i + [t, 0]) - q_i``.  The cost is averaged over the matched pairs
so that it stays comparable when the correspondence set changes between
iterations; Gauss-Newton steps are halved until the cost does not increase.
Matches onto target points lying on the xy footprint boundary are rejected
(the usual boundary-pair rejection of ICP), otherwise points of a shifted
cloud hanging over the target edge pull a featureless cloud back into
alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from . import cloud
from .geom import PlanarShift

MAX_HALVINGS = 8
INSIDE_RULE = True
SINGULAR_CONDITION = 1e12
JITTER = 1e-9


class NoCorrespondences(RuntimeError):
    pass


@dataclass
class GicpConfig:
    max_iterations: int = 50
    translation_tolerance: float = 1e-4
    max_correspondence_distance: float = 5.0
    k_neighbors: int = 20
    epsilon_plane: float = 1e-3
    reject_boundary: bool = True

    def __post_init__(self):
        for name in ("max_iterations", "translation_tolerance", "max_correspondence_distance",
                     "k_neighbors", "epsilon_plane"):
            if not getattr(self, name) > 0:
                raise ValueError(f"GicpConfig.{name} must be positive")


@dataclass
class RegistrationResult:
    shift: PlanarShift
    converged: bool
    iterations: int
    final_cost: float
    n_correspondences: int
    last_step: float = 0.0


@dataclass
class NaiveInformation:
    information: np.ndarray
    covariance: np.ndarray
    singular: bool


class GicpTarget:
    """Target cloud with its k-d tree and plane covariances, reusable across registrations."""

    def __init__(self, points, cfg: GicpConfig):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(self.points) < cfg.k_neighbors:
            raise ValueError(f"target has {len(self.points)} points, need >= {cfg.k_neighbors}")
        self.tree = cKDTree(self.points)
        self.cov = cloud.plane_covariances(self.points, cfg.k_neighbors, cfg.epsilon_plane, self.tree)
        self.cfg = cfg
        self.usable = ~footprint_boundary(self.points) if cfg.reject_boundary else np.ones(len(self.points), bool)
        self.hull = None
        if cfg.reject_boundary and INSIDE_RULE:
            try:
                self.hull = ConvexHull(self.points[:, :2]).equations
            except (QhullError, ValueError):
                self.hull = None

    def inside(self, q) -> np.ndarray:
        if self.hull is None:
            return np.ones(len(q), bool)
        return (q[:, :2] @ self.hull[:, :2].T + self.hull[:, 2] <= 0).all(axis=1)


def footprint_boundary(points) -> np.ndarray:
    """Mask of points within half the typical xy spacing of the convex footprint edge."""
    xy = np.asarray(points, dtype=float)[:, :2]
    try:
        hull = ConvexHull(xy)
    except (QhullError, ValueError):
        return np.zeros(len(xy), bool)
    d, _ = cKDTree(xy).query(xy, k=2)
    tol = 0.5 * np.median(d[:, 1])
    # hull.equations rows are (nx, ny, offset) with n outward: n.p + offset <= 0 inside
    dist = -(xy @ hull.equations[:, :2].T + hull.equations[:, 2])
    return dist.min(axis=1) <= tol


def _inv_sym3(m):
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]
    c00 = d * f - e * e
    c01 = c * e - b * f
    c02 = b * e - c * d
    c11 = a * f - c * c
    c12 = b * c - a * e
    c22 = a * d - b * b
    det = a * c00 + b * c01 + c * c02
    out = np.stack([c00, c01, c02, c01, c11, c12, c02, c12, c22], axis=-1) / det[..., None]
    return out.reshape(m.shape)


def _correspond(target: GicpTarget, src, src_cov, t):
    """Correspondences for items ``src[b] + [t[b], 0]``.

    Returns per-item cost, gradient half ``sum (W d)_xy``, information
    ``sum W_xy`` and number of matches.
    """
    nb, nu, _ = src.shape
    q = src.copy()
    q[:, :, :2] += t[:, None, :]
    q = q.reshape(-1, 3)
    _, idx = target.tree.query(q, k=1, distance_upper_bound=target.cfg.max_correspondence_distance)
    valid = idx < len(target.points)
    valid[valid] = target.usable[idx[valid]]
    valid &= target.inside(q)
    item = np.repeat(np.arange(nb), nu)[valid]
    d = q[valid] - target.points[idx[valid]]
    w = _inv_sym3(src_cov.reshape(-1, 3, 3)[valid] + target.cov[idx[valid]])
    wd = np.einsum("nij,nj->ni", w, d)
    count = np.bincount(item, minlength=nb)
    cost = np.bincount(item, weights=np.einsum("ni,ni->n", d, wd), minlength=nb)
    cost = cost / np.maximum(count, 1)
    grad = np.stack([np.bincount(item, weights=wd[:, k], minlength=nb) for k in range(2)], axis=1)
    info = np.stack([np.bincount(item, weights=w[:, i, j], minlength=nb)
                     for i, j in ((0, 0), (0, 1), (1, 1))], axis=1)
    return cost, grad, info, count


def register_batch(target: GicpTarget, src, src_cov, init=None):
    """Run ``B`` independent registrations of ``src[b]`` onto one target in lockstep.

    ``src`` is ``(B, U, 3)``, ``src_cov`` ``(B, U, 3, 3)``.  Returns a dict of
    per-item arrays: shift, converged, iterations, cost, n_corr, failed,
    last_step.
    """
    cfg = target.cfg
    src = np.asarray(src, dtype=float)
    nb = src.shape[0]
    t = np.zeros((nb, 2)) if init is None else np.array(init, dtype=float).reshape(nb, 2)
    cost, grad, info, count = _correspond(target, src, src_cov, t)
    failed = count == 0
    active = ~failed
    converged = np.zeros(nb, bool)
    iters = np.zeros(nb, int)
    last = np.zeros(nb)

    for _ in range(cfg.max_iterations):
        items = np.flatnonzero(active)
        if len(items) == 0:
            break
        iters[items] += 1
        h = info[items]
        det = h[:, 0] * h[:, 2] - h[:, 1] ** 2
        bad = ~(np.abs(det) > 0)
        if bad.any():
            failed[items[bad]] = True
            active[items[bad]] = False
            items, h, det = items[~bad], h[~bad], det[~bad]
        g = grad[items]
        step = -np.stack([h[:, 2] * g[:, 0] - h[:, 1] * g[:, 1],
                          -h[:, 1] * g[:, 0] + h[:, 0] * g[:, 1]], axis=1) / det[:, None]
        pending = np.arange(len(items))
        for _halving in range(MAX_HALVINGS + 1):
            it = items[pending]
            cand = t[it] + step[pending]
            c_cost, c_grad, c_info, c_count = _correspond(target, src[it], src_cov[it], cand)
            ok = (c_cost <= cost[it]) & (c_count > 0)
            acc = it[ok]
            t[acc], cost[acc], grad[acc], info[acc], count[acc] = (
                cand[ok], c_cost[ok], c_grad[ok], c_info[ok], c_count[ok])
            last[acc] = np.linalg.norm(step[pending[ok]], axis=1)
            pending = pending[~ok]
            if len(pending) == 0:
                break
            step[pending] *= 0.5
        # no descent after all halvings: stationary for this cost
        stuck = items[pending]
        last[stuck] = 0.0
        done = np.zeros(nb, bool)
        done[stuck] = True
        moved = np.setdiff1d(items, stuck)
        done[moved[last[moved] <= cfg.translation_tolerance]] = True
        converged |= done
        active &= ~done

    return {"shift": t, "converged": converged & ~failed, "iterations": iters, "cost": cost,
            "n_corr": count, "failed": failed, "last_step": last}


def gicp_register_xy(source: cloud.Submap, target: cloud.Submap, init: PlanarShift | None = None,
                     cfg: GicpConfig | None = None, target_ctx: GicpTarget | None = None) -> RegistrationResult:
    """Planar shift to add to ``source`` so that it aligns with ``target``.

    A run that exhausts ``max_iterations`` comes back with ``converged=False``.
    """
    cfg = cfg or GicpConfig()
    if len(source) < cfg.k_neighbors:
        raise ValueError(f"source has {len(source)} points, need >= {cfg.k_neighbors}")
    tgt = target_ctx or GicpTarget(target.points, cfg)
    src_cov = cloud.plane_covariances(source.points, cfg.k_neighbors, cfg.epsilon_plane)
    t0 = np.zeros((1, 2)) if init is None else init.as_array()[None, :]
    out = register_batch(tgt, source.points[None], src_cov[None], t0)
    if out["failed"][0]:
        raise NoCorrespondences(f"no correspondences within {cfg.max_correspondence_distance} m")
    return RegistrationResult(PlanarShift.from_array(out["shift"][0]), bool(out["converged"][0]),
                              int(out["iterations"][0]), float(out["cost"][0]), int(out["n_corr"][0]),
                              float(out["last_step"][0]))


def naive_information_xy(source: cloud.Submap, target: cloud.Submap, at: PlanarShift,
                         cfg: GicpConfig | None = None) -> NaiveInformation:
    """Mean xy block of ``(C_tgt + C_src)^-1`` over correspondences at shift ``at``.

    The covariance is the inverse of that mean; when its condition number
    exceeds 1e12 a 1e-9 diagonal jitter is added first and ``singular`` is set.
    """
    cfg = cfg or GicpConfig()
    tgt = GicpTarget(target.points, cfg)
    src_cov = cloud.plane_covariances(source.points, cfg.k_neighbors, cfg.epsilon_plane)
    q = source.points.copy()
    q[:, :2] += at.as_array()
    _, idx = tgt.tree.query(q, k=1, distance_upper_bound=cfg.max_correspondence_distance)
    valid = idx < len(tgt.points)
    valid[valid] = tgt.usable[idx[valid]]
    if not valid.any():
        raise NoCorrespondences("no correspondences for the information matrix")
    w = _inv_sym3(src_cov[valid] + tgt.cov[idx[valid]])
    info = w[:, :2, :2].mean(axis=0)
    info = 0.5 * (info + info.T)
    return information_to_covariance(info)


def information_to_covariance(info) -> NaiveInformation:
    info = np.asarray(info, dtype=float)
    singular = not np.linalg.cond(info) <= SINGULAR_CONDITION
    reg = info + JITTER * np.eye(2) if singular else info
    cov = np.linalg.inv(reg)
    return NaiveInformation(info, 0.5 * (cov + cov.T), singular)
