"""Submaps, normalisation for the network, spatial indexing and GICP point covariances."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import geom

DEFAULT_VOXEL = 0.05
DEFAULT_K = 20
DEFAULT_EPSILON = 1e-3
DEFAULT_SENSOR_SIGMA = (0.0, 0.0, 0.1)

TEXT_HEADER = "BATHYKL-SUBMAP v1"
BINARY_MAGIC = b"BKSM"


class DegenerateCloud(ValueError):
    pass


@dataclass
class Submap:
    id: int
    points: np.ndarray
    frame: geom.RigidTransform = field(default_factory=geom.identity)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError(f"submap {self.id} has no points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"submap {self.id} has non-finite coordinates")

    def __len__(self):
        return len(self.points)

    def shifted(self, dx: float, dy: float) -> "Submap":
        """Copy with points and frame moved by a planar shift."""
        off = np.array([dx, dy, 0.0])
        frame = geom.RigidTransform(self.frame.rotation, self.frame.translation + off)
        return Submap(self.id, self.points + off, frame)


@dataclass
class NormalizedCloud:
    points: np.ndarray
    source_id: int

    def __len__(self):
        return len(self.points)


def voxel_downsample(points, voxel_size: float, origin=None) -> np.ndarray:
    """One centroid per occupied voxel, returned in lexicographic voxel order.

    Voxel index is ``floor((p - origin) / voxel_size)`` per axis, origin
    defaulting to zero.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts.copy()
    shifted = pts if origin is None else pts - np.asarray(origin, dtype=float)
    keys = np.floor(shifted / voxel_size).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, pts)
    return sums / counts[:, None]


def preprocess(s: Submap, voxel_size: float = DEFAULT_VOXEL) -> NormalizedCloud:
    """Zero-mean, scale into the unit sphere, then voxelise.

    The voxel grid is anchored at the corner (-1, -1, -1) of the cube
    bounding the unit sphere.  Points are put in lexicographic order first so
    that every floating-point sum, and hence the output, is independent of
    the input order.
    """
    pts = s.points[np.lexsort(s.points.T[::-1])]
    if len(pts) < 2:
        raise DegenerateCloud(f"submap {s.id}: need at least 2 points")
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1)).max()
    if not scale > 0:
        raise DegenerateCloud(f"submap {s.id}: all points identical")
    unit = centered / scale
    return NormalizedCloud(voxel_downsample(unit, voxel_size, origin=(-1.0, -1.0, -1.0)), s.id)


class NeighborIndex:
    """k-d tree over a fixed point set; read-only after construction."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn_indices(self, query, k: int) -> np.ndarray:
        """Indices of the ``min(k, U)`` nearest points, ties broken by insertion order."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=float).reshape(3)
        k = min(k, len(self))
        d, _ = self.tree.query(q, k=k)
        kth = np.atleast_1d(d)[-1]
        # gather every point tied with the k-th distance, then order by (distance, index)
        cand = np.array(self.tree.query_ball_point(q, kth * (1 + 1e-12) + 1e-300), dtype=np.int64)
        dist = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.lexsort((cand, dist))
        return cand[order][:k]

    def knn(self, query, k: int) -> np.ndarray:
        return self.points[self.knn_indices(query, k)]

    def nearest(self, queries, max_distance: float = np.inf):
        """Bulk 1-NN; unmatched queries get index ``len(self)`` and distance inf."""
        return self.tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=1,
                               distance_upper_bound=max_distance)


def plane_covariances(points, k: int = DEFAULT_K, epsilon: float = DEFAULT_EPSILON,
                      tree: cKDTree | None = None) -> np.ndarray:
    """Plane-regularised covariances ``I - (1 - eps) n n^T`` for every point.

    ``n`` is the least-variance direction of the k-neighbourhood, which makes
    each matrix equal to ``R diag(eps, 1, 1) R^T`` in the neighbourhood's
    eigenbasis.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    k = min(k, len(pts))
    if tree is None:
        tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    nb = pts[idx.reshape(len(pts), k)]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    out = -(1.0 - epsilon) * n[:, :, None] * n[:, None, :]
    out[:, [0, 1, 2], [0, 1, 2]] += 1.0
    return out


def point_covariances(s: Submap, k: int = DEFAULT_K, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    return plane_covariances(s.points, k, epsilon)


def add_noise(s: Submap, sigma_xyz=DEFAULT_SENSOR_SIGMA, seed: int | np.random.Generator = 0) -> Submap:
    sigma = np.asarray(sigma_xyz, dtype=float).reshape(3)
    if np.any(sigma < 0):
        raise ValueError("sigma components must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noisy = s.points + rng.normal(size=s.points.shape) * sigma
    return Submap(s.id, noisy, s.frame)


def sigma_z(s: Submap) -> float:
    """Std of depths after zero-mean / unit-sphere normalisation (no voxelisation)."""
    centered = s.points - s.points.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1)).max()
    if scale == 0:
        return 0.0
    return float(np.std(centered[:, 2] / scale))


# --- file formats -----------------------------------------------------------

def write_submap(s: Submap, path, binary: bool = False) -> None:
    path = Path(path)
    pose = geom.to_pose7(s.frame)
    if binary:
        with open(path, "wb") as f:
            f.write(BINARY_MAGIC)
            f.write(struct.pack("<qq", s.id, len(s.points)))
            f.write(pose.astype("<f8").tobytes())
            f.write(s.points.astype("<f8").tobytes())
        return
    lines = [TEXT_HEADER, " ".join(repr(float(v)) for v in pose)]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in s.points.tolist()]
    path.write_text("\n".join(lines) + "\n")


def read_submap(path, submap_id: int = 0) -> Submap:
    """Read either format; text files carry no id, so ``submap_id`` is used."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == BINARY_MAGIC:
        sid, n = struct.unpack("<qq", raw[4:20])
        pose = np.frombuffer(raw, dtype="<f8", count=7, offset=20)
        pts = np.frombuffer(raw, dtype="<f8", count=3 * n, offset=76).reshape(n, 3)
        return Submap(int(sid), pts.astype(float), geom.from_pose7(pose))
    lines = raw.decode().splitlines()
    if not lines or lines[0].strip() != TEXT_HEADER:
        raise ValueError(f"{path}: not a submap file")
    pose = np.array(lines[1].split(), dtype=float)
    pts = np.loadtxt(lines[2:], dtype=float, ndmin=2)
    return Submap(submap_id, pts, geom.from_pose7(pose))
