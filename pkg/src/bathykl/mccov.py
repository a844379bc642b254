"""Monte-Carlo ground-truth registration covariances and dataset assembly."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import cloud
from .geom import PlanarShift
from .register import GicpConfig, GicpTarget, register_batch

POINTS_PER_CHUNK = 200_000


class InsufficientIterations(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class RegistrationFailures(RuntimeError):
    pass


class SubmapError(RuntimeError):
    def __init__(self, submap_id, cause):
        super().__init__(f"submap {submap_id}: {cause}")
        self.submap_id = submap_id
        self.cause = cause


@dataclass
class PerturbationPrior:
    a: float = 9.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("prior scale a must be > 0")

    @property
    def sigma(self) -> np.ndarray:
        return self.a * np.eye(2)


@dataclass
class McConfig:
    iterations: int = 1000
    sigma_xyz: tuple = cloud.DEFAULT_SENSOR_SIGMA
    seed: int = 0
    max_failure_fraction: float = 0.2


@dataclass
class DatasetEntry:
    submap_id: int
    cloud: cloud.NormalizedCloud
    target_cov: np.ndarray
    n_failed: int = 0
    extra: dict = field(default_factory=dict)


def _rng(seed, submap_id, l) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(submap_id), int(l)]))


def sample_perturbation(prior: PerturbationPrior, seed) -> PlanarShift:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return PlanarShift.from_array(np.sqrt(prior.a) * rng.normal(size=2))


def registration_errors(s: cloud.Submap, prior: PerturbationPrior, cfg: McConfig,
                        gicp: GicpConfig | None = None):
    """Per-iteration errors ``t_j - t_hat_j`` (rows) and a mask of failed registrations."""
    gicp = gicp or GicpConfig()
    target = GicpTarget(s.points, gicp)
    sigma = np.asarray(cfg.sigma_xyz, dtype=float)
    L = cfg.iterations
    errors = np.zeros((L, 2))
    failed = np.zeros(L, bool)
    chunk = max(1, POINTS_PER_CHUNK // len(s))
    for lo in range(0, L, chunk):
        ls = range(lo, min(L, lo + chunk))
        shifts = np.zeros((len(ls), 2))
        src = np.empty((len(ls), len(s), 3))
        cov = np.empty((len(ls), len(s), 3, 3))
        for i, l in enumerate(ls):
            rng = _rng(cfg.seed, s.id, l)
            shifts[i] = sample_perturbation(prior, rng).as_array()
            pts = s.points + rng.normal(size=s.points.shape) * sigma
            pts[:, :2] += shifts[i]
            src[i] = pts
            cov[i] = cloud.plane_covariances(pts, gicp.k_neighbors, gicp.epsilon_plane, cKDTree(pts))
        out = register_batch(target, src, cov)
        # the registration returns the shift that undoes the perturbation
        errors[lo:lo + len(ls)] = shifts + out["shift"]
        failed[lo:lo + len(ls)] = out["failed"]
    return errors, failed


def mc_covariance(s: cloud.Submap, prior: PerturbationPrior | None = None, cfg: McConfig | None = None,
                  gicp: GicpConfig | None = None, return_failures: bool = False):
    """``Q = 1/(L'-1) sum e_l e_l^T`` over the L' successful registrations.

    Each iteration shifts a noisy copy of ``s`` by a draw from the prior and
    registers it back onto ``s`` from a zero initial shift.
    """
    prior = prior or PerturbationPrior()
    cfg = cfg or McConfig()
    if cfg.iterations < 2:
        raise InsufficientIterations(f"need L >= 2, got {cfg.iterations}")
    errors, failed = registration_errors(s, prior, cfg, gicp)
    n_fail = int(failed.sum())
    if n_fail > cfg.max_failure_fraction * cfg.iterations:
        raise RegistrationFailures(f"{n_fail}/{cfg.iterations} registrations failed")
    e = errors[~failed]
    if len(e) < 2:
        raise InsufficientIterations("fewer than 2 successful registrations")
    q = e.T @ e / (len(e) - 1)
    q = 0.5 * (q + q.T)
    return (q, n_fail) if return_failures else q


def _entry(args):
    s, prior, cfg, gicp, voxel_size = args
    try:
        nc = cloud.preprocess(s, voxel_size)
        q, n_fail = mc_covariance(s, prior, cfg, gicp, return_failures=True)
    except Exception as exc:  # noqa: BLE001 - re-raised with the submap id attached
        raise SubmapError(s.id, exc) from exc
    return DatasetEntry(s.id, nc, q, n_fail)


def build_dataset(submaps, prior: PerturbationPrior | None = None, cfg: McConfig | None = None,
                  gicp: GicpConfig | None = None, voxel_size: float = cloud.DEFAULT_VOXEL,
                  threads: int = 1, on_entry=None) -> list:
    """One entry per submap, in input order.  ``on_entry`` is called as entries complete."""
    prior = prior or PerturbationPrior()
    cfg = cfg or McConfig()
    gicp = gicp or GicpConfig()
    jobs = [(s, prior, cfg, gicp, voxel_size) for s in submaps]
    out = []
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = pool.map(_entry, jobs)
            for e in results:
                out.append(e)
                if on_entry:
                    on_entry(e)
    else:
        for job in jobs:
            e = _entry(job)
            out.append(e)
            if on_entry:
                on_entry(e)
    return out


def constant_q(dataset) -> np.ndarray:
    """Element-wise mean of the target covariances."""
    qs = [e.target_cov if isinstance(e, DatasetEntry) else np.asarray(e) for e in dataset]
    if not qs:
        raise EmptyDataset("constant Q needs at least one entry")
    return np.mean(qs, axis=0)


def dataset_record(entry: DatasetEntry, cloud_file) -> str:
    q = entry.target_cov
    return json.dumps({"id": int(entry.submap_id), "cloud_file": str(cloud_file),
                       "q": [[float(q[0, 0]), float(q[0, 1])], [float(q[1, 0]), float(q[1, 1])]]})


def read_dataset_manifest(path):
    """Records of a JSON-lines dataset manifest, skipping ``#`` provenance lines."""
    records = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rec = json.loads(line)
        rec["q"] = np.array(rec["q"], dtype=float)
        records.append(rec)
    return records
