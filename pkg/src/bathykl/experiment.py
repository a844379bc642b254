"""Seeded SLAM comparisons of LC covariance sources on one survey."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import cloud, slam
from .mccov import McConfig, PerturbationPrior, mc_covariance
from .register import GicpConfig

METHODS = ("mc", "constq", "naive", "ours")
COLUMNS = (["trial", "corrupted_rmse"] + [f"{m}_rmse" for m in METHODS]
           + ["corrupted_m2m"] + [f"{m}_m2m" for m in METHODS])


@dataclass
class SlamSettings:
    coverage: float = 0.6
    a: float = 9.0
    rc_yaw: float = 0.01
    rc_xy: float = 0.0
    dr_sigma_xy: float = 0.1
    dr_sigma_yaw: float = 0.1
    map_cell: float = 1.0
    max_iterations: int = 100

    def corruption(self, seed: int) -> slam.CorruptionConfig:
        return slam.CorruptionConfig(np.diag([self.rc_xy, self.rc_xy, 0, 0, 0, self.rc_yaw]), seed)

    @property
    def dr_sigma(self):
        return (self.dr_sigma_xy, self.dr_sigma_xy, self.dr_sigma_yaw)


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def mc_sources(submaps, iterations: int = 1000, prior: PerturbationPrior | None = None,
               gicp: GicpConfig | None = None, seed: int = 0, sigma_xyz=cloud.DEFAULT_SENSOR_SIGMA):
    """Monte-Carlo Q per submap id and the constant Q (their mean)."""
    prior = prior or PerturbationPrior()
    cfg = McConfig(iterations=iterations, seed=seed, sigma_xyz=tuple(sigma_xyz))
    mc = {s.id: mc_covariance(s, prior, cfg, gicp) for s in submaps}
    const = np.mean(list(mc.values()), axis=0)
    return mc, {k: const for k in mc}


def learned_sources(model, submaps, voxel_size: float = cloud.DEFAULT_VOXEL):
    """Network Q per submap id and the per-submap prediction wall time."""
    out, times = {}, {}
    for s in submaps:
        t = time.perf_counter()
        out[s.id] = model.predict(s, voxel_size)
        times[s.id] = time.perf_counter() - t
    return out, times


def run_trial(job):
    """One seeded trial; ``job`` is a tuple so that it can cross process boundaries."""
    submaps, poses, sources, trial, seed, st, gicp, keep = job
    ts = trial_seed(seed, trial)
    built = slam.build_corrupted_graph(submaps, poses, slam.LcPolicy(st.coverage, PerturbationPrior(st.a)),
                                       gicp, st.corruption(ts), st.dr_sigma, ts)
    g = built.graph
    if not g.lc_edges:
        raise slam.NoOverlap("survey produced no loop closures")
    gt = np.column_stack([built.gt_nodes[:, :2], g.z])
    row = {"trial": trial, "corrupted_rmse": slam.rmse_xyz(g.positions(), gt),
           "corrupted_m2m": slam.graph_map_to_map(g, submaps, built.gt_nodes, st.map_cell)}
    sources = dict(sources)
    sources["naive"] = {r.candidate: r.naive_q for r in built.lc}
    tracks = {"gt": built.gt_nodes, "corrupted": g.nodes}
    for m in METHODS:
        opt, _ = slam.optimize(g.with_lc_covariances(sources[m]), st.max_iterations)
        row[f"{m}_rmse"] = slam.rmse_xyz(opt.positions(), gt)
        row[f"{m}_m2m"] = slam.graph_map_to_map(opt, submaps, built.gt_nodes, st.map_cell)
        tracks[m] = opt.nodes
    row["n_lc"] = len(g.lc_edges)
    return row, (tracks if keep else None)


def run_trials(submaps, poses, sources: dict, trials: int, seed: int = 0,
               settings: SlamSettings | None = None, gicp: GicpConfig | None = None, threads: int = 1):
    """Rows (one per trial, in trial order) and the node tracks of trial 0."""
    st = settings or SlamSettings()
    jobs = [(submaps, poses, sources, t, seed, st, gicp, t == 0) for t in range(trials)]
    if threads > 1 and trials > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(run_trial, jobs))
    else:
        results = [run_trial(j) for j in jobs]
    rows = [r for r, _ in results]
    return rows, results[0][1] if results else None


def mean_row(rows) -> dict:
    out = {"trial": "mean"}
    for c in COLUMNS[1:]:
        out[c] = float(np.mean([r[c] for r in rows]))
    return out
