"""The ten primary acceptance criteria, each printed as a PASS/FAIL line in the summary.

Criteria 6 and 7 share one trained model: a 500-submap mixed-terrain corpus,
500 Monte-Carlo iterations per submap, and the desk-scale network settings
below.  Expect the whole module to take roughly an hour on one CPU core.
"""

import shutil
import time

import numpy as np
import pytest
import yaml

from acceptance_log import criterion
from bathykl import cli, mccov, register, synthworld as sw
from bathykl.cloud import Submap
from bathykl.geom import PlanarShift
from bathykl.mccov import McConfig, PerturbationPrior
from bathykl.net import loss as L
from bathykl.net import train as T
from bathykl.net.model import ModelConfig, PointNetKL
from bathykl import experiment
from helpers import featured_submap, ridge_submap
from netcheck import relative_errors, tiny_batch, tiny_model

pytestmark = pytest.mark.acceptance

# desk-scale training: reduced widths, batch 128, symmetry augmentation
DESK_MODEL = dict(point_mlp_sizes=(64, 64, 64, 128, 256), head_sizes=(256, 256, 256, 256), dropout_p=0.0)
DESK_TRAIN = dict(learning_rate=1e-3, batch_size=128, val_batch_size=1000, patience=300, max_episodes=1500,
                  augment=True, seed=0)
CORPUS_K, CORPUS_L = 500, 500


# -- 1 ---------------------------------------------------------------------------------

@criterion(1)
def test_c01_gradient_correctness():
    t = time.perf_counter()
    worst, n = 0.0, 0
    for seed in range(20):
        m = tiny_model(100 + seed)
        assert m.cfg.feature_dim == 8 and m.cfg.head_sizes == (8, 8)
        errs = relative_errors(m, *tiny_batch(100 + seed))
        worst, n = max(worst, errs.max()), n + errs.size
    secs = time.perf_counter() - t
    assert worst <= 1e-4, f"worst relative error {worst:.2e}"
    assert secs < 120, f"took {secs:.0f} s"
    return f"20 models, {n} components, worst relative error {worst:.1e}"


# -- 2 ---------------------------------------------------------------------------------

@criterion(2)
def test_c02_permutation_invariance_and_pd():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_diff, min_eig, count = 0.0, np.inf, 0
    for draw in range(100):
        m = tiny_model(1000 + draw)
        for v in m.params.values():
            v *= rng.uniform(0.5, 3.0)
        for _ in range(100):
            n = int(rng.integers(2, 300))
            pts = rng.normal(scale=rng.uniform(0.1, 50.0), size=(n, 3)) + rng.uniform(-1e3, 1e3, 3)
            q = m.predict(Submap(0, pts))
            q2 = m.predict(Submap(0, pts[rng.permutation(n)]))
            worst_diff = max(worst_diff, float(np.abs(q - q2).max()))
            min_eig = min(min_eig, float(np.linalg.eigvalsh(q).min()))
            count += 1
    secs = time.perf_counter() - t
    assert count == 10_000
    assert worst_diff <= 1e-12, f"permutation changed a prediction by {worst_diff:.2e}"
    assert min_eig > 0, f"minimum eigenvalue {min_eig:.3e}"
    assert secs < 300, f"took {secs:.0f} s"
    return f"{count} clouds, max permutation difference {worst_diff:.1e}, min eigenvalue {min_eig:.2e}"


# -- 3 ---------------------------------------------------------------------------------

@criterion(3)
def test_c03_kl_closed_form():
    z = np.zeros(2)
    a = L.kl_divergence(2 * np.eye(2), z, np.eye(2), z)
    b = L.kl_divergence(np.diag([4.0, 1.0]), z, np.eye(2), z)
    c = L.kl_divergence(np.eye(2), z, np.eye(2), z)
    assert abs(a - 0.3069) <= 1e-4, a
    assert abs(b - 0.8069) <= 1e-4, b
    assert abs(c) <= 1e-12, c
    return f"KL(2I, I) = {a:.4f}, KL(diag(4, 1), I) = {b:.4f}, KL(I, I) = {c:.1e}"


# -- 4, 5 -------------------------------------------------------------------------------

def flat_survey_submap():
    plan = sw.SurveyPlan(n_lines=1)
    f = sw.random_field(0, sw.survey_extent(plan), "flat")
    return sw.simulate_survey(f, plan, 15.0).submaps[0]


@criterion(4)
def test_c04_mc_flat_plane():
    t = time.perf_counter()
    q = mccov.mc_covariance(flat_survey_submap(), PerturbationPrior(9.0), McConfig(1000, seed=0))
    secs = time.perf_counter() - t
    rel = np.linalg.norm(q - 9 * np.eye(2)) / np.linalg.norm(9 * np.eye(2))
    assert rel <= 0.15, f"relative Frobenius error {rel:.3f}, Q = {q.round(3).tolist()}"
    assert secs < 180, f"took {secs:.0f} s"
    return f"Q = {np.round(q, 2).tolist()}, relative error {rel:.3f}"


@criterion(5)
def test_c05_mc_anisotropy():
    t = time.perf_counter()
    q = mccov.mc_covariance(ridge_submap(np.pi / 2), PerturbationPrior(9.0), McConfig(1000, seed=0))
    secs = time.perf_counter() - t
    ratio = q[1, 1] / q[0, 0]
    assert ratio >= 2, f"Q_yy / Q_xx = {ratio:.2f}"
    assert secs < 180, f"took {secs:.0f} s"
    return f"Q_yy / Q_xx = {ratio:.2f}"


# -- 6, 7 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    t = time.perf_counter()
    submaps, _ = sw.generate_corpus(CORPUS_K, seed=0)
    ds = mccov.build_dataset(submaps, cfg=McConfig(iterations=CORPUS_L, seed=0))
    t_data = time.perf_counter() - t
    model = PointNetKL(ModelConfig(**DESK_MODEL), seed=0)
    res = T.train(model, T.TrainConfig(**DESK_TRAIN), ds)
    clouds, targets = T.unpack(ds)
    targets = T.floor_covariances(targets, T.TrainConfig().target_floor)
    cq = mccov.constant_q(targets[res.train_idx])
    z = np.zeros(2)
    constq_kl = float(np.mean([L.kl_divergence(q, z, cq, z) for q in targets[res.val_idx]]))
    return {"model": model, "result": res, "constq_kl": constq_kl, "data_secs": t_data,
            "secs": time.perf_counter() - t}


@criterion(6)
def test_c06_training_convergence(trained):
    r = trained["result"]
    ep0, final, cq = r.extra["episode0_val_kl"], r.extra["best_val_kl"], trained["constq_kl"]
    detail = (f"val KL {final:.3f} vs episode 0 {ep0:.3f} (ratio {final / ep0:.2f}) and Constant-Q {cq:.3f}; "
              f"{len(r.history)} episodes, {trained['secs'] / 60:.1f} min")
    assert final < 0.5 * ep0, detail
    assert final < cq, detail
    assert trained["secs"] < 3600, detail
    return detail


@criterion(7)
def test_c07_slam_directional(trained):
    t = time.perf_counter()
    cfg = cli.config.resolve({"world": {"mode": "survey"}})
    plan = cli.plan_from(cfg)
    f = sw.random_field(0, sw.survey_extent(plan), cfg["world.style"])
    survey = sw.simulate_survey(f, plan, cfg["world.submap_length"], seed=0)
    gicp = cli.gicp_from(cfg)
    mc, const = experiment.mc_sources(survey.submaps, 1000, PerturbationPrior(9.0), gicp, 0)
    ours, _ = experiment.learned_sources(trained["model"], survey.submaps)
    rows, _ = experiment.run_trials(survey.submaps, survey.poses, {"mc": mc, "constq": const, "ours": ours},
                                    20, 0, cli.settings_from(cfg), gicp)
    mean = experiment.mean_row(rows)
    secs = time.perf_counter() - t
    detail = (f"RMSE corrupted {mean['corrupted_rmse']:.2f}, MC {mean['mc_rmse']:.2f}, "
              f"learned {mean['ours_rmse']:.2f}; map-to-map corrupted {mean['corrupted_m2m']:.3f}, "
              f"MC {mean['mc_m2m']:.3f}, learned {mean['ours_m2m']:.3f}; {len(rows)} trials, {secs / 60:.1f} min")
    assert len(rows) >= 20
    assert mean["mc_rmse"] <= 0.7 * mean["corrupted_rmse"], detail
    assert abs(mean["ours_rmse"] - mean["mc_rmse"]) <= 0.25 * mean["mc_rmse"], detail
    assert mean["mc_m2m"] < mean["corrupted_m2m"], detail
    assert mean["ours_m2m"] < mean["corrupted_m2m"], detail
    assert secs < 1800, detail
    return detail


# -- 8 ---------------------------------------------------------------------------------

@criterion(8)
def test_c08_prediction_runtime():
    plan = sw.SurveyPlan(n_lines=1, line_length=15.0, ping_spacing=0.3, beams_per_ping=130)
    f = sw.random_field(8, sw.survey_extent(plan), "bumps")
    s = sw.simulate_survey(f, plan, 15.0).submaps[0]
    assert 6000 <= len(s) <= 7000, len(s)
    model = PointNetKL(ModelConfig(), seed=0)
    model.predict(s)
    t = time.perf_counter()
    for _ in range(5):
        model.predict(s)
    t_pred = (time.perf_counter() - t) / 5
    t = time.perf_counter()
    mccov.mc_covariance(s, PerturbationPrior(9.0), McConfig(1000, seed=0))
    t_mc = time.perf_counter() - t
    detail = f"{len(s)} points: predict {t_pred * 1e3:.1f} ms, MC (L=1000) {t_mc:.1f} s, ratio {t_mc / t_pred:.0f}x"
    assert t_pred <= t_mc / 10, detail
    return detail


# -- 9 ---------------------------------------------------------------------------------

@criterion(9)
def test_c09_gicp_exactness():
    target = featured_submap()
    source = target.shifted(1.0, 0.5)
    r = register.gicp_register_xy(source, target, PlanarShift(0.0, 0.0))
    est = -r.shift.as_array()
    err = float(np.linalg.norm(est - [1.0, 0.5]))
    same = register.gicp_register_xy(target, target, PlanarShift(0.0, 0.0)).shift.as_array()
    assert err <= 0.05, f"recovered {est.round(4).tolist()}"
    assert np.abs(same).max() <= 1e-6, same
    return f"recovered ({est[0]:.4f}, {est[1]:.4f}), error {err:.1e} m; identical clouds {np.abs(same).max():.1e} m"


# -- 10 --------------------------------------------------------------------------------

def _run_pipeline(root, cfg_path, monkeypatch):
    # run from the output root with relative paths, so recorded input paths match across runs
    root.mkdir()
    monkeypatch.chdir(root)
    corpus = ["--config", cfg_path]
    assert cli.main(["synth", *corpus, "--out", "world"]) == 0
    assert cli.main(["mc-dataset", "world/survey.json", *corpus, "--out", "ds"]) == 0
    assert cli.main(["train", "ds/dataset.jsonl", *corpus, "--out", "tr"]) == 0
    files = [f"world/submaps/{p.name}" for p in sorted((root / "world" / "submaps").glob("*.txt"))]
    assert cli.main(["predict", "tr/model.pnkl", *files, *corpus, "--out", "pr"]) == 0
    survey = ["--config", str(root.parent / "survey.yaml")]
    assert cli.main(["synth", *survey, "--out", "sv"]) == 0
    assert cli.main(["slam-eval", "sv/survey.json", "tr/model.pnkl", *survey, "--out", "slam"]) == 0
    assert cli.main(["report", "tr", "slam", "--out", "fig"]) == 0


def _payload(path):
    if path.name == "predictions.csv":
        lines = path.read_text().splitlines()
        # wall-clock column is a measurement, not a payload
        return "\n".join(ln.rsplit(",", 1)[0] for ln in lines).encode()
    return path.read_bytes()


@criterion(10)
def test_c10_determinism(tmp_path, monkeypatch):
    base = {"seed": 3, "world": {"mode": "corpus", "style": "mixed", "n_submaps": 10},
            "mc": {"iterations": 30},
            "model": {"point_mlp_sizes": [16, 16, 32], "head_sizes": [16, 16], "dropout_p": 0.4},
            "train": {"batch_size": 4, "max_episodes": 5, "augment": True},
            "slam": {"trials": 2, "mc_iterations": 30}}
    (tmp_path / "corpus.yaml").write_text(yaml.safe_dump(base))
    (tmp_path / "survey.yaml").write_text(yaml.safe_dump(
        {**base, "world": {"mode": "survey", "style": "mixed", "n_lines": 3, "line_length": 75.0}}))
    _run_pipeline(tmp_path / "a", str(tmp_path / "corpus.yaml"), monkeypatch)
    _run_pipeline(tmp_path / "b", str(tmp_path / "corpus.yaml"), monkeypatch)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(p) for p in files if _payload(tmp_path / "a" / p) != _payload(tmp_path / "b" / p)]
    shutil.rmtree(tmp_path / "b")
    assert len(files) > 20
    assert not differ, f"differing outputs: {differ}"
    return f"{len(files)} output files byte-identical across reruns"
