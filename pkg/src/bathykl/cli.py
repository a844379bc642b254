"""Command-line front end: synth, mc-dataset, train, predict, slam-eval, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cloud, config, experiment, mccov, slam, synthworld
from .net import autograd, checkpoint, loss, model as netmodel, train as nettrain
from .register import GicpConfig

log = logging.getLogger("bathykl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header_lines, columns, rows) -> None:
    buf = io.StringIO()
    for h in header_lines:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def plan_from(cfg) -> synthworld.SurveyPlan:
    w = config.section(cfg, "world")
    return synthworld.SurveyPlan(
        n_lines=w["n_lines"] if w["mode"] == "survey" else 1, line_length=w["line_length"],
        line_spacing=w["line_spacing"], heading=w["heading"], swath_width=w["swath_width"],
        ping_spacing=w["ping_spacing"], beams_per_ping=w["beams_per_ping"], beam_jitter=w["beam_jitter"])


def gicp_from(cfg) -> GicpConfig:
    m = config.section(cfg, "mc")
    return GicpConfig(max_iterations=m["gicp_max_iterations"], translation_tolerance=m["gicp_tolerance"],
                      max_correspondence_distance=m["gicp_max_distance"], k_neighbors=m["gicp_k"],
                      epsilon_plane=m["gicp_epsilon"])


def model_cfg_from(cfg) -> netmodel.ModelConfig:
    m = config.section(cfg, "model")
    return netmodel.ModelConfig(point_mlp_sizes=tuple(m["point_mlp_sizes"]), head_sizes=tuple(m["head_sizes"]),
                                dropout_p=m["dropout_p"], use_input_transform=m["use_input_transform"],
                                use_feature_transform=m["use_feature_transform"],
                                init_variance=m["init_variance"], bn_momentum=m["bn_momentum"],
                                l_bound=m["l_bound"], d_bound=m["d_bound"])


def train_cfg_from(cfg) -> nettrain.TrainConfig:
    t = config.section(cfg, "train")
    return nettrain.TrainConfig(seed=cfg["seed"], **t)


def settings_from(cfg) -> experiment.SlamSettings:
    s = config.section(cfg, "slam")
    return experiment.SlamSettings(coverage=s["coverage"], a=cfg["mc.a"], rc_yaw=s["rc_yaw"], rc_xy=s["rc_xy"],
                                   dr_sigma_xy=s["dr_sigma_xy"], dr_sigma_yaw=s["dr_sigma_yaw"],
                                   map_cell=s["map_cell"], max_iterations=s["max_iterations"])


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out = _out(args)
    w = config.section(cfg, "world")
    plan = plan_from(cfg)
    seed = cfg["seed"]
    if w["mode"] == "corpus":
        styles = (w["style"],) if w["style"] != "mixed" else ("mixed", "flat", "ridges", "bumps", "rough")
        submaps, fields = synthworld.generate_corpus(w["n_submaps"], seed, plan, w["submap_length"], styles)
        survey = synthworld.Survey(submaps, [s.frame for s in submaps], [0] * len(submaps))
    else:
        f = synthworld.random_field(seed, synthworld.survey_extent(plan), w["style"])
        survey = synthworld.simulate_survey(f, plan, w["submap_length"], seed=seed)
        fields = [f]
    sub_dir = out / "submaps"
    sub_dir.mkdir(exist_ok=True)
    ext = "bin" if w["binary"] else "txt"
    files = []
    for s in survey.submaps:
        fn = Path("submaps") / f"{s.id:05d}.{ext}"
        cloud.write_submap(s, out / fn, binary=w["binary"])
        files.append(fn)
    synthworld.write_manifest(out / "survey.json", fields, plan, w["submap_length"], survey, files,
                              {"provenance": config.provenance(cfg, "synth"), "mode": w["mode"]})
    sz = [{"id": s.id, "n_points": len(s), "sigma_z": cloud.sigma_z(s)} for s in survey.submaps]
    write_csv(out / "sigma_z.csv", config.provenance(cfg, "synth"), ["id", "n_points", "sigma_z"], sz)
    v = np.array([r["sigma_z"] for r in sz])
    print(f"{len(sz)} submaps; sigma_z min {v.min():.4f} median {np.median(v):.4f} max {v.max():.4f}")
    return EXIT_OK


def _load_survey(path):
    try:
        return synthworld.read_manifest(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read survey manifest {path}: {exc}") from exc


def cmd_mc_dataset(args, cfg) -> int:
    out = _out(args)
    _, survey = _load_survey(args.manifest)
    m = config.section(cfg, "mc")
    prior = mccov.PerturbationPrior(m["a"])
    mcfg = mccov.McConfig(m["iterations"], tuple(m["sigma_xyz"]), cfg["seed"], m["max_failure_fraction"])
    path = out / "dataset.jsonl"
    head = [f"# {h}" for h in config.provenance(cfg, "mc-dataset")]
    done = set()
    if path.exists():
        lines = path.read_text().splitlines()
        if [ln for ln in lines if ln.startswith("#")] != head:
            raise config.ConfigError(f"{path} was produced with a different configuration")
        done = {r["id"] for r in mccov.read_dataset_manifest(path)}
    else:
        path.write_text("\n".join(head) + "\n")
    todo = [s for s in survey.submaps if s.id not in done]
    (out / "clouds").mkdir(exist_ok=True)
    print(f"{len(done)} entries already present, {len(todo)} to compute")

    def save(e):
        fn = Path("clouds") / f"{e.submap_id:05d}.npy"
        np.save(out / fn, e.cloud.points)
        with open(path, "a") as f:
            f.write(mccov.dataset_record(e, fn) + "\n")

    mccov.build_dataset(todo, prior, mcfg, gicp_from(cfg), m["voxel_size"], args.threads, on_entry=save)
    return EXIT_OK


def load_dataset(path):
    path = Path(path)
    try:
        recs = mccov.read_dataset_manifest(path)
        clouds = [np.load(path.parent / r["cloud_file"]) for r in recs]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not recs:
        raise mccov.EmptyDataset(f"{path} holds no entries")
    return [r["id"] for r in recs], clouds, np.array([r["q"] for r in recs])


def cmd_train(args, cfg) -> int:
    out = _out(args)
    _, clouds, targets = load_dataset(args.dataset)
    tcfg = train_cfg_from(cfg)
    net = netmodel.PointNetKL(model_cfg_from(cfg), seed=cfg["seed"])
    t0 = time.perf_counter()

    def progress(h):
        if h["episode"] % 10 == 0:
            print(f"episode {h['episode']} train {h['train_loss']:.4f} val {h['val_loss']:.4f}", flush=True)

    res = nettrain.train(net, tcfg, (clouds, targets), progress)
    targets = nettrain.floor_covariances(targets, tcfg.target_floor)
    vt = targets[res.val_idx]
    cq = mccov.constant_q(targets[res.train_idx])
    zero = np.zeros(2)
    metrics = {
        "episodes": len(res.history),
        "best_episode": res.best_episode,
        "initial_val_kl": res.extra["initial_val_kl"],
        "episode0_val_kl": res.extra["episode0_val_kl"],
        "best_val_loss": res.best_val,
        "val_kl": res.extra["best_val_kl"],
        "constq_val_kl": float(np.mean([loss.kl_divergence(q, zero, cq, zero) for q in vt])),
        "stopped_early": int(res.stopped_early),
    }
    prov = config.provenance(cfg, "train")
    write_csv(out / "loss.csv", prov, ["episode", "train_loss", "val_loss"], res.history)
    write_csv(out / "metrics.csv", prov, list(metrics), [metrics])
    checkpoint.save_checkpoint(net, out / "model.pnkl", res.best_episode, res.best_val,
                               {"config_hash": config.config_hash(cfg)})
    print(json.dumps(metrics, sort_keys=True))
    log.info("training took %.1f s", time.perf_counter() - t0)
    return EXIT_OK


def _load_model(path):
    try:
        net, _ = checkpoint.load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return net


def cmd_predict(args, cfg) -> int:
    out = _out(args)
    net = _load_model(args.checkpoint)
    rows = []
    for k, f in enumerate(args.submaps):
        try:
            s = cloud.read_submap(f, k)
        except OSError as exc:
            raise DataError(f"cannot read submap {f}: {exc}") from exc
        t = time.perf_counter()
        q = net.predict(s, cfg["mc.voxel_size"])
        wall = time.perf_counter() - t
        rows.append({"index": k, "file": str(f), "n_points": len(s), "q_xx": q[0, 0], "q_xy": q[0, 1],
                     "q_yy": q[1, 1], "wall_time": wall})
    cols = ["index", "file", "n_points", "q_xx", "q_xy", "q_yy", "wall_time"]
    write_csv(out / "predictions.csv", config.provenance(cfg, "predict"), cols, rows)
    return EXIT_OK


def cmd_slam_eval(args, cfg) -> int:
    out = _out(args)
    _, survey = _load_survey(args.manifest)
    net = _load_model(args.checkpoint)
    trials = args.trials if args.trials is not None else cfg["slam.trials"]
    if trials < 1:
        raise config.ConfigError("trials must be >= 1")
    gicp = gicp_from(cfg)
    prior = mccov.PerturbationPrior(cfg["mc.a"])
    mc, const = experiment.mc_sources(survey.submaps, cfg["slam.mc_iterations"], prior, gicp, cfg["seed"],
                                      cfg["mc.sigma_xyz"])
    ours, _ = experiment.learned_sources(net, survey.submaps, cfg["mc.voxel_size"])
    sources = {"mc": mc, "constq": const, "ours": ours}
    rows, tracks = experiment.run_trials(survey.submaps, survey.poses, sources, trials, cfg["seed"],
                                         settings_from(cfg), gicp, args.threads)
    prov = config.provenance(cfg, "slam-eval")
    cols = list(experiment.COLUMNS)
    write_csv(out / "results.csv", prov, cols, rows + [experiment.mean_row(rows)])
    trows = []
    for k in range(len(tracks["gt"])):
        r = {"node": k}
        for name, nodes in tracks.items():
            r[f"{name}_x"], r[f"{name}_y"] = nodes[k, 0], nodes[k, 1]
        trows.append(r)
    write_csv(out / "trajectories.csv", prov, list(trows[0]), trows)
    qrows = [{"id": i, "method": m, "q_xx": q[0, 0], "q_xy": q[0, 1], "q_yy": q[1, 1]}
             for m, src in sources.items() for i, q in sorted(src.items())]
    write_csv(out / "covariances.csv", prov, ["id", "method", "q_xx", "q_xy", "q_yy"], qrows)
    mean = experiment.mean_row(rows)
    print(" ".join(f"{c}={mean[c]:.3f}" for c in cols[1:]))
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "bathykl"
    out = _out(args)
    made = 0
    for d in args.inputs:
        d = Path(d)
        if (d / "loss.csv").exists():
            h = read_csv(d / "loss.csv")
            ep = [int(r["episode"]) for r in h]
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(ep, [float(r["train_loss"]) for r in h], label="train")
            ax.plot(ep, [float(r["val_loss"]) for r in h], label="validation")
            ax.set_xlabel("episode")
            ax.set_ylabel("mean KL divergence")
            ax.legend()
            fig.savefig(out / f"{d.name}_loss.svg", metadata={"Date": None})
            plt.close(fig)
            made += 1
        if (d / "trajectories.csv").exists():
            t = read_csv(d / "trajectories.csv")
            names = sorted({c[:-2] for c in t[0] if c.endswith("_x")})
            fig, ax = plt.subplots(figsize=(6, 6))
            for n in names:
                ax.plot([float(r[f"{n}_x"]) for r in t], [float(r[f"{n}_y"]) for r in t], marker=".", label=n)
            ax.set_aspect("equal")
            ax.set_xlabel("x (m)")
            ax.set_ylabel("y (m)")
            ax.legend()
            fig.savefig(out / f"{d.name}_trajectories.svg", metadata={"Date": None})
            plt.close(fig)
            made += 1
    if not made:
        raise DataError("no loss.csv or trajectories.csv found in the given directories")
    print(f"wrote {made} figure(s) to {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bathykl", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of dotted keys")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--trials", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate terrain and submaps")
    s = sub.add_parser("mc-dataset", parents=[common], help="Monte-Carlo target covariances")
    s.add_argument("manifest")
    s = sub.add_parser("train", parents=[common], help="train the covariance network")
    s.add_argument("dataset")
    s = sub.add_parser("predict", parents=[common], help="predict covariances for submap files")
    s.add_argument("checkpoint")
    s.add_argument("submaps", nargs="+")
    s = sub.add_parser("slam-eval", parents=[common], help="compare covariance sources in graph SLAM")
    s.add_argument("manifest")
    s.add_argument("checkpoint")
    s = sub.add_parser("report", parents=[common], help="SVG figures from run directories")
    s.add_argument("inputs", nargs="+")
    return p


COMMANDS = {"synth": cmd_synth, "mc-dataset": cmd_mc_dataset, "train": cmd_train, "predict": cmd_predict,
            "slam-eval": cmd_slam_eval, "report": cmd_report}

DATA_ERRORS = (DataError, OSError, cloud.DegenerateCloud, mccov.EmptyDataset, mccov.SubmapError,
               checkpoint.CheckpointError, slam.GraphFormatError, slam.NoOverlap, slam.LengthMismatch,
               synthworld.EmptySurvey, netmodel.EmptyCloud)
NUMERIC_ERRORS = (autograd.NonFiniteGradient, loss.NotPositiveDefinite, slam.SingularSystem,
                  mccov.RegistrationFailures, mccov.InsufficientIterations, FloatingPointError,
                  np.linalg.LinAlgError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads < 1:
            raise config.ConfigError("--threads must be >= 1")
        cfg = config.load(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (config.ConfigError, nettrain.TrainConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except mccov.SubmapError as exc:
        code = EXIT_NUMERIC if isinstance(exc.cause, NUMERIC_ERRORS) else EXIT_DATA
        print(f"{'numerical failure' if code == EXIT_NUMERIC else 'data error'}: {exc}", file=sys.stderr)
        return code
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining validation errors come from configuration values
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
