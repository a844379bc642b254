"""Episode-based training with random subset sampling and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import PointNetKL
from .optim import AmsGradState, amsgrad_step

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 500
    validation_fraction: float = 0.2
    patience: int = 20
    max_episodes: int = 2000
    seed: int = 0
    target_floor: float = 1e-6
    augment: bool = False
    val_batch_size: int = 0  # 0 means batch_size

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise TrainConfigError("validation_fraction must be in (0, 1)")
        if self.patience < 1:
            raise TrainConfigError("patience must be >= 1")
        for name in ("learning_rate", "batch_size", "max_episodes"):
            if not getattr(self, name) > 0:
                raise TrainConfigError(f"{name} must be positive")
        if self.val_batch_size < 0:
            raise TrainConfigError("val_batch_size must be >= 0")
        if self.weight_decay < 0 or self.target_floor < 0:
            raise TrainConfigError("weight_decay and target_floor must be >= 0")


@dataclass
class TrainResult:
    model: PointNetKL
    history: list
    best_episode: int
    best_val: float
    train_idx: np.ndarray
    val_idx: np.ndarray
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def floor_covariances(qs, floor: float) -> np.ndarray:
    """Raise eigenvalues below ``floor`` so every target is positive definite."""
    qs = np.asarray(qs, dtype=float)
    w, v = np.linalg.eigh(0.5 * (qs + np.swapaxes(qs, -1, -2)))
    w = np.maximum(w, floor)
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


def symmetry(op: int):
    """Planar part ``A`` (2x2) and z sign of symmetry ``op`` in ``0..15``.

    Bits 0 and 1 mirror x and y, bit 2 swaps x and y, bit 3 flips z.  The
    registration problem is unchanged by these maps up to ``Q -> A Q A^T``:
    footprint, voxel grid and sensor noise are all symmetric under them.
    """
    a = np.diag([(-1.0) ** (op & 1), (-1.0) ** ((op >> 1) & 1)])
    if op & 4:
        a = a[[1, 0]]
    return a, (-1.0 if op & 8 else 1.0)


def augment(clouds, targets, ops):
    """Apply ``symmetry(op)`` to each (cloud, target) pair."""
    out_c, out_t = [], np.empty_like(targets)
    for j, (c, q, op) in enumerate(zip(clouds, targets, ops)):
        a, zs = symmetry(int(op))
        m = np.eye(3)
        m[:2, :2] = a
        m[2, 2] = zs
        out_c.append(np.asarray(c) @ m.T)
        out_t[j] = a @ q @ a.T
    return out_c, out_t


def split_indices(n: int, validation_fraction: float, seed: int):
    if n < 2:
        raise TrainConfigError("need at least two entries to split train/validation")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(n)
    n_val = min(n - 1, max(1, int(round(validation_fraction * n))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def mean_kl(model: PointNetKL, clouds, targets, chunk: int = 256) -> float:
    """Eval-mode mean KL over a whole set."""
    total = 0.0
    for s in range(0, len(clouds), chunk):
        _, per = model.loss(clouds[s:s + chunk], targets[s:s + chunk], "eval")
        total += per.sum()
    return float(total / len(clouds))


def unpack(dataset):
    clouds = [e.cloud.points for e in dataset]
    targets = np.array([e.target_cov for e in dataset])
    return clouds, targets


def train(model: PointNetKL, tcfg: TrainConfig, dataset, on_episode=None) -> TrainResult:
    """Fit ``model`` in place and restore its best-validation parameters.

    Each episode samples ``batch_size`` entries with replacement from the
    training split for one optimiser step (optionally mapped through a random
    symmetry of the registration problem), and as many from the validation
    split (``val_batch_size`` of them when set) to score the step.  Training
    stops after ``patience`` episodes without validation improvement.
    ``extra`` holds the eval-mode KL over the whole validation split before
    training, after episode 0 and at the end.
    """
    clouds, targets = dataset if isinstance(dataset, tuple) else unpack(dataset)
    targets = floor_covariances(targets, tcfg.target_floor)
    tr, va = split_indices(len(clouds), tcfg.validation_fraction, tcfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 2]))
    state = AmsGradState()
    decay = model.decay_names
    best_val, best_ep, best_state = np.inf, -1, model.copy_state()
    history = []
    vc, vt = [clouds[i] for i in va], targets[va]
    extra = {"initial_val_kl": mean_kl(model, vc, vt)}
    since = 0
    stopped = False
    for ep in range(tcfg.max_episodes):
        bi = tr[rng.integers(0, len(tr), tcfg.batch_size)]
        bc, bt = [clouds[i] for i in bi], targets[bi]
        if tcfg.augment:
            bc, bt = augment(bc, bt, rng.integers(0, 16, len(bi)))
        loss, grads, _ = model.loss_and_grad(bc, bt, rng)
        amsgrad_step(model.params, grads, state, tcfg.learning_rate, tcfg.weight_decay, decay)
        vi = va[rng.integers(0, len(va), tcfg.val_batch_size or tcfg.batch_size)]
        # eval-mode losses are per-sample, so each distinct draw is scored once
        uniq, counts = np.unique(vi, return_counts=True)
        _, per = model.loss([clouds[i] for i in uniq], targets[uniq], "eval")
        val = float(per @ counts / counts.sum())
        history.append({"episode": ep, "train_loss": loss, "val_loss": val})
        if ep == 0:
            extra["episode0_val_kl"] = mean_kl(model, vc, vt)
        if on_episode:
            on_episode(history[-1])
        if val < best_val:
            best_val, best_ep, best_state = val, ep, model.copy_state()
            since = 0
        else:
            since += 1
            if since >= tcfg.patience:
                stopped = True
                log.info("early stop at episode %d (best %d, val %.4f)", ep, best_ep, best_val)
                break
    model.load_state(best_state)
    extra["best_val_kl"] = mean_kl(model, vc, vt)
    return TrainResult(model, history, best_ep, float(best_val), tr, va, stopped, extra)
