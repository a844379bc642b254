"""Permutation-invariant point network with a Cholesky covariance head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import cloud
from . import autograd as ag
from .loss import cholesky_kl, compose_covariance, n_cholesky_params, split_params


class EmptyCloud(ValueError):
    pass


@dataclass
class ModelConfig:
    point_mlp_sizes: tuple = (64, 64, 64, 128, 1024)
    head_sizes: tuple = (1000, 1000, 1000, 1000)
    output_dim: int = 2
    dropout_p: float = 0.4
    use_input_transform: bool = False
    use_feature_transform: bool = False
    feature_transform_after: int = 1
    tnet_point_sizes: tuple = (64, 128, 1024)
    tnet_head_sizes: tuple = (512, 256)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    init_variance: float = 9.0
    # smooth bounds b * tanh(x / b) on the head outputs; they keep every
    # composed covariance well enough conditioned to stay numerically PD
    l_bound: float = 10.0
    d_bound: float = 10.0

    def __post_init__(self):
        self.point_mlp_sizes = tuple(int(v) for v in self.point_mlp_sizes)
        self.head_sizes = tuple(int(v) for v in self.head_sizes)
        self.tnet_point_sizes = tuple(int(v) for v in self.tnet_point_sizes)
        self.tnet_head_sizes = tuple(int(v) for v in self.tnet_head_sizes)
        if not self.point_mlp_sizes or self.output_dim < 1:
            raise ValueError("need at least one point layer and output_dim >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.init_variance <= 0:
            raise ValueError("init_variance must be positive")
        if not (self.l_bound > 0 and self.d_bound > abs(np.log(self.init_variance))):
            raise ValueError("l_bound must be positive and d_bound must exceed |ln(init_variance)|")

    @property
    def feature_dim(self) -> int:
        return self.point_mlp_sizes[-1]

    @property
    def n_outputs(self) -> int:
        return n_cholesky_params(self.output_dim)


def _offsets(clouds):
    sizes = [len(c) for c in clouds]
    if any(s == 0 for s in sizes) or not sizes:
        raise EmptyCloud("every cloud needs at least one point")
    return np.concatenate([[0], np.cumsum(sizes)])


@dataclass
class PointNetKL:
    cfg: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    params: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self._init_params(np.random.default_rng(self.seed))

    # -- parameters ---------------------------------------------------------

    def _add_linear(self, rng, name, n_in, n_out, zero=False):
        bound = 1.0 / np.sqrt(n_in)
        if zero:
            self.params[name + ".W"] = np.zeros((n_in, n_out))
            self.params[name + ".b"] = np.zeros(n_out)
        else:
            self.params[name + ".W"] = rng.uniform(-bound, bound, (n_in, n_out))
            self.params[name + ".b"] = rng.uniform(-bound, bound, n_out)

    def _add_bn(self, name, n):
        self.params[name + ".gamma"] = np.ones(n)
        self.params[name + ".beta"] = np.zeros(n)
        self.running[name] = {"mean": np.zeros(n), "var": np.ones(n)}

    def _add_block(self, rng, name, n_in, n_out):
        self._add_linear(rng, name, n_in, n_out)
        self._add_bn(name + ".bn", n_out)

    def _add_tnet(self, rng, prefix, k):
        n = k
        for i, size in enumerate(self.cfg.tnet_point_sizes):
            self._add_block(rng, f"{prefix}.point{i}", n, size)
            n = size
        for i, size in enumerate(self.cfg.tnet_head_sizes):
            self._add_block(rng, f"{prefix}.fc{i}", n, size)
            n = size
        self._add_linear(rng, f"{prefix}.out", n, k * k, zero=True)

    def _init_params(self, rng):
        c = self.cfg
        if c.use_input_transform:
            self._add_tnet(rng, "tin", 3)
        n = 3
        for i, size in enumerate(c.point_mlp_sizes):
            self._add_block(rng, f"phi{i}", n, size)
            n = size
            if c.use_feature_transform and i == c.feature_transform_after:
                self._add_tnet(rng, "tfeat", size)
        for i, size in enumerate(c.head_sizes):
            self._add_block(rng, f"psi{i}", n, size)
            n = size
        self._add_linear(rng, "out", n, c.n_outputs, zero=True)
        nl = c.n_outputs - c.output_dim
        self.params["out.b"][nl:] = c.d_bound * np.arctanh(np.log(c.init_variance) / c.d_bound)

    @property
    def out_bound(self):
        c = self.cfg
        return np.r_[np.full(c.n_outputs - c.output_dim, c.l_bound), np.full(c.output_dim, c.d_bound)]

    @property
    def decay_names(self):
        """Linear weight matrices; biases and batch-norm parameters are not decayed."""
        return [k for k in self.params if k.endswith(".W")]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy_state(self):
        return ({k: v.copy() for k, v in self.params.items()},
                {k: {s: a.copy() for s, a in v.items()} for k, v in self.running.items()})

    def load_state(self, state):
        params, running = state
        self.params = {k: v.copy() for k, v in params.items()}
        self.running = {k: {s: a.copy() for s, a in v.items()} for k, v in running.items()}

    # -- forward ------------------------------------------------------------

    def _block(self, leaves, name, x, train, bn_batch, update_running, mask=None):
        p = self.params
        for key in (name + ".W", name + ".b", name + ".bn.gamma", name + ".bn.beta"):
            leaves.setdefault(key, ag.Var(p[key], name=key))
        h = ag.linear(x, leaves[name + ".W"], leaves[name + ".b"])
        h = ag.batch_norm(h, leaves[name + ".bn.gamma"], leaves[name + ".bn.beta"],
                          self.running[name + ".bn"], bn_batch, self.cfg.bn_momentum,
                          self.cfg.bn_eps, update_running)
        if mask is not None:
            h = ag.scale_mask(h, mask)
        return ag.relu(h)

    def _linear(self, leaves, name, x):
        for key in (name + ".W", name + ".b"):
            leaves.setdefault(key, ag.Var(self.params[key], name=key))
        return ag.linear(x, leaves[name + ".W"], leaves[name + ".b"])

    def _tnet(self, leaves, prefix, x, offsets, k, bn_batch, update_running):
        h = x
        for i in range(len(self.cfg.tnet_point_sizes)):
            h = self._block(leaves, f"{prefix}.point{i}", h, False, bn_batch, update_running)
        h = ag.segment_max(h, offsets)
        for i in range(len(self.cfg.tnet_head_sizes)):
            h = self._block(leaves, f"{prefix}.fc{i}", h, False, bn_batch, update_running)
        return ag.to_square_plus_identity(self._linear(leaves, f"{prefix}.out", h), k)

    def _features(self, leaves, clouds, bn_batch, update_running):
        offsets = _offsets(clouds)
        x = ag.Var(np.concatenate([np.asarray(c, dtype=float).reshape(-1, 3) for c in clouds]))
        c = self.cfg
        if c.use_input_transform:
            x = ag.segment_transform(x, self._tnet(leaves, "tin", x, offsets, 3, bn_batch,
                                                   update_running), offsets)
        for i, size in enumerate(c.point_mlp_sizes):
            x = self._block(leaves, f"phi{i}", x, False, bn_batch, update_running)
            if c.use_feature_transform and i == c.feature_transform_after:
                t = self._tnet(leaves, "tfeat", x, offsets, size, bn_batch, update_running)
                x = ag.segment_transform(x, t, offsets)
        return ag.segment_max(x, offsets)

    def _head(self, leaves, z, train, bn_batch, update_running, rng):
        h = z
        p = self.cfg.dropout_p
        for i, size in enumerate(self.cfg.head_sizes):
            mask = None
            if train and p > 0:
                rng = rng if rng is not None else np.random.default_rng()
                mask = (rng.random((h.shape[0], size)) >= p) / (1.0 - p)
            h = self._block(leaves, f"psi{i}", h, train, bn_batch, update_running, mask)
        return ag.soft_clip(self._linear(leaves, "out", h), self.out_bound)

    def forward(self, clouds, mode: str = "eval", rng=None, update_running: bool = True,
                frozen_bn: bool = False):
        """Raw head outputs ``(B, n_outputs)`` and the parameter leaves used.

        ``mode`` is ``train`` (batch statistics, dropout) or ``eval`` (running
        statistics, no dropout).  ``frozen_bn`` keeps running statistics in
        train mode.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        train = mode == "train"
        bn_batch = train and not frozen_bn
        leaves = {}
        z = self._features(leaves, clouds, bn_batch, update_running and bn_batch)
        out = self._head(leaves, z, train, bn_batch, update_running and bn_batch, rng)
        return out, leaves

    def forward_feature(self, clouds, mode: str = "eval") -> np.ndarray:
        if isinstance(clouds, np.ndarray) and clouds.ndim == 2:
            clouds = [clouds]
        leaves = {}
        bn_batch = mode == "train"
        return self._features(leaves, clouds, bn_batch, False).value

    def forward_head(self, features, mode: str = "eval", rng=None) -> np.ndarray:
        leaves = {}
        train = mode == "train"
        z = ag.Var(np.atleast_2d(np.asarray(features, dtype=float)))
        return self._head(leaves, z, train, train, False, rng).value

    # -- loss ---------------------------------------------------------------

    def loss(self, clouds, targets, mode: str = "eval", rng=None, update_running: bool = False):
        out, _ = self.forward(clouds, mode, rng, update_running)
        node, per = cholesky_kl(out, targets, self.cfg.output_dim)
        return float(node.value), per

    def loss_and_grad(self, clouds, targets, rng=None, update_running: bool = True,
                      frozen_bn: bool = False):
        """Train-mode mean KL and its exact gradient for every parameter."""
        out, leaves = self.forward(clouds, "train", rng, update_running, frozen_bn)
        node, per = cholesky_kl(out, targets, self.cfg.output_dim)
        node.backward()
        grads = {}
        for k in self.params:
            g = leaves[k].grad if k in leaves else None
            grads[k] = np.zeros_like(self.params[k]) if g is None else g
            if not np.all(np.isfinite(grads[k])):
                raise ag.NonFiniteGradient(f"non-finite gradient for {k}")
        return float(node.value), grads, per

    # -- inference ----------------------------------------------------------

    def covariances(self, clouds) -> np.ndarray:
        out, _ = self.forward(clouds, "eval")
        l, d = split_params(out.value, self.cfg.output_dim)
        return compose_covariance(l, d)

    def predict(self, submap: cloud.Submap, voxel_size: float = cloud.DEFAULT_VOXEL) -> np.ndarray:
        nc = cloud.preprocess(submap, voxel_size)
        return self.covariances([nc.points])[0]
