"""A small reverse-mode autodiff over numpy arrays.

Only the handful of fused operations the point network needs are provided;
each op stores what its backward pass needs in a closure.
"""

from __future__ import annotations

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def backward(self, seed=None):
        order, seen = [], set()

        def visit(v):
            stack = [(v, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.value) if seed is None else seed
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            for p, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def linear(x: Var, w: Var, b: Var) -> Var:
    def back(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)
    return Var(x.value @ w.value + b.value, (x, w, b), back)


def relu(x: Var) -> Var:
    mask = x.value > 0

    def back(g):
        return (g * mask,)
    return Var(x.value * mask, (x,), back)


def soft_clip(x: Var, bound) -> Var:
    """``bound * tanh(x / bound)``: identity near zero, saturating at ``+-bound``."""
    t = np.tanh(x.value / bound)

    def back(g):
        return (g * (1.0 - t * t),)
    return Var(bound * t, (x,), back)


def scale_mask(x: Var, mask) -> Var:
    """Element-wise product with a constant (inverted-dropout mask)."""
    def back(g):
        return (g * mask,)
    return Var(x.value * mask, (x,), back)


def batch_norm(x: Var, gamma: Var, beta: Var, running: dict | None, use_batch_stats: bool,
               momentum: float = 0.1, eps: float = 1e-5, update_running: bool = True) -> Var:
    """Normalise each column over the rows.

    With ``use_batch_stats`` the batch mean and biased variance are used (and
    folded into ``running`` by exponential averaging); otherwise the running
    statistics are treated as constants.
    """
    xv = x.value
    if use_batch_stats:
        n = xv.shape[0]
        mean = xv.mean(axis=0)
        var = xv.var(axis=0)
        if running is not None and update_running:
            unbiased = var * n / (n - 1) if n > 1 else var
            running["mean"] *= 1.0 - momentum
            running["mean"] += momentum * mean
            running["var"] *= 1.0 - momentum
            running["var"] += momentum * unbiased
    else:
        mean, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    out = gamma.value * xhat + beta.value

    def back(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gx_hat = g * gamma.value
        if use_batch_stats:
            n = xv.shape[0]
            gx = inv / n * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
        else:
            gx = gx_hat * inv
        return gx, ggamma, gbeta

    return Var(out, (x, gamma, beta), back)


def segment_max(x: Var, offsets) -> Var:
    """Column-wise max over each row segment ``offsets[i]:offsets[i+1]``."""
    xv = x.value
    nseg = len(offsets) - 1
    arg = np.empty((nseg, xv.shape[1]), dtype=np.int64)
    for i in range(nseg):
        arg[i] = offsets[i] + np.argmax(xv[offsets[i]:offsets[i + 1]], axis=0)
    cols = np.arange(xv.shape[1])
    out = xv[arg, cols]

    def back(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, (arg, np.broadcast_to(cols, arg.shape)), g)
        return (gx,)

    return Var(out, (x,), back)


def segment_transform(x: Var, mats: Var, offsets) -> Var:
    """Right-multiply the rows of segment ``i`` by ``mats[i]``."""
    xv, mv = x.value, mats.value
    out = np.empty((xv.shape[0], mv.shape[2]))
    for i in range(len(offsets) - 1):
        s, e = offsets[i], offsets[i + 1]
        out[s:e] = xv[s:e] @ mv[i]

    def back(g):
        gx = np.empty_like(xv)
        gm = np.empty_like(mv)
        for i in range(len(offsets) - 1):
            s, e = offsets[i], offsets[i + 1]
            gx[s:e] = g[s:e] @ mv[i].T
            gm[i] = xv[s:e].T @ g[s:e]
        return gx, gm

    return Var(out, (x, mats), back)


def to_square_plus_identity(v: Var, k: int) -> Var:
    """Reshape ``(B, k*k)`` rows into ``(B, k, k)`` matrices and add the identity."""
    out = v.value.reshape(-1, k, k) + np.eye(k)

    def back(g):
        return (g.reshape(v.value.shape),)
    return Var(out, (v,), back)
