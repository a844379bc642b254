"""LDL^T covariance composition and the Gaussian KL divergence."""

from __future__ import annotations

import numpy as np

from .autograd import Var


class NotPositiveDefinite(ValueError):
    pass


def n_cholesky_params(m: int) -> int:
    return (m * m - m) // 2 + m


def unitriangular(l, m: int) -> np.ndarray:
    """Lower unitriangular matrices filled row-major from ``l`` (shape ``(..., (m^2-m)/2)``)."""
    l = np.asarray(l, dtype=float)
    out = np.zeros(l.shape[:-1] + (m, m))
    rows, cols = np.tril_indices(m, -1)
    out[..., rows, cols] = l
    out[..., range(m), range(m)] = 1.0
    return out


def split_params(v, m: int):
    v = np.asarray(v, dtype=float)
    nl = (m * m - m) // 2
    return v[..., :nl], v[..., nl:nl + m]


def compose_covariance(l, d) -> np.ndarray:
    """``L(l) diag(exp(d)) L(l)^T``; batched over leading axes."""
    d = np.asarray(d, dtype=float)
    m = d.shape[-1]
    lo = unitriangular(l, m)
    return (lo * np.exp(d)[..., None, :]) @ np.swapaxes(lo, -1, -2)


def _check_pd(a, name):
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"{name} is not positive definite") from exc


def kl_divergence(target, mean_target, predicted, mean_predicted) -> float:
    """``KL(N(mean_target, target) || N(mean_predicted, predicted))``."""
    s = np.asarray(target, dtype=float)
    sp = np.asarray(predicted, dtype=float)
    _check_pd(s, "target covariance")
    _check_pd(sp, "predicted covariance")
    m = s.shape[0]
    dm = np.asarray(mean_predicted, dtype=float) - np.asarray(mean_target, dtype=float)
    sp_inv_s = np.linalg.solve(sp, s)
    maha = dm @ np.linalg.solve(sp, dm)
    _, ld_p = np.linalg.slogdet(sp)
    _, ld_t = np.linalg.slogdet(s)
    return float(0.5 * (np.trace(sp_inv_s) + maha - m + ld_p - ld_t))


def cholesky_kl(out: Var, targets, m: int):
    """Mean zero-mean KL between ``targets`` and the covariances encoded by ``out``.

    ``out`` rows are ``[l, d]``; the gradient is taken analytically through
    ``L^-1``, which avoids forming the predicted covariance's inverse.
    Returns the scalar loss node and the per-sample divergences.
    """
    targets = np.asarray(targets, dtype=float)
    b = out.value.shape[0]
    l, d = split_params(out.value, m)
    lo = unitriangular(l, m)
    lo_inv = np.linalg.inv(lo)
    a = lo_inv @ targets @ np.swapaxes(lo_inv, -1, -2)
    a_diag = np.diagonal(a, axis1=-2, axis2=-1)
    exp_neg = np.exp(-d)
    _, ld_t = np.linalg.slogdet(targets)
    kl = 0.5 * ((exp_neg * a_diag).sum(-1) - m + d.sum(-1) - ld_t)

    def back(g):
        g = float(g) / b
        gd = 0.5 * (1.0 - exp_neg * a_diag)
        # dKL/dSigma_pred = (P - P S P) / 2 with P = L^-T D^-1 L^-1
        p = (np.swapaxes(lo_inv, -1, -2) * exp_neg[..., None, :]) @ lo_inv
        gs = 0.5 * (p - p @ targets @ p)
        gl_full = 2.0 * (gs @ lo) * np.exp(d)[..., None, :]
        rows, cols = np.tril_indices(m, -1)
        gl = gl_full[:, rows, cols]
        return (g * np.concatenate([gl, gd], axis=1),)

    return Var(np.array(kl.mean()), (out,), back), kl
