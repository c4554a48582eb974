"""Representation-learning losses and their analytic gradients.

All functions take batched arrays (one row per sample) and return
``(value, gradient)`` pairs; gradients are with respect to the array inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, LabelError, NumericError, ShapeError

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Prototypes:
    vectors: np.ndarray  # (C, d); rows of absent classes are zero
    counts: np.ndarray  # (C,)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0


@dataclass(frozen=True)
class LossBreakdown:
    l_k: float = 0.0
    l_v: float = 0.0
    l_gtc: float = 0.0
    l_mse: float = 0.0
    l_kl: float = 0.0
    weighted_total: float = 0.0
    alpha_k: float = 1.0
    alpha_v: float = 1.0
    alpha_gtc: float = 1.0
    beta_kl: float = 0.1


def _check_labels(labels, n, num_classes):
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.size != n:
        raise ShapeError("one label per sample required")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return y


def compute_prototypes(z: np.ndarray, labels, num_classes: int) -> Prototypes:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[0] == 0:
        raise DegenerateBatchError("empty batch")
    y = _check_labels(labels, z.shape[0], num_classes)
    counts = np.bincount(y, minlength=num_classes)
    sums = np.zeros((num_classes, z.shape[1]))
    np.add.at(sums, y, z)
    vecs = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], 0.0)
    return Prototypes(vecs, counts)


def _cosine_matrix(z, p):
    nz = np.maximum(np.linalg.norm(z, axis=1), _NORM_FLOOR)
    np_ = np.maximum(np.linalg.norm(p, axis=1), _NORM_FLOOR)
    s = (z @ p.T) / nz[:, None] / np_[None, :]
    return s, nz, np_


def loss_causal(z: np.ndarray, labels, num_classes: int, prototypes: Prototypes | None = None,
                exclude_target: bool = False) -> tuple[float, np.ndarray]:
    """Prototypical cross-entropy over cosine-similarity logits.

    If ``prototypes`` is None they are the batch class means and the returned
    gradient includes the path through them; supplied prototypes are treated
    as constants.  ``exclude_target`` drops the target class from the
    softmax denominator (literal variant; not a proper cross-entropy).
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = _check_labels(labels, z.shape[0], num_classes)
    through = prototypes is None
    protos = compute_prototypes(z, y, num_classes) if through else prototypes
    present = np.flatnonzero(protos.present)
    if present.size < 2:
        raise DegenerateBatchError("prototype loss needs at least two classes in the batch")
    if not np.all(protos.present[y]):
        raise DegenerateBatchError("a sample's class has no prototype")
    P = protos.vectors[present]
    col = np.searchsorted(present, y)
    B = z.shape[0]
    rows = np.arange(B)

    s, nz, npn = _cosine_matrix(z, P)
    if exclude_target:
        mask = np.ones_like(s, dtype=bool)
        mask[rows, col] = False
        m = np.where(mask, s, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(s - m), 0.0)
        lse = m[:, 0] + np.log(e.sum(axis=1))
        loss_i = -s[rows, col] + lse
        g_s = e / e.sum(axis=1, keepdims=True)
    else:
        m = s.max(axis=1, keepdims=True)
        e = np.exp(s - m)
        lse = m[:, 0] + np.log(e.sum(axis=1))
        loss_i = -s[rows, col] + lse
        g_s = e / e.sum(axis=1, keepdims=True)
    g_s[rows, col] -= 1.0
    g_s /= B

    # d s_ic / d z_i = p_c/(|z||p|) - s_ic z_i/|z|^2 ; symmetric for p_c
    zn = z / nz[:, None]
    pn = P / npn[:, None]
    g_z = (g_s @ pn) / nz[:, None] - (g_s * s).sum(axis=1)[:, None] * zn / nz[:, None]
    if through:
        g_p = (g_s.T @ zn) / npn[:, None] - (g_s * s).sum(axis=0)[:, None] * pn / npn[:, None]
        counts = protos.counts[present]
        g_z += g_p[col] / counts[col][:, None]
    return float(loss_i.mean()), g_z


def loss_noncausal(z: np.ndarray, labels, num_classes: int, eps: float = 1e-4) -> tuple[float, np.ndarray]:
    """Hinge on the per-class spread ``mean(max(0, 1 - sqrt(Var_c + eps)))``.

    Classes with fewer than two samples in the batch are excluded.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = _check_labels(labels, z.shape[0], num_classes)
    counts = np.bincount(y, minlength=num_classes)
    eligible = np.flatnonzero(counts >= 2)
    if eligible.size == 0:
        raise DegenerateBatchError("no class has two or more samples")
    grad = np.zeros_like(z)
    total = 0.0
    for c in eligible:
        idx = np.flatnonzero(y == c)
        zc = z[idx]
        centred = zc - zc.mean(axis=0)
        var = float((centred ** 2).sum(axis=1).mean())
        root = np.sqrt(var + eps)
        if root < 1.0:
            total += 1.0 - root
            if root > 0.0:
                # d Var / d z_i = 2 (z_i - mean) / n_c
                grad[idx] = -(1.0 / (2.0 * root)) * 2.0 * centred / idx.size
    k = eligible.size
    return total / k, grad / k


def loss_classification(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    B, C = logits.shape
    y = _check_labels(labels, B, C)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    sm = e / e.sum(axis=1, keepdims=True)
    logp = logits - m - np.log(e.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), y].mean()
    grad = sm.copy()
    grad[np.arange(B), y] -= 1.0
    return float(loss), grad / B


def per_sample_ce(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return -logp[np.arange(logits.shape[0]), y]


def gaussian_kl(mean: np.ndarray, logvar: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean KL(N(mean, exp(logvar)) || N(0, I)) and its gradients."""
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    if not np.all(np.isfinite(logvar)):
        raise NumericError("non-finite log-variance")
    B = mean.shape[0]
    em1 = np.expm1(logvar)
    # expm1 avoids cancellation in exp(lv) - 1 - lv near lv = 0
    kl = 0.5 * (mean ** 2 + np.maximum(em1 - logvar, 0.0)).sum() / B
    return float(kl), mean / B, 0.5 * em1 / B


def loss_reconstruction(x, x_hat, means, logvars, beta_kl: float = 0.1, kl_sign: float = 1.0):
    """``mean(|x - x_hat|^2 / dim) + kl_sign * beta_kl * KL`` over every latent block.

    ``means`` and ``logvars`` are sequences of (B, d) arrays, one per block.
    Returns ``(total, mse, kl, grad_x_hat, grad_means, grad_logvars)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {x.shape} and reconstruction {x_hat.shape} differ")
    B, dim = x.shape
    diff = x_hat - x
    mse = float((diff ** 2).sum() / (B * dim))
    g_xhat = 2.0 * diff / (B * dim)
    kl_total, g_mu, g_lv = 0.0, [], []
    for mu, lv in zip(means, logvars):
        kl, gm, gl = gaussian_kl(mu, lv)
        kl_total += kl
        g_mu.append(kl_sign * beta_kl * gm)
        g_lv.append(kl_sign * beta_kl * gl)
    total = mse + kl_sign * beta_kl * kl_total
    return total, mse, kl_total, g_xhat, g_mu, g_lv
