"""Client-side runtimes.

``l2u_local_train`` runs one round of local disentanglement training: a
generator phase (reconstruction + prototype + hinge-variance losses on E, K,
V, D) followed by a discriminator phase (prototype + classification losses on
E and the classifier).  ``unlearn_local_update`` trains only the non-causal
featurizer and reports the parameter difference as a pseudo-gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import FORGET, RETAIN, LabeledDataset
from .errors import ConfigError, DegenerateBatchError, ShapeError
from .losses import (LossBreakdown, loss_causal, loss_classification, loss_noncausal,
                     loss_reconstruction)
from .model import (CAUSAL_ONLY, SEGMENTS, DisentangledModel, backward, extract_subnet, forward,
                    insert_subnet)
from .numerics import ParamVector, RngStream

log = logging.getLogger(__name__)

GENERATOR_SEGMENTS = ("E", "K", "V", "D")
MID_SEGMENTS = ("E", "C")
UNLEARN_LOSSES = ("classification", "rec_var")


@dataclass(frozen=True)
class LossWeights:
    rec: float = 0.0
    k: float = 0.0
    v: float = 0.0
    gtc: float = 0.0
    beta_kl: float = 0.1
    kl_sign: float = 1.0
    hinge_eps: float = 1e-4
    exclude_target: bool = False


@dataclass(frozen=True)
class L2UConfig:
    i_l2u: int = 3
    i_mid: int = 2
    lr_l2u: float = 1e-2
    lr_mid: float = 1e-2
    batch_size: int = 64
    alpha_rec: float = 1.0
    alpha_k: float = 1.0  # weight of the prototype loss in both phases
    alpha_v: float = 1.0
    alpha_gtc: float = 1.0
    beta_kl: float = 0.1
    kl_sign: float = 1.0
    hinge_eps: float = 1e-4
    exclude_target: bool = False

    def __post_init__(self):
        if self.i_l2u < 0 or self.i_mid < 0 or self.i_l2u + self.i_mid < 1:
            raise ConfigError("need i_l2u + i_mid >= 1 with both non-negative", "i_l2u")
        if self.lr_l2u <= 0 or self.lr_mid <= 0:
            raise ConfigError("learning rates must be positive", "lr_l2u")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")

    def _common(self):
        return dict(beta_kl=self.beta_kl, kl_sign=self.kl_sign, hinge_eps=self.hinge_eps,
                    exclude_target=self.exclude_target)

    def generator_weights(self) -> LossWeights:
        return LossWeights(rec=self.alpha_rec, k=self.alpha_k, v=self.alpha_v, **self._common())

    def mid_weights(self) -> LossWeights:
        return LossWeights(k=self.alpha_k, gtc=self.alpha_gtc, **self._common())


@dataclass
class ClientState:
    client_id: int
    domain_id: int
    role: str
    train: LabeledDataset
    validation: LabeledDataset
    model: DisentangledModel | None = None
    seed: int = 0
    train_accesses: int = 0  # audit counter: mini-batches drawn from ``train``

    def __post_init__(self):
        if self.role not in (RETAIN, FORGET):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class LocalUpdate:
    client_id: int
    role: str
    pseudo_grad: ParamVector
    n_samples: int
    losses: list = field(default_factory=list)


def objective(model: DisentangledModel, x, y, weights: LossWeights, segments=SEGMENTS,
              rng=None, noise=None) -> tuple[LossBreakdown, ParamVector]:
    """Weighted sum of the active loss terms and its gradient over ``segments``."""
    C = model.dims.num_classes
    use_rec = weights.rec != 0.0
    out = forward(model, x, rng=rng, stochastic=use_rec, need_decoder=use_rec, noise=noise)
    grads = {}
    parts = dict(l_k=0.0, l_v=0.0, l_gtc=0.0, l_mse=0.0, l_kl=0.0)
    total = 0.0

    def add(key, g):
        grads[key] = grads[key] + g if key in grads else g

    if weights.k != 0.0:
        lk, gk = loss_causal(out.z_k_mean, y, C, exclude_target=weights.exclude_target)
        parts["l_k"] = lk
        total += weights.k * lk
        add("z_k_mean", weights.k * gk)
    if weights.v != 0.0:
        lv, gv = loss_noncausal(out.z_v_mean, y, C, eps=weights.hinge_eps)
        parts["l_v"] = lv
        total += weights.v * lv
        add("z_v_mean", weights.v * gv)
    if weights.gtc != 0.0:
        lg, gl = loss_classification(out.logits, y)
        parts["l_gtc"] = lg
        total += weights.gtc * lg
        add("logits", weights.gtc * gl)
    if use_rec:
        lrec, mse, kl, gx, gmu, glv = loss_reconstruction(
            x, out.x_hat, [out.z_k_mean, out.z_v_mean], [out.z_k_logvar, out.z_v_logvar],
            beta_kl=weights.beta_kl, kl_sign=weights.kl_sign)
        parts["l_mse"], parts["l_kl"] = mse, kl
        total += weights.rec * lrec
        add("x_hat", weights.rec * gx)
        add("z_k_mean", weights.rec * gmu[0])
        add("z_v_mean", weights.rec * gmu[1])
        add("z_k_logvar", weights.rec * glv[0])
        add("z_v_logvar", weights.rec * glv[1])
    grad = backward(model, out, grads, segments=segments)
    bd = LossBreakdown(weighted_total=float(total), alpha_k=weights.k, alpha_v=weights.v,
                       alpha_gtc=weights.gtc, beta_kl=weights.beta_kl, **parts)
    return bd, grad


def _sgd_step(model: DisentangledModel, grad: ParamVector, lr: float, segments) -> DisentangledModel:
    vec = model.to_vector()
    new = vec.values.copy()
    for seg in vec.layout:
        if seg.name in segments:
            sl = slice(seg.offset, seg.offset + seg.length)
            new[sl] -= lr * grad.values[sl]
    return DisentangledModel.from_vector(model.dims, vec.with_values(new))


def _draw_batch(gen: np.random.Generator, n: int, batch_size: int | None) -> np.ndarray:
    if batch_size is None or batch_size >= n:
        return np.arange(n)
    return np.sort(gen.choice(n, size=batch_size, replace=False))


def _phase_step(state, model, gen, weights, segments, lr, batch_size):
    """One SGD iteration; resample once on a degenerate batch, then skip."""
    data = state.train
    for attempt in range(2):
        idx = _draw_batch(gen, len(data), batch_size)
        state.train_accesses += 1
        try:
            bd, grad = objective(model, data.inputs[idx], data.labels[idx], weights,
                                 segments=segments, rng=gen)
        except DegenerateBatchError as exc:
            if attempt == 0:
                continue
            log.warning("client %d: skipping iteration (%s)", state.client_id, exc)
            return model, None
        return _sgd_step(model, grad, lr, segments), bd
    return model, None  # unreachable


def l2u_local_train(state: ClientState, global_model: DisentangledModel, config: L2UConfig,
                    round_idx: int = 0):
    """One round of local training starting from ``global_model``.

    Returns the final local model and a list of ``(phase, LossBreakdown)``.
    """
    if global_model.dims.input_dim != state.train.inputs.shape[1]:
        raise ShapeError("model input width does not match client data")
    gen = RngStream(state.seed, (state.client_id, round_idx, "l2u")).generator()
    model = global_model.copy()
    trace = []
    for _ in range(config.i_l2u):
        model, bd = _phase_step(state, model, gen, config.generator_weights(),
                                GENERATOR_SEGMENTS, config.lr_l2u, config.batch_size)
        if bd is not None:
            trace.append(("generator", bd))
    for _ in range(config.i_mid):
        model, bd = _phase_step(state, model, gen, config.mid_weights(),
                                MID_SEGMENTS, config.lr_mid, config.batch_size)
        if bd is not None:
            trace.append(("mid", bd))
    state.model = model
    return model, trace


def unlearn_weights(selector: str, mode: str, l2u: L2UConfig | None = None) -> LossWeights:
    l2u = l2u or L2UConfig()
    if selector == "classification":
        if mode == CAUSAL_ONLY:
            raise ConfigError("classification loss cannot reach the non-causal featurizer "
                              "when the classifier reads only causal features", "unlearn_loss")
        return LossWeights(gtc=1.0)
    if selector == "rec_var":
        return LossWeights(rec=1.0, v=1.0, beta_kl=l2u.beta_kl, kl_sign=l2u.kl_sign,
                           hinge_eps=l2u.hinge_eps)
    raise ConfigError(f"unknown unlearning loss {selector!r}", "unlearn_loss")


def unlearn_local_update(state: ClientState, global_v: ParamVector, epochs: int, rate: float,
                         unlearn_loss: str = "classification", batch_size: int | None = 64,
                         round_idx: int = 0, l2u: L2UConfig | None = None) -> LocalUpdate:
    """Merge the global non-causal featurizer, train it alone, return ``before - after``."""
    if state.model is None:
        raise ConfigError("client has no local model")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0", "unlearn_epochs")
    weights = unlearn_weights(unlearn_loss, state.model.mode, l2u)
    model = insert_subnet(state.model, "V", global_v)
    before = extract_subnet(model, "V")
    gen = RngStream(state.seed, (state.client_id, round_idx, "unlearn")).generator()
    trace = []
    for _ in range(epochs):
        model, bd = _phase_step(state, model, gen, weights, ("V",), rate, batch_size)
        if bd is not None:
            trace.append(("unlearn", bd))
    after = extract_subnet(model, "V")
    state.model = model
    return LocalUpdate(state.client_id, state.role,
                       before.with_values(before.values - after.values), len(state.train), trace)
