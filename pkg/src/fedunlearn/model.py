"""Disentangled five-part network.

``E`` shallow extractor, ``K`` causal featurizer, ``V`` non-causal featurizer,
``D`` decoder and ``C`` classifier.  Both featurizers emit a Gaussian (mean and
log-variance).  Classification and prototype paths read the means; the
decoder reads reparameterised samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LookupFailure, ShapeError
from .numerics import DenseLayer, ParamVector, RngStream, dense_backward, dense_forward

SEGMENTS = ("E", "K", "V", "D", "C")
CAUSAL_ONLY, CONCAT = "causal_only", "concat"
MODES = (CAUSAL_ONLY, CONCAT)
LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    num_classes: int
    hidden: int = 32
    d_k: int = 16
    d_v: int = 8
    decoder_hidden: int = 32
    mode: str = CONCAT

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown classifier input mode {self.mode!r}")
        if min(self.input_dim, self.hidden, self.d_k, self.d_v, self.decoder_hidden) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def classifier_in(self) -> int:
        return self.d_k + (self.d_v if self.mode == CONCAT else 0)

    def architecture(self) -> dict[str, list[tuple[int, int, str]]]:
        """(in, out, activation) for every layer of every segment."""
        return {
            "E": [(self.input_dim, self.hidden, "tanh")],
            "K": [(self.hidden, 2 * self.d_k, "identity")],
            "V": [(self.hidden, 2 * self.d_v, "identity")],
            "D": [(self.d_k + self.d_v, self.decoder_hidden, "tanh"),
                  (self.decoder_hidden, self.input_dim, "identity")],
            "C": [(self.classifier_in, self.num_classes, "identity")],
        }


@dataclass
class DisentangledModel:
    dims: ModelDims
    subnets: dict[str, list[DenseLayer]]

    @property
    def mode(self) -> str:
        return self.dims.mode

    def copy(self) -> "DisentangledModel":
        return DisentangledModel(self.dims, {k: [l.copy() for l in v] for k, v in self.subnets.items()})

    def segment_size(self, name: str) -> int:
        if name not in SEGMENTS:
            raise LookupFailure(f"unknown sub-network {name!r}")
        return sum(l.n_params for l in self.subnets[name])

    @property
    def n_params(self) -> int:
        return sum(self.segment_size(s) for s in SEGMENTS)

    def to_vector(self) -> ParamVector:
        return ParamVector.from_segments([(s, _flatten_layers(self.subnets[s])) for s in SEGMENTS])

    @classmethod
    def from_vector(cls, dims: ModelDims, vec: ParamVector) -> "DisentangledModel":
        model = init_model(dims, None)
        for s in SEGMENTS:
            _unflatten_into(model.subnets[s], vec.segment(s))
        return model


def _flatten_layers(layers: list[DenseLayer]) -> np.ndarray:
    if not layers:
        return np.zeros(0)
    return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in layers])


def _unflatten_into(layers: list[DenseLayer], flat: np.ndarray) -> None:
    expected = sum(l.n_params for l in layers)
    if flat.size != expected:
        raise ShapeError(f"expected {expected} values, got {flat.size}")
    pos = 0
    for l in layers:
        nw = l.weights.size
        l.weights = flat[pos:pos + nw].reshape(l.weights.shape).copy()
        pos += nw
        l.bias = flat[pos:pos + l.bias.size].copy()
        pos += l.bias.size


def init_model(dims: ModelDims, rng: RngStream | None) -> DisentangledModel:
    """Gaussian init with std 1/sqrt(fan_in) and zero biases; zeros when ``rng`` is None."""
    gen = rng.generator() if rng is not None else None
    subnets = {}
    for name, layers in dims.architecture().items():
        built = []
        for fan_in, fan_out, act in layers:
            if gen is None:
                w = np.zeros((fan_out, fan_in))
            else:
                w = gen.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            built.append(DenseLayer(w, np.zeros(fan_out), act))
        subnets[name] = built
    return DisentangledModel(dims, subnets)


def extract_subnet(model: DisentangledModel, name: str) -> ParamVector:
    if name not in SEGMENTS:
        raise LookupFailure(f"unknown sub-network {name!r}")
    return ParamVector.from_segments([(name, _flatten_layers(model.subnets[name]))])


def insert_subnet(model: DisentangledModel, name: str, params) -> DisentangledModel:
    """Return a copy of ``model`` with one sub-network replaced."""
    if name not in SEGMENTS:
        raise LookupFailure(f"unknown sub-network {name!r}")
    flat = np.asarray(getattr(params, "values", params), dtype=np.float64).ravel()
    out = model.copy()
    _unflatten_into(out.subnets[name], flat)
    return out


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class LatentOutputs:
    z_k_mean: np.ndarray
    z_k_logvar: np.ndarray
    z_v_mean: np.ndarray
    z_v_logvar: np.ndarray
    z_k_sample: np.ndarray
    z_v_sample: np.ndarray
    x_hat: np.ndarray
    logits: np.ndarray
    eps_k: np.ndarray
    eps_v: np.ndarray
    caches: dict = field(default_factory=dict, repr=False)


def _stack_forward(layers, x):
    caches = []
    for l in layers:
        x, c = dense_forward(l, x)
        caches.append(c)
    return x, caches


def _stack_backward(layers, caches, g):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        gw, gb, g = dense_backward(layers[i], caches[i], g)
        grads[i] = (gw, gb)
    return grads, g


def _gaussian_head(out, d):
    mean = out[:, :d]
    raw = out[:, d:]
    logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
    mask = (raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX)
    return mean, logvar, mask


def forward(model: DisentangledModel, x: np.ndarray, rng=None, mode: str | None = None,
            stochastic: bool = False, need_decoder: bool = True, noise=None) -> LatentOutputs:
    """Batched forward pass.  ``rng`` may be an ``RngStream`` or a numpy Generator.

    With ``stochastic=False`` the recorded noise is zero and samples equal means.
    ``noise=(eps_k, eps_v)`` replays previously recorded noise.
    """
    dims = model.dims
    if mode is not None and mode != dims.mode:
        raise ShapeError(f"model was built for mode {dims.mode!r}, not {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    x2 = np.atleast_2d(x)
    if x2.shape[1] != dims.input_dim:
        raise ShapeError(f"expected input width {dims.input_dim}, got {x2.shape[1]}")
    B = x2.shape[0]
    h, c_e = _stack_forward(model.subnets["E"], x2)
    ok, c_k = _stack_forward(model.subnets["K"], h)
    ov, c_v = _stack_forward(model.subnets["V"], h)
    zk_mu, zk_lv, mk = _gaussian_head(ok, dims.d_k)
    zv_mu, zv_lv, mv = _gaussian_head(ov, dims.d_v)
    if noise is not None:
        eps_k, eps_v = (np.asarray(e, dtype=np.float64).reshape(B, -1) for e in noise)
    elif stochastic:
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        if gen is None:
            raise ValueError("stochastic forward needs a random stream")
        eps_k = gen.standard_normal((B, dims.d_k))
        eps_v = gen.standard_normal((B, dims.d_v))
    else:
        eps_k = np.zeros((B, dims.d_k))
        eps_v = np.zeros((B, dims.d_v))
    sk = zk_mu + np.exp(0.5 * zk_lv) * eps_k
    sv = zv_mu + np.exp(0.5 * zv_lv) * eps_v
    if need_decoder:
        x_hat, c_d = _stack_forward(model.subnets["D"], np.hstack([sk, sv]))
    else:
        x_hat, c_d = np.full_like(x2, np.nan), None
    cls_in = zk_mu if dims.mode == CAUSAL_ONLY else np.hstack([zk_mu, zv_mu])
    logits, c_c = _stack_forward(model.subnets["C"], cls_in)
    return LatentOutputs(zk_mu, zk_lv, zv_mu, zv_lv, sk, sv, x_hat, logits, eps_k, eps_v,
                         {"E": c_e, "K": c_k, "V": c_v, "D": c_d, "C": c_c,
                          "mask_k": mk, "mask_v": mv})


def backward(model: DisentangledModel, out: LatentOutputs, grads: dict,
             segments=SEGMENTS) -> ParamVector:
    """Parameter gradient given upstream gradients on the latent outputs.

    ``grads`` may hold ``logits``, ``x_hat``, ``z_k_mean``, ``z_k_logvar``,
    ``z_v_mean``, ``z_v_logvar`` (each (B, dim)); missing keys are zero.
    Segments not listed in ``segments`` get a zero gradient.
    """
    dims = model.dims
    B = out.z_k_mean.shape[0]
    z = np.zeros
    g_zk_mu = np.array(grads.get("z_k_mean", z((B, dims.d_k))), dtype=np.float64)
    g_zk_lv = np.array(grads.get("z_k_logvar", z((B, dims.d_k))), dtype=np.float64)
    g_zv_mu = np.array(grads.get("z_v_mean", z((B, dims.d_v))), dtype=np.float64)
    g_zv_lv = np.array(grads.get("z_v_logvar", z((B, dims.d_v))), dtype=np.float64)
    param_grads = {}

    g_logits = grads.get("logits")
    if g_logits is not None:
        cg, g_in = _stack_backward(model.subnets["C"], out.caches["C"], g_logits)
        param_grads["C"] = cg
        g_zk_mu += g_in[:, :dims.d_k]
        if dims.mode == CONCAT:
            g_zv_mu += g_in[:, dims.d_k:]

    g_xhat = grads.get("x_hat")
    if g_xhat is not None:
        if out.caches["D"] is None:
            raise ShapeError("forward pass ran without the decoder")
        dg, g_s = _stack_backward(model.subnets["D"], out.caches["D"], g_xhat)
        param_grads["D"] = dg
        gsk, gsv = g_s[:, :dims.d_k], g_s[:, dims.d_k:]
        g_zk_mu += gsk
        g_zv_mu += gsv
        g_zk_lv += gsk * out.eps_k * 0.5 * np.exp(0.5 * out.z_k_logvar)
        g_zv_lv += gsv * out.eps_v * 0.5 * np.exp(0.5 * out.z_v_logvar)

    need_e = "E" in segments
    g_h = np.zeros((B, dims.hidden))
    for name, g_mu, g_lv, mask in (("K", g_zk_mu, g_zk_lv, out.caches["mask_k"]),
                                   ("V", g_zv_mu, g_zv_lv, out.caches["mask_v"])):
        if name in segments or need_e:
            g_out = np.hstack([g_mu, g_lv * mask])
            sg, gi = _stack_backward(model.subnets[name], out.caches[name], g_out)
            param_grads[name] = sg
            g_h += gi
    if need_e:
        param_grads["E"], _ = _stack_backward(model.subnets["E"], out.caches["E"], g_h)

    parts = []
    for s in SEGMENTS:
        if s in segments and s in param_grads:
            flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in param_grads[s]])
        else:
            flat = np.zeros(model.segment_size(s))
        parts.append((s, flat))
    return ParamVector.from_segments(parts)


def predict(model: DisentangledModel, x: np.ndarray) -> np.ndarray:
    out = forward(model, x, stochastic=False, need_decoder=False)
    return np.argmax(out.logits, axis=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def dumps_checkpoint(model: DisentangledModel) -> str:
    d = model.dims
    lines = [f"# fedunlearn-checkpoint v{CHECKPOINT_VERSION}",
             f"input_dim={d.input_dim} num_classes={d.num_classes} hidden={d.hidden} "
             f"d_k={d.d_k} d_v={d.d_v} decoder_hidden={d.decoder_hidden} mode={d.mode}"]
    vec = model.to_vector()
    for seg in vec.layout:
        lines.append(f"segment {seg.name} {seg.length}")
        lines.extend(repr(float(v)) for v in vec.segment(seg.name))
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> DisentangledModel:
    lines = text.splitlines()
    if not lines or lines[0] != f"# fedunlearn-checkpoint v{CHECKPOINT_VERSION}":
        raise ValueError("not a supported checkpoint")
    kv = dict(tok.split("=", 1) for tok in lines[1].split())
    mode = kv.pop("mode")
    dims = ModelDims(**{k: int(v) for k, v in kv.items()}, mode=mode)
    parts, i = [], 2
    while i < len(lines):
        _, name, length = lines[i].split()
        length = int(length)
        parts.append((name, np.array([float(v) for v in lines[i + 1:i + 1 + length]])))
        i += 1 + length
    return DisentangledModel.from_vector(dims, ParamVector.from_segments(parts))


def save_checkpoint(path, model: DisentangledModel) -> None:
    Path(path).write_text(dumps_checkpoint(model), encoding="utf-8")


def load_checkpoint(path) -> DisentangledModel:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))
