"""Small deterministic numerical kernel.

Dense layers with hand-written forward/backward passes, flat parameter
vectors with named segments, vector geometry, Euclidean projection onto the
probability simplex, counter-keyed random streams and a central-difference
gradient checker.  Everything is float64.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateVectorError, LookupFailure, NumericError, ShapeError

ACTIVATIONS = ("identity", "tanh", "relu", "softplus")


# ---------------------------------------------------------------------------
# ParamVector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 array with an ordered list of named segments."""

    values: np.ndarray
    layout: tuple[Segment, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "values", values)
        if not self.layout:
            object.__setattr__(self, "layout", (Segment("all", 0, values.size),))
        names = [s.name for s in self.layout]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate segment names in layout: {names}")
        offset = 0
        for seg in self.layout:
            if seg.offset != offset or seg.length < 0:
                raise ShapeError(f"segment {seg.name!r} does not tile the vector")
            offset += seg.length
        if offset != values.size:
            raise ShapeError(f"layout covers {offset} values, vector has {values.size}")
        if not np.all(np.isfinite(values)):
            raise NumericError("ParamVector values must be finite")

    @classmethod
    def from_segments(cls, parts: Sequence[tuple[str, np.ndarray]]) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for name, arr in parts:
            arr = np.asarray(arr, dtype=np.float64).ravel()
            layout.append(Segment(name, offset, arr.size))
            chunks.append(arr)
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(layout))

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def _find(self, name: str) -> Segment:
        for seg in self.layout:
            if seg.name == name:
                return seg
        raise LookupFailure(f"no segment named {name!r}")

    def segment(self, name: str) -> np.ndarray:
        seg = self._find(name)
        return self.values[seg.offset:seg.offset + seg.length].copy()

    def with_segment(self, name: str, values: np.ndarray) -> "ParamVector":
        seg = self._find(name)
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != seg.length:
            raise ShapeError(f"segment {name!r} has length {seg.length}, got {values.size}")
        out = self.values.copy()
        out[seg.offset:seg.offset + seg.length] = values
        return ParamVector(out, self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.shape[0] != self.bias.size:
            raise ShapeError(
                f"weights {self.weights.shape} inconsistent with bias ({self.bias.size},)"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise NumericError("layer parameters must be finite")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass(frozen=True)
class DenseCache:
    inputs: np.ndarray  # (B, in)
    pre: np.ndarray  # (B, out)
    out: np.ndarray  # (B, out)
    squeeze: bool


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return a
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return np.logaddexp(0.0, a)  # softplus


def _activation_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(pre)
    if name == "tanh":
        return 1.0 - out * out
    if name == "relu":
        return (pre > 0).astype(np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * pre))  # logistic sigmoid, overflow-free


def dense_forward(layer: DenseLayer, inputs: np.ndarray) -> tuple[np.ndarray, DenseCache]:
    """Apply ``activation(W x + b)`` to a vector or a (batch, in) matrix."""
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != layer.in_size:
        raise ShapeError(f"layer expects input width {layer.in_size}, got shape {x.shape}")
    pre = x2 @ layer.weights.T + layer.bias
    out = _activate(layer.activation, pre)
    cache = DenseCache(x2, pre, out, squeeze)
    return (out[0] if squeeze else out), cache


def dense_backward(layer: DenseLayer, cache: DenseCache, upstream: np.ndarray):
    """Gradients of ``sum(upstream * output)`` w.r.t. weights, bias and input."""
    g = np.asarray(upstream, dtype=np.float64)
    g2 = np.atleast_2d(g)
    if g2.shape != cache.out.shape or cache.inputs.shape[1] != layer.in_size \
            or cache.out.shape[1] != layer.out_size:
        raise ShapeError("cache does not match this layer / upstream gradient")
    delta = g2 * _activation_grad(layer.activation, cache.pre, cache.out)
    grad_w = delta.T @ cache.inputs
    grad_b = delta.sum(axis=0)
    grad_in = delta @ layer.weights
    return grad_w, grad_b, (grad_in[0] if cache.squeeze else grad_in)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"length mismatch {a.size} != {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero vector")
    # normalise first so the result is exactly scale invariant up to rounding
    c = float(np.dot(a / na, b / nb))
    return min(1.0, max(-1.0, c))


def project_to_simplex(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum(x) = 1} (sort-and-threshold).

    Points already feasible within ``tol`` are returned unchanged, which makes
    the projection exactly idempotent.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ShapeError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite entries in simplex projection input")
    if v.size == 1:
        return np.ones(1)
    if v.min() >= 0.0 and abs(v.sum() - 1.0) <= tol:
        return v.copy()
    v = v - v.mean()  # the projection is shift-invariant; centring limits cancellation
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def _key_word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    # negative ids (e.g. server / global streams) map to the top of the range
    return part if part >= 0 else 2**32 + part


@dataclass(frozen=True)
class RngStream:
    """Random stream fully determined by ``(seed, key)``.

    Each stream owns an independent Philox generator, so draws from one stream
    never shift another stream's sequence.
    """

    seed: int
    key: tuple = ()

    def generator(self) -> np.random.Generator:
        words = tuple(_key_word(p) for p in self.key)
        ss = np.random.SeedSequence(entropy=int(self.seed) % 2**64, spawn_key=words)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *key) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_diff_gradient(loss_fn: Callable[[ParamVector], float], point: ParamVector,
                         h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise ValueError("h must be positive")
    base = point.values
    grad = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        fp = loss_fn(point.with_values(plus))
        fm = loss_fn(point.with_values(minus))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_check(loss_fn: Callable[[ParamVector], float], analytic_grad, point: ParamVector,
                      h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max coordinate-wise relative error between ``analytic_grad`` and central differences.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is ~0 from dividing round-off by zero.
    """
    a = np.asarray(getattr(analytic_grad, "values", analytic_grad), dtype=np.float64).ravel()
    if a.size != len(point):
        raise ShapeError("analytic gradient length differs from the point")
    n = finite_diff_gradient(loss_fn, point, h)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
