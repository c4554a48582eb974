"""Evaluation: accuracies, loss-threshold membership inference, time-to-forget, costs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datagen import FORGET, RETAIN, LabeledDataset
from .errors import EvaluationError
from .losses import per_sample_ce
from .model import DisentangledModel, forward, predict


@dataclass(frozen=True)
class AccuracyReport:
    ra: float
    fa: float
    ta: float
    per_client: dict = field(default_factory=dict)


def accuracy(model: DisentangledModel, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise EvaluationError("empty evaluation set")
    return float(np.mean(predict(model, data.inputs) == data.labels))


def evaluate_accuracy(model: DisentangledModel, clients: Iterable, test_set: LabeledDataset,
                      mode: str | None = None) -> AccuracyReport:
    """Per-client top-1 accuracy on each client's validation split.

    ``clients`` are objects with ``client_id``, ``role`` and ``validation``.
    RA / FA are means over retain / forget clients (NaN when a role is empty).
    """
    if mode is not None and mode != model.mode:
        raise EvaluationError(f"model mode {model.mode!r} differs from {mode!r}")
    per_client, roles = {}, {RETAIN: [], FORGET: []}
    for c in sorted(clients, key=lambda c: c.client_id):
        acc = accuracy(model, c.validation)
        per_client[c.client_id] = acc
        roles[c.role].append(acc)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return AccuracyReport(mean(roles[RETAIN]), mean(roles[FORGET]), accuracy(model, test_set), per_client)


# ---------------------------------------------------------------------------
# Membership inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiaReport:
    accuracy: float
    threshold: float
    members_below: bool  # True: predict member when loss < threshold
    member_loss_mean: float
    nonmember_loss_mean: float


def mia_from_losses(member_losses, nonmember_losses) -> MiaReport:
    """Best balanced accuracy of a single loss threshold, both directions swept.

    Candidate thresholds are the midpoints between consecutive distinct losses
    plus one point beyond each end.
    """
    m = np.asarray(member_losses, dtype=np.float64).ravel()
    n = np.asarray(nonmember_losses, dtype=np.float64).ravel()
    if m.size == 0 or n.size == 0:
        raise EvaluationError("membership inference needs members and non-members")
    vals = np.unique(np.concatenate([m, n]))
    cands = np.concatenate([[vals[0] - 1.0], (vals[:-1] + vals[1:]) / 2.0, [vals[-1] + 1.0]])
    ms, ns = np.sort(m), np.sort(n)
    tpr = np.searchsorted(ms, cands, side="left") / m.size  # members with loss < t
    fpr = np.searchsorted(ns, cands, side="left") / n.size  # non-members with loss < t
    below = 0.5 * (tpr + (1.0 - fpr))
    above = 1.0 - below
    i, j = int(np.argmax(below)), int(np.argmax(above))
    if below[i] >= above[j]:
        acc, t, flag = below[i], cands[i], True
    else:
        acc, t, flag = above[j], cands[j], False
    return MiaReport(float(acc), float(t), flag, float(m.mean()), float(n.mean()))


def sample_losses(model: DisentangledModel, data: LabeledDataset) -> np.ndarray:
    out = forward(model, data.inputs, stochastic=False, need_decoder=False)
    return per_sample_ce(out.logits, data.labels)


def mia_loss_threshold(model: DisentangledModel, members: LabeledDataset,
                       nonmembers: LabeledDataset) -> MiaReport:
    return mia_from_losses(sample_losses(model, members), sample_losses(model, nonmembers))


# ---------------------------------------------------------------------------
# Time to forget
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class T2FReport:
    fa_series: tuple
    best_round: int
    t2f: float


def time_to_forget(fa_series: Sequence[float]) -> T2FReport:
    fa = np.asarray(fa_series, dtype=np.float64)
    if fa.size == 0:
        raise EvaluationError("empty forget-accuracy series")
    r = int(np.argmin(fa))  # first attainment
    t2f = float((fa[0] - fa[r]) / r) if r >= 1 else 0.0
    return T2FReport(tuple(float(v) for v in fa), r, t2f)


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------

LEARNING, UNLEARNING = "learning", "unlearning"


@dataclass(frozen=True)
class CostEntry:
    payload_bytes: int = 0
    flops: int = 0


def comm_cost(kind: str, model: DisentangledModel, num_clients: int, bytes_per_value: int = 4) -> CostEntry:
    """Per-round uplink + downlink bytes: full model when learning, V segment when unlearning."""
    if kind == LEARNING:
        n = model.n_params
    elif kind == UNLEARNING:
        n = model.segment_size("V")
    else:
        raise ValueError(f"unknown round kind {kind!r}")
    return CostEntry(payload_bytes=int(num_clients) * n * int(bytes_per_value) * 2)


@dataclass(frozen=True)
class PhaseWork:
    """Per-iteration work for one training phase on one client."""

    forward_layers: tuple  # (in, out) pairs evaluated in the forward pass
    trainable_layers: tuple  # (in, out) pairs whose parameters are updated
    batch_size: int
    iterations: int
    forward_only: bool = False


def phase_work(model: DisentangledModel, phase: str, batch_size: int, iterations: int) -> PhaseWork:
    arch = {k: [(i, o) for i, o, _ in v] for k, v in model.dims.architecture().items()}
    if phase == "generator":
        fwd, train = ("E", "K", "V", "D"), ("E", "K", "V", "D")
    elif phase == "mid":
        fwd, train = ("E", "K", "V", "C"), ("E", "C")
    elif phase == "unlearn_classification":
        fwd, train = ("E", "K", "V", "C"), ("V",)
    elif phase == "unlearn_rec_var":
        fwd, train = ("E", "K", "V", "D"), ("V",)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    flat = lambda names: tuple(l for n in names for l in arch[n])  # noqa: E731
    return PhaseWork(flat(fwd), flat(train), batch_size, iterations)


def comp_cost(trace: Iterable[PhaseWork]) -> CostEntry:
    """FLOPs = sum over phases, iterations and layers of (2 in*out forward + 4 in*out backward) * batch.

    Backward cost is charged only for trainable layers.
    """
    total = 0
    for w in trace:
        fwd = sum(2 * i * o for i, o in w.forward_layers)
        bwd = 0 if w.forward_only else sum(4 * i * o for i, o in w.trainable_layers)
        total += (fwd + bwd) * w.batch_size * w.iterations
    return CostEntry(flops=int(total))


@dataclass
class CostReport:
    rounds: list = field(default_factory=list)

    def add(self, entry: CostEntry) -> None:
        self.rounds.append(entry)

    @property
    def cumulative_bytes(self) -> int:
        return sum(e.payload_bytes for e in self.rounds)

    @property
    def cumulative_flops(self) -> int:
        return sum(e.flops for e in self.rounds)
