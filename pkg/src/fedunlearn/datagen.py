"""Synthetic multi-domain classification data with a known causal/spurious split.

Every sample is ``x = concat(x_c, x_s)``.  The causal block ``x_c`` depends only
on the label; the spurious block ``x_s`` depends on the label through a
domain-specific correlation ``rho_d`` and carries a domain offset ``nu_d``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LookupFailure, PartitionError, ShapeError
from .numerics import RngStream

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    spurious_mean: np.ndarray
    rho: float
    sigma_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "spurious_mean", np.asarray(self.spurious_mean, dtype=np.float64).ravel())
        if self.sigma_s <= 0:
            raise ValueError("sigma_s must be positive")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int
    causal_means: np.ndarray  # (C, d_c)
    spurious_protos: np.ndarray  # (C, d_s)
    sigma_c: float
    domains: tuple[DomainSpec, ...] = ()

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.causal_means, dtype=np.float64))
        s = np.atleast_2d(np.asarray(self.spurious_protos, dtype=np.float64))
        object.__setattr__(self, "causal_means", mu)
        object.__setattr__(self, "spurious_protos", s)
        object.__setattr__(self, "domains", tuple(self.domains))
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if mu.shape[0] != self.num_classes or s.shape[0] != self.num_classes:
            raise ShapeError("one causal mean and one spurious prototype per class required")
        if mu.shape[1] < 1 or s.shape[1] < 1:
            raise ShapeError("causal and spurious dimensions must be >= 1")
        if self.sigma_c < 0:
            raise ValueError("sigma_c must be non-negative")
        for i in range(self.num_classes):
            for j in range(i + 1, self.num_classes):
                if np.array_equal(mu[i], mu[j]):
                    raise ValueError("causal class means must be pairwise distinct")
        for d in self.domains:
            if d.spurious_mean.size != s.shape[1]:
                raise ShapeError(f"domain {d.domain_id}: spurious_mean has wrong length")

    @property
    def causal_dim(self) -> int:
        return self.causal_means.shape[1]

    @property
    def spurious_dim(self) -> int:
        return self.spurious_protos.shape[1]

    @property
    def input_dim(self) -> int:
        return self.causal_dim + self.spurious_dim

    def domain(self, domain_id: int) -> DomainSpec:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise LookupFailure(f"unknown domain {domain_id}")


OFFSET_STYLES = ("random", "code")


def default_generator(num_classes: int = 4, margin: float = 3.0, sigma_c: float = 0.5,
                      sigma_s: float = 1.0, rhos: Sequence[float] = (0.9, 0.8, 0.7, -0.9),
                      offset_scale: float = 2.0, causal_dim: int | None = None,
                      spurious_dim: int | None = None, seed: int = 0,
                      offset_style: str = "random") -> GeneratorSpec:
    """One-hot class means scaled by ``margin`` in both blocks, plus per-domain offsets.

    ``offset_style="random"`` draws each offset from N(0, offset_scale^2 I).
    ``offset_style="code"`` appends one spurious coordinate per domain and sets
    the offset to ``offset_scale`` times that coordinate's unit vector, so all
    domains are equidistant and the offsets carry no label information.
    """
    if offset_style not in OFFSET_STYLES:
        raise ValueError(f"unknown offset style {offset_style!r}")
    d_c = causal_dim or num_classes
    d_s = spurious_dim or num_classes
    if d_c < num_classes or d_s < num_classes:
        raise ShapeError("block dimensions must be >= num_classes for one-hot means")
    if offset_style == "code":
        d_s = max(d_s, num_classes + len(rhos))
    mu = np.zeros((num_classes, d_c))
    mu[:, :num_classes] = margin * np.eye(num_classes)
    protos = np.zeros((num_classes, d_s))
    protos[:, :num_classes] = margin * np.eye(num_classes)
    domains = []
    for d, rho in enumerate(rhos):
        if offset_style == "code":
            nu = np.zeros(d_s)
            nu[d_s - len(rhos) + d] = offset_scale
        else:
            nu = offset_scale * RngStream(seed, (d, 0, "domain-offset")).generator().standard_normal(d_s)
        domains.append(DomainSpec(d, nu, float(rho), sigma_s))
    return GeneratorSpec(num_classes, mu, protos, sigma_c, tuple(domains))


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        dom = np.asarray(self.domain_ids, dtype=np.int64).ravel()
        if x.shape[0] != y.size or dom.size != y.size:
            raise ShapeError("inputs, labels and domain ids must have equal length")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "domain_ids", dom)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.domain_ids[idx])

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        return LabeledDataset(np.concatenate([p.inputs for p in parts]),
                              np.concatenate([p.labels for p in parts]),
                              np.concatenate([p.domain_ids for p in parts]))


def generate_domain(spec: GeneratorSpec, domain: DomainSpec, n: int, rng: RngStream) -> LabeledDataset:
    if n < 1:
        raise PartitionError("cannot generate an empty dataset")
    gen = rng.generator()
    y = gen.integers(0, spec.num_classes, size=n)
    x_c = spec.causal_means[y] + spec.sigma_c * gen.standard_normal((n, spec.causal_dim))
    x_s = (domain.spurious_mean + domain.rho * spec.spurious_protos[y]
           + domain.sigma_s * gen.standard_normal((n, spec.spurious_dim)))
    return LabeledDataset(np.hstack([x_c, x_s]), y, np.full(n, domain.domain_id))


# ---------------------------------------------------------------------------
# Client partitioning
# ---------------------------------------------------------------------------

RETAIN, FORGET = "retain", "forget"


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    domain_id: int
    data: LabeledDataset
    role: str = RETAIN
    train: LabeledDataset | None = None
    validation: LabeledDataset | None = None


@dataclass(frozen=True)
class ClientPartition:
    clients: tuple[ClientShard, ...] = field(default=())

    @property
    def domain_ids(self) -> list[int]:
        return sorted({c.domain_id for c in self.clients})

    def by_role(self, role: str) -> list[ClientShard]:
        return [c for c in self.clients if c.role == role]


def partition_clients(datasets: dict[int, LabeledDataset] | Sequence[LabeledDataset],
                      clients_per_domain: int) -> ClientPartition:
    """Split each domain into contiguous shards; client ids run domain by domain."""
    if clients_per_domain < 1:
        raise PartitionError("clients_per_domain must be >= 1")
    if not isinstance(datasets, dict):
        datasets = {int(ds.domain_ids[0]) if len(ds) else i: ds for i, ds in enumerate(datasets)}
    clients, cid = [], 0
    for dom in sorted(datasets):
        ds = datasets[dom]
        n = len(ds)
        if n < clients_per_domain:
            raise PartitionError(f"domain {dom} has {n} samples for {clients_per_domain} clients")
        base, extra = divmod(n, clients_per_domain)
        start = 0
        for k in range(clients_per_domain):
            size = base + (1 if k < extra else 0)
            clients.append(ClientShard(cid, dom, ds.subset(np.arange(start, start + size))))
            start += size
            cid += 1
    return ClientPartition(tuple(clients))


def split_retain_forget(partition: ClientPartition, forget_domain: int) -> ClientPartition:
    if forget_domain not in partition.domain_ids:
        raise LookupFailure(f"forget domain {forget_domain} has no clients")
    return ClientPartition(tuple(
        replace(c, role=FORGET if c.domain_id == forget_domain else RETAIN)
        for c in partition.clients))


def train_val_split(dataset: LabeledDataset, rng: RngStream) -> tuple[LabeledDataset, LabeledDataset]:
    """Random 90:10 split; the validation share is floored and at least one sample."""
    n = len(dataset)
    if n < 10:
        raise PartitionError(f"need at least 10 samples to split, got {n}")
    n_val = max(1, n // 10)
    perm = rng.generator().permutation(n)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def split_partition(partition: ClientPartition, seed: int) -> ClientPartition:
    out = []
    for c in partition.clients:
        train, val = train_val_split(c.data, RngStream(seed, (c.client_id, 0, "train-val")))
        out.append(replace(c, train=train, validation=val))
    return ClientPartition(tuple(out))


# ---------------------------------------------------------------------------
# Plain-text serialisation
# ---------------------------------------------------------------------------

def dumps_dataset(ds: LabeledDataset, num_classes: int) -> str:
    doms = np.unique(ds.domain_ids)
    if doms.size > 1:
        raise ShapeError("a dataset file holds exactly one domain")
    dom = int(doms[0]) if doms.size else -1
    buf = io.StringIO()
    buf.write(f"# fedunlearn-dataset v{FORMAT_VERSION} dims={ds.inputs.shape[1]} "
              f"classes={num_classes} domain={dom} rows={len(ds)}\n")
    for x, y in zip(ds.inputs, ds.labels):
        buf.write(str(int(y)) + " " + " ".join(repr(float(v)) for v in x) + "\n")
    return buf.getvalue()


def loads_dataset(text: str) -> tuple[LabeledDataset, int]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# fedunlearn-dataset"):
        raise ValueError("missing dataset header")
    head = dict(tok.split("=", 1) for tok in lines[0].split()[3:])
    version = lines[0].split()[2]
    if version != f"v{FORMAT_VERSION}":
        raise ValueError(f"unsupported dataset format {version}")
    dims, classes, dom = int(head["dims"]), int(head["classes"]), int(head["domain"])
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), dims)
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError("label out of range in dataset file")
    return LabeledDataset(x, y, np.full(len(rows), dom)), classes


def write_dataset(path, ds: LabeledDataset, num_classes: int) -> None:
    Path(path).write_text(dumps_dataset(ds, num_classes), encoding="utf-8")


def read_dataset(path) -> tuple[LabeledDataset, int]:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))
