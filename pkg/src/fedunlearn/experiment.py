"""Experiment configuration, orchestration and metric logs."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .client import ClientState, L2UConfig, l2u_local_train, unlearn_local_update
from .datagen import (FORGET, RETAIN, DomainSpec, LabeledDataset, default_generator,
                      generate_domain, partition_clients, split_partition, split_retain_forget)
from .errors import ConfigError
from .metrics import (LEARNING, UNLEARNING, comm_cost, comp_cost, evaluate_accuracy,
                      mia_loss_threshold, phase_work, time_to_forget)
from .model import MODES, DisentangledModel, ModelDims, extract_subnet, init_model, insert_subnet
from .numerics import RngStream
from .server import MatchConfig, fedavg_aggregate, gradient_angle_stats, matched_unlearning_step

SCENARIOS = ("foul", "retrain_reset", "retrain_noreset")
SCHEMA_VERSION = 1
GLOBAL = -1  # client id used for server-side random streams


@dataclass(frozen=True)
class ExperimentConfig:
    """Every field is a key of the flat ``key=value`` config format."""

    seed: int = 0
    # data
    num_classes: int = 4
    margin: float = 3.0
    sigma_c: float = 0.5
    sigma_s: float = 1.0
    rhos: tuple = (0.9, 0.8, 0.7, -0.9)
    offset_scale: float = 8.0  # domains must be separable for V-only forgetting to bite
    offset_style: str = "random"
    clients_per_domain: int = 2
    samples_per_client: int = 555  # 500 train + 55 validation
    forget_domain: int = 0
    test_samples: int = 1000
    test_rho: float = 0.0
    mia_nonmembers: int = 1000
    # model
    hidden: int = 32
    d_k: int = 16
    d_v: int = 8
    decoder_hidden: int = 32
    mode: str = "concat"
    # learning stage
    i_l2u: int = 9
    i_mid: int = 6
    lr_l2u: float = 0.1  # 1e-2 leaves the encoder far from converged in 100 rounds
    lr_mid: float = 0.1
    batch_size: int = 64
    alpha_rec: float = 1.0
    alpha_k: float = 3.0
    alpha_v: float = 1.0
    alpha_gtc: float = 1.0
    beta_kl: float = 0.1
    kl_sign: float = 1.0
    hinge_eps: float = 1e-4
    exclude_target: bool = False
    # unlearning stage
    kappa: float = 0.5
    dual_exponent: float = 1.0
    beta: float = 1.0
    solver_steps: int = 500
    solver_rate: float = 0.05
    degeneracy_eps: float = 1e-12
    eta_g: float = 0.2
    unlearn_epochs: int = 20
    unlearn_lr: float = 0.2
    unlearn_batch: int = 64
    unlearn_loss: str = "classification"
    fl_direction: str = "retain"
    # run
    r_learn: int = 100
    r_unlearn: int = 50
    scenario: str = "foul"
    bytes_per_value: int = 4
    output: str = ""
    format: str = "csv"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}", "scenario")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", "mode")
        for key in ("r_learn", "r_unlearn"):
            if getattr(self, key) < 0:
                raise ConfigError("round counts must be >= 0", key)
        if len(self.rhos) < 2:
            raise ConfigError("need at least two domains so that retain clients exist", "rhos")
        if not 0 <= self.forget_domain < len(self.rhos):
            raise ConfigError(f"forget_domain {self.forget_domain} does not exist", "forget_domain")
        if self.format not in ("csv", "jsonl"):
            raise ConfigError(f"unknown format {self.format!r}", "format")
        if self.fl_direction not in ("all", "retain"):
            raise ConfigError(f"unknown fl_direction {self.fl_direction!r}", "fl_direction")
        if self.clients_per_domain < 1:
            raise ConfigError("clients_per_domain must be >= 1", "clients_per_domain")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def l2u(self) -> L2UConfig:
        try:
            return L2UConfig(self.i_l2u, self.i_mid, self.lr_l2u, self.lr_mid, self.batch_size,
                             self.alpha_rec, self.alpha_k, self.alpha_v, self.alpha_gtc,
                             self.beta_kl, self.kl_sign, self.hinge_eps, self.exclude_target)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def match(self) -> MatchConfig:
        try:
            return MatchConfig(self.kappa, self.dual_exponent, self.beta, self.solver_steps,
                               self.solver_rate, self.degeneracy_eps)
        except ValueError as exc:
            raise ConfigError(str(exc), "kappa") from exc

    def dims(self, input_dim: int) -> ModelDims:
        return ModelDims(input_dim, self.num_classes, self.hidden, self.d_k, self.d_v,
                         self.decoder_hidden, self.mode)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _parse_value(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r} "
                          f"(expected {type(default).__name__})", key) from None


def parse_config(text: str, **overrides) -> ExperimentConfig:
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}", key)
        values[key] = _parse_value(key, raw, defaults[key])
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}", key)
        values[key] = val
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


def dumps_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Metric records
# ---------------------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    stage: str
    ra: float
    fa: float
    ta: float
    mia: float
    cos_retain: float
    cos_forget: float
    j_star: float
    payload_bytes: int
    flops: int
    degenerate: bool


COLUMNS = ["schema"] + [f.name for f in fields(RoundRecord)]


def _render(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".6g")


def _json_value(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, str):
        return v
    v = float(v)
    return None if math.isnan(v) else float(format(v, ".6g"))


def dumps_metrics(records, fmt: str = "csv") -> str:
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in records:
            w.writerow([SCHEMA_VERSION] + [_render(getattr(r, c)) for c in COLUMNS[1:]])
    elif fmt == "jsonl":
        for r in records:
            obj = {"schema": SCHEMA_VERSION}
            obj.update({c: _json_value(getattr(r, c)) for c in COLUMNS[1:]})
            buf.write(json.dumps(obj) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return buf.getvalue()


def emit_metrics(records, path, fmt: str = "csv") -> None:
    Path(path).write_text(dumps_metrics(records, fmt), encoding="utf-8")


def _coerce(name: str, v):
    ftype = {f.name: f.type for f in fields(RoundRecord)}[name]
    if ftype == "bool":
        return v in (True, "1", 1, "true", "True")
    if ftype == "int":
        return int(v)
    if ftype == "str":
        return str(v)
    return float("nan") if v is None else float(v)


def loads_metrics(text: str, fmt: str | None = None) -> list[RoundRecord]:
    if fmt is None:
        fmt = "jsonl" if text.lstrip().startswith("{") else "csv"
    rows = []
    if fmt == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
    else:
        rows = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    out = []
    for row in rows:
        if int(row["schema"]) != SCHEMA_VERSION:
            raise ValueError(f"unsupported metric schema {row['schema']}")
        out.append(RoundRecord(**{c: _coerce(c, row[c]) for c in COLUMNS[1:]}))
    return out


def read_metrics(path, fmt: str | None = None) -> list[RoundRecord]:
    return loads_metrics(Path(path).read_text(encoding="utf-8"), fmt)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass
class World:
    """Everything a run needs besides the model: data, clients and eval sets."""

    config: ExperimentConfig
    clients: list
    test_set: LabeledDataset
    mia_members: LabeledDataset
    mia_nonmembers: LabeledDataset
    input_dim: int
    generator: object = None


def build_world(config: ExperimentConfig) -> World:
    spec = default_generator(config.num_classes, config.margin, config.sigma_c, config.sigma_s,
                             config.rhos, config.offset_scale, seed=config.seed,
                             offset_style=config.offset_style)
    per_domain = config.samples_per_client * config.clients_per_domain
    datasets = {d.domain_id: generate_domain(spec, d, per_domain,
                                             RngStream(config.seed, (d.domain_id, 0, "data")))
                for d in spec.domains}
    part = split_partition(split_retain_forget(partition_clients(datasets, config.clients_per_domain),
                                               config.forget_domain), config.seed)
    clients = [ClientState(c.client_id, c.domain_id, c.role, c.train, c.validation, seed=config.seed)
               for c in part.clients]
    test_id = len(spec.domains)
    if config.offset_style == "code":
        offset = np.zeros(spec.spurious_dim)  # an unseen domain with no style signature
    else:
        offset = config.offset_scale * RngStream(config.seed, (test_id, 0, "domain-offset")) \
            .generator().standard_normal(spec.spurious_dim)
    test_dom = DomainSpec(test_id, offset, config.test_rho, config.sigma_s)
    test_set = generate_domain(spec, test_dom, config.test_samples,
                               RngStream(config.seed, (test_id, 0, "test")))
    forget_dom = spec.domain(config.forget_domain)
    nonmembers = generate_domain(spec, forget_dom, config.mia_nonmembers,
                                 RngStream(config.seed, (config.forget_domain, 0, "mia-nonmember")))
    members = LabeledDataset.concat([c.train for c in clients if c.role == FORGET])
    return World(config, clients, test_set, members, nonmembers, spec.input_dim, spec)


@dataclass
class RunResult:
    model: DisentangledModel
    records: list
    learned_model: DisentangledModel | None = None
    forget_accesses_after_learning: int = 0
    forget_accesses_final: int = 0
    world: World | None = None


def _evaluate(model, world):
    acc = evaluate_accuracy(model, world.clients, world.test_set)
    mia = mia_loss_threshold(model, world.mia_members, world.mia_nonmembers).accuracy
    return acc, mia


def _sample_weights(clients):
    n = np.array([len(c.train) for c in clients], dtype=np.float64)
    return n / n.sum()


def _learning_round(global_model, clients, config, l2u, round_idx, world, stage):
    old = global_model.to_vector()
    locals_ = [l2u_local_train(c, global_model, l2u, round_idx)[0] for c in clients]
    new = fedavg_aggregate([m.to_vector() for m in locals_], _sample_weights(clients))
    model = DisentangledModel.from_vector(global_model.dims, new)
    ups = [(c.client_id, c.role, m.to_vector().values - old.values) for c, m in zip(clients, locals_)]
    angles = gradient_angle_stats(old.values - new.values, [(i, r, -u) for i, r, u in ups])
    acc, mia = _evaluate(model, world)
    payload = comm_cost(LEARNING, model, len(clients), config.bytes_per_value).payload_bytes
    work = [phase_work(model, "generator", l2u.batch_size, l2u.i_l2u),
            phase_work(model, "mid", l2u.batch_size, l2u.i_mid)] * len(clients)
    rec = RoundRecord(round_idx, stage, acc.ra, acc.fa, acc.ta, mia, angles.retain_mean,
                      angles.forget_mean, float("nan"), payload, comp_cost(work).flops, angles.degenerate)
    return model, rec


def _foul_round(global_model, clients, config, match, round_idx, world):
    theta_v = extract_subnet(global_model, "V")
    for c in clients:
        c.model = global_model
    ups = [unlearn_local_update(c, theta_v, config.unlearn_epochs, config.unlearn_lr,
                                config.unlearn_loss, config.unlearn_batch or None, round_idx, config.l2u())
           for c in clients]
    g_fl = None
    if config.fl_direction == "retain":
        retain = [u for u in ups if u.role == RETAIN]
        g_fl = fedavg_aggregate([u.pseudo_grad for u in retain],
                                _sample_weights([c for c in clients if c.role == RETAIN]))
    new_v, sol = matched_unlearning_step(ups, theta_v, match, config.eta_g,
                                         weights=_sample_weights(clients), g_fl=g_fl)
    model = insert_subnet(global_model, "V", new_v)
    angles = gradient_angle_stats(sol.g_foul, [(u.client_id, u.role, u.pseudo_grad) for u in ups])
    acc, mia = _evaluate(model, world)
    payload = comm_cost(UNLEARNING, model, len(clients), config.bytes_per_value).payload_bytes
    batch = config.unlearn_batch or max(len(c.train) for c in clients)
    work = [phase_work(model, f"unlearn_{config.unlearn_loss}", batch, config.unlearn_epochs)] * len(clients)
    rec = RoundRecord(round_idx, "unlearn", acc.ra, acc.fa, acc.ta, mia, angles.retain_mean,
                      angles.forget_mean, sol.objective, payload, comp_cost(work).flops,
                      sol.degenerate)
    return model, rec, sol


def simulate(config: ExperimentConfig, world: World | None = None,
             learned: DisentangledModel | None = None) -> RunResult:
    """Run both stages.  ``learned`` skips the learning stage (its records are empty)."""
    world = world or build_world(config)
    for c in world.clients:
        c.train_accesses = 0
        c.model = None
    l2u, match = config.l2u(), config.match()
    dims = config.dims(world.input_dim)
    model = init_model(dims, RngStream(config.seed, (GLOBAL, 0, "init")))
    records = []
    if learned is not None:
        model = learned.copy()
    else:
        for r in range(config.r_learn):
            model, rec = _learning_round(model, world.clients, config, l2u, r, world, "learn")
            records.append(rec)
    learned_model = model.copy()
    forget_clients = [c for c in world.clients if c.role == FORGET]
    acc_after_learning = sum(c.train_accesses for c in forget_clients)

    base = config.r_learn
    if config.scenario == "foul":
        for r in range(config.r_unlearn):
            model, rec, _ = _foul_round(model, world.clients, config, match, base + r, world)
            records.append(rec)
    else:
        retain = [c for c in world.clients if c.role == RETAIN]
        if config.scenario == "retrain_reset":
            model = init_model(dims, RngStream(config.seed, (GLOBAL, 1, "reset")))
        for r in range(config.r_unlearn):
            model, rec = _learning_round(model, retain, config, l2u, base + r, world, "unlearn")
            records.append(rec)
    return RunResult(model, records, learned_model, acc_after_learning,
                     sum(c.train_accesses for c in forget_clients), world)


def run_experiment(config: ExperimentConfig):
    res = simulate(config)
    return res.model, res.records


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def forget_series(records) -> list[float]:
    """FA at the end of learning followed by FA after each unlearning round."""
    learn = [r for r in records if r.stage == "learn"]
    unlearn = [r.fa for r in records if r.stage == "unlearn"]
    return ([learn[-1].fa] if learn else []) + unlearn


def summarize(records) -> dict:
    learn = [r for r in records if r.stage == "learn"]
    unlearn = [r for r in records if r.stage == "unlearn"]
    out = {}
    if learn:
        out.update(learned_ra=learn[-1].ra, learned_fa=learn[-1].fa, learned_ta=learn[-1].ta,
                   learned_mia=learn[-1].mia)
    if unlearn:
        out.update(final_ra=unlearn[-1].ra, final_fa=unlearn[-1].fa, final_ta=unlearn[-1].ta,
                   final_mia=unlearn[-1].mia)
        tail = unlearn[-10:]
        out["tail_cos_retain"] = float(np.nanmean([r.cos_retain for r in tail]))
        cf = [r.cos_forget for r in tail if not math.isnan(r.cos_forget)]
        out["tail_cos_forget"] = float(np.mean(cf)) if cf else float("nan")
    series = forget_series(records)
    if series:
        rep = time_to_forget(series)
        out.update(t2f=rep.t2f, t2f_round=rep.best_round)
    out["payload_bytes_total"] = sum(r.payload_bytes for r in records)
    out["flops_total"] = sum(r.flops for r in records)
    return out


# ---------------------------------------------------------------------------
# Latent invariance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InvarianceReport:
    """Cross-domain spread of per-class latent means relative to class separation."""

    k_cross_domain: float
    k_inter_class: float
    v_cross_domain: float
    v_inter_class: float

    @property
    def k_ratio(self) -> float:
        return self.k_cross_domain / self.k_inter_class

    @property
    def v_ratio(self) -> float:
        return self.v_cross_domain / self.v_inter_class


def _class_means(z, labels, domains):
    doms, classes = np.unique(domains), np.unique(labels)
    return np.array([[z[(domains == d) & (labels == c)].mean(axis=0) for c in classes] for d in doms])


def _spread(means):
    """(mean distance between domains for a fixed class, mean distance between classes within a domain)."""
    nd, nc = means.shape[:2]
    cross = [np.linalg.norm(means[a, c] - means[b, c])
             for c in range(nc) for a in range(nd) for b in range(a + 1, nd)]
    inter = [np.linalg.norm(means[d, a] - means[d, b])
             for d in range(nd) for a in range(nc) for b in range(a + 1, nc)]
    return float(np.mean(cross)), float(np.mean(inter))


def latent_invariance(model: DisentangledModel, data: LabeledDataset) -> InvarianceReport:
    """Compare deterministic z_K / z_V class means across the domains present in ``data``.

    Every (domain, class) cell must be non-empty and at least two domains present.
    """
    from .model import forward
    if len(np.unique(data.domain_ids)) < 2:
        raise ValueError("need at least two domains")
    out = forward(model, data.inputs, stochastic=False, need_decoder=False)
    kc, ki = _spread(_class_means(out.z_k_mean, data.labels, data.domain_ids))
    vc, vi = _spread(_class_means(out.z_v_mean, data.labels, data.domain_ids))
    return InvarianceReport(kc, ki, vc, vi)
