"""Server-side aggregation and data-free gradient-matching unlearning.

The unlearning direction is ``g = g_fl + kappa*|g_fl| * d/|d|`` with
``d = sum_R gamma_u g_u - beta * sum_F gamma_v g_v``.  This is the maximiser
of ``<g, d>`` on the sphere of radius ``kappa*|g_fl|`` around ``g_fl``.  The
mixing weights are the minimisers of the dual objective
``J = d.g_fl + kappa**p * |g_fl| * |d|`` over two independent probability
simplexes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import FORGET, RETAIN
from .errors import NumericError, ShapeError, WeightError
from .numerics import ParamVector, cosine_similarity, project_to_simplex


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64).ravel()


def _stack(updates) -> np.ndarray:
    rows = [_as_array(u) for u in updates]
    if not rows:
        raise ShapeError("need at least one update")
    n = rows[0].size
    if any(r.size != n for r in rows):
        raise ShapeError("updates have different lengths")
    return np.vstack(rows)


def fedavg_aggregate(vectors: Sequence, weights: Sequence[float] | None = None):
    """Weighted element-wise mean.  Returns a ParamVector if the inputs are ParamVectors."""
    M = _stack(vectors)
    w = np.full(M.shape[0], 1.0 / M.shape[0]) if weights is None else np.asarray(weights, float)
    if w.size != M.shape[0]:
        raise ShapeError("one weight per vector required")
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise WeightError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
    # skip zero weights so that weights (1, 0) return the first vector bit-for-bit
    out = np.zeros(M.shape[1])
    for wi, row in zip(w, M):
        if wi != 0.0:
            out += wi * row
    first = vectors[0]
    return first.with_values(out) if isinstance(first, ParamVector) else out


@dataclass(frozen=True)
class MatchConfig:
    kappa: float = 0.5
    dual_exponent: float = 1.0  # 1 -> kappa ; 0.5 -> sqrt(kappa)
    beta: float = 1.0
    solver_steps: int = 500
    solver_rate: float = 0.05
    degeneracy_eps: float = 1e-12

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.solver_steps < 1:
            raise ValueError("solver_steps must be >= 1")
        if self.dual_exponent not in (1.0, 0.5):
            raise ValueError("dual_exponent must be 1 or 0.5")


@dataclass(frozen=True)
class GammaWeights:
    retain: np.ndarray
    forget: np.ndarray


@dataclass
class MatchingSolution:
    gamma: GammaWeights | None = None
    g_retain: np.ndarray | None = None
    g_forget: np.ndarray | None = None
    objective: float = float("nan")
    g_foul: np.ndarray | None = None
    degenerate: bool = False


def dual_objective(gamma: GammaWeights, updates_r, updates_f, g_fl, config: MatchConfig) -> float:
    GR, GF, g = _stack(updates_r), _stack(updates_f), _as_array(g_fl)
    d = gamma.retain @ GR - config.beta * (gamma.forget @ GF)
    coef = config.kappa ** config.dual_exponent
    return float(d @ g + coef * np.linalg.norm(g) * np.linalg.norm(d))


def _objective_and_grad(gr, gf, GR, GF, g, coef, beta, gnorm):
    d = gr @ GR - beta * (gf @ GF)
    dn = np.linalg.norm(d)
    J = d @ g + coef * gnorm * dn
    # subgradient 0 for the norm term at d == 0
    direction = g + (coef * gnorm / dn) * d if dn > 0 else g
    return J, GR @ direction, -beta * (GF @ direction)


def optimize_gamma(updates_r, updates_f, g_fl, config: MatchConfig, rng=None) -> MatchingSolution:
    """Projected gradient descent on the dual objective over two simplexes.

    Starts from uniform weights.  Each step moves by ``step`` along the
    gradient divided by its largest entry, so the step size means the same
    thing at any gradient scale.  A step is kept only if it lowers the
    objective; the step then grows by 1.5, otherwise it halves.  The kept
    iterate is therefore always the best one seen.  ``rng`` is accepted for
    interface symmetry; the solver itself is deterministic.
    """
    GR, GF, g = _stack(updates_r), _stack(updates_f), _as_array(g_fl)
    if GR.shape[1] != GF.shape[1] or GR.shape[1] != g.size:
        raise ShapeError("retain, forget and FedAvg vectors must share a length")
    if not (np.all(np.isfinite(GR)) and np.all(np.isfinite(GF)) and np.all(np.isfinite(g))):
        raise NumericError("non-finite client update")
    coef = config.kappa ** config.dual_exponent
    gnorm = np.linalg.norm(g)

    gr = np.full(GR.shape[0], 1.0 / GR.shape[0])
    gf = np.full(GF.shape[0], 1.0 / GF.shape[0])
    J, dgr, dgf = _objective_and_grad(gr, gf, GR, GF, g, coef, config.beta, gnorm)
    step = config.solver_rate
    for _ in range(config.solver_steps):
        size = max(np.abs(dgr).max(), np.abs(dgf).max())
        if size == 0.0:
            break
        nr = project_to_simplex(gr - (step / size) * dgr)
        nf = project_to_simplex(gf - (step / size) * dgf)
        Jn, nr_grad, nf_grad = _objective_and_grad(nr, nf, GR, GF, g, coef, config.beta, gnorm)
        if Jn < J:
            gr, gf, J, dgr, dgf = nr, nf, Jn, nr_grad, nf_grad
            step *= 1.5
        else:
            step *= 0.5
    gamma = GammaWeights(gr, gf)
    return MatchingSolution(gamma=gamma, g_retain=gr @ GR, g_forget=gf @ GF,
                            objective=dual_objective(gamma, GR, GF, g, config))


def compute_foul_gradient(g_fl, g_retain, g_forget, config: MatchConfig,
                          solution: MatchingSolution | None = None) -> MatchingSolution:
    g = _as_array(g_fl)
    gr, gf = _as_array(g_retain), _as_array(g_forget)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(gr)) and np.all(np.isfinite(gf))):
        raise NumericError("non-finite gradient")
    sol = solution if solution is not None else MatchingSolution(g_retain=gr, g_forget=gf)
    d = gr - config.beta * gf
    dn = np.linalg.norm(d)
    if dn < config.degeneracy_eps:
        sol.g_foul = g.copy()
        sol.degenerate = True
    else:
        sol.g_foul = g + (config.kappa * np.linalg.norm(g) / dn) * d
        sol.degenerate = False
    return sol


def apply_unlearn_update(theta_v, g_foul, eta_g: float):
    t, gf = _as_array(theta_v), _as_array(g_foul)
    if t.size != gf.size:
        raise ShapeError("parameter and gradient lengths differ")
    out = t - eta_g * gf
    return theta_v.with_values(out) if isinstance(theta_v, ParamVector) else out


def matched_unlearning_step(updates: Sequence, theta_v, config: MatchConfig, eta_g: float,
                            weights: Sequence[float] | None = None, g_fl=None):
    """One server round: FedAvg direction, Γ solve, matched gradient, update.

    ``updates`` are objects with ``client_id``, ``role`` and ``pseudo_grad``;
    they are ordered by client id first so arrival order never matters.
    """
    ups = sorted(updates, key=lambda u: u.client_id)
    if weights is None:
        weights = np.full(len(ups), 1.0 / len(ups))
    if g_fl is None:
        g_fl = fedavg_aggregate([u.pseudo_grad for u in ups], weights)
    retain = [u.pseudo_grad for u in ups if u.role == RETAIN]
    forget = [u.pseudo_grad for u in ups if u.role == FORGET]
    sol = optimize_gamma(retain, forget, g_fl, config)
    compute_foul_gradient(g_fl, sol.g_retain, sol.g_forget, config, solution=sol)
    return apply_unlearn_update(theta_v, sol.g_foul, eta_g), sol


@dataclass
class AngleStats:
    retain_mean: float = float("nan")
    forget_mean: float = float("nan")
    excluded: int = 0
    degenerate: bool = False
    per_client: dict = field(default_factory=dict)


def gradient_angle_stats(g_global, updates: Sequence[tuple[int, str, object]]) -> AngleStats:
    """Mean cosine between the global direction and each role's client updates.

    Zero-norm updates are skipped and counted in ``excluded``.
    """
    g = _as_array(g_global)
    stats = AngleStats()
    if np.linalg.norm(g) == 0.0:
        stats.degenerate = True
        stats.excluded = len(updates)
        return stats
    by_role = {RETAIN: [], FORGET: []}
    for cid, role, vec in sorted(updates, key=lambda t: t[0]):
        v = _as_array(vec)
        if np.linalg.norm(v) == 0.0:
            stats.excluded += 1
            continue
        c = cosine_similarity(g, v)
        stats.per_client[cid] = c
        by_role[role].append(c)
    if by_role[RETAIN]:
        stats.retain_mean = float(np.mean(by_role[RETAIN]))
    if by_role[FORGET]:
        stats.forget_mean = float(np.mean(by_role[FORGET]))
    stats.degenerate = not (by_role[RETAIN] or by_role[FORGET])
    return stats
