"""Adaptive site weights: penalized influence objective, solver, combination, variance.

Notation: K sites in total, the target first, then K-1 sources.  ``eta`` on
the sources lives in {eta >= 0, sum(eta) <= 1}; the target gets 1 - sum(eta).

The objective is Q(eta) = sum_i (Y~_i - sum_k eta_k X~_ik)^2 + lam * sum_k p(eta_k) d_k^2
with Y~_i = xi_iT and X~_ik = xi_iT - xi_ik - d_k over all N patients.
Influence values enter as sqrt(kappa) * xi where xi is on the all-patients
scale; kappa = 1/N (the default, ``scale="mse"``) puts the variance part of
Q on the same footing as the squared bias, kappa = 1 is the raw sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import TreatmentArm

L1 = "l1"
L2 = "l2"
DEFAULT_LAMBDA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0)
Z95 = 1.959963984540054


class SummaryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QSummaries:
    s_y: float
    s_x: np.ndarray
    s_xy: np.ndarray
    delta: np.ndarray
    site_sizes: np.ndarray
    n_total: int

    def __post_init__(self):
        s_x = np.atleast_2d(np.asarray(self.s_x, dtype=float))
        s_xy = np.atleast_1d(np.asarray(self.s_xy, dtype=float))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        m = delta.shape[0]
        if m == 0:
            s_x = np.zeros((0, 0))
            s_xy = np.zeros(0)
        if s_x.shape != (m, m) or s_xy.shape != (m,):
            raise SummaryError(f"dimension mismatch: s_x {s_x.shape}, s_xy {s_xy.shape}, delta {m}")
        for name, v in (("s_y", self.s_y), ("s_x", s_x), ("s_xy", s_xy), ("delta", delta)):
            if not np.all(np.isfinite(v)):
                raise SummaryError(f"non-finite {name}")
        object.__setattr__(self, "s_x", 0.5 * (s_x + s_x.T))
        object.__setattr__(self, "s_xy", s_xy)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "site_sizes", np.asarray(self.site_sizes, dtype=int))
        object.__setattr__(self, "s_y", float(self.s_y))

    @property
    def n_sources(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True, eq=False)
class WeightSolution:
    eta: np.ndarray          # length K, target first
    lam: float
    objective_value: float
    penalty: str

    @property
    def lambda_(self):
        return self.lam


@dataclass(frozen=True, eq=False)
class GlobalEstimate:
    arm: TreatmentArm
    value: float
    se: float
    ci95: tuple
    weights: WeightSolution


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TargetSummary:
    """What the target keeps about its own patients for one arm.

    w_i = (phi_i, u_i, z_i): AIPW influence, outcome-model part and centred
    covariates.  Only the cross-products leave the patient level.
    """
    n: int
    value: float
    w_sum: np.ndarray
    w_cross: np.ndarray

    @classmethod
    def from_estimate(cls, est) -> "TargetSummary":
        W = np.column_stack([est.per_patient_if, est.or_part, est.centered_x])
        return cls(est.n_contributing, est.value, W.sum(axis=0), W.T @ W)


@dataclass(frozen=True, eq=False)
class SourceSummary:
    """Per-source, per-arm scalars: sum and sum of squares of the
    source-patient influence values, size, and the tilt gradient."""
    n: int
    value: float
    if_sum: float
    if_sumsq: float
    tilt_gradient: np.ndarray

    @classmethod
    def from_estimate(cls, est) -> "SourceSummary":
        s = est.per_patient_if
        return cls(est.n_contributing, est.value, float(s.sum()), float(s @ s),
                   np.asarray(est.tilt_gradient, dtype=float))


def scale_factor(scale: str, n_total: int) -> float:
    if scale == "mse":
        return 1.0 / n_total
    if scale == "sum":
        return 1.0
    raise ValueError(f"unknown objective scale {scale!r}")


def build_summaries_raw(target_if, source_ifs: Sequence, deltas, site_sizes=None,
                        scale: str = "mse") -> QSummaries:
    """Summaries by literal sums over all-patient influence vectors.

    ``target_if`` and each entry of ``source_ifs`` have length N on the
    all-patients scale (zeros for patients outside the estimator's sites).
    """
    y = np.asarray(target_if, dtype=float)
    N = y.shape[0]
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    if len(source_ifs) != deltas.shape[0]:
        raise SummaryError("one delta per source is required")
    r = np.sqrt(scale_factor(scale, N))
    if len(source_ifs):
        S = np.column_stack([np.asarray(v, dtype=float) for v in source_ifs])
        if S.shape[0] != N:
            raise SummaryError("influence vectors must share length N")
        Xt = r * (y[:, None] - S) - deltas[None, :]
    else:
        Xt = np.zeros((N, 0))
    Yt = r * y
    sizes = site_sizes if site_sizes is not None else []
    return QSummaries(float(Yt @ Yt), Xt.T @ Xt, Xt.T @ Yt, deltas, sizes, N)


def build_summaries(target: TargetSummary, sources: Sequence[SourceSummary],
                    scale: str = "mse") -> QSummaries:
    """Exact summaries from the compressed per-site quantities."""
    m = len(sources)
    N = target.n + sum(s.n for s in sources)
    kappa = scale_factor(scale, N)
    a = np.sqrt(kappa) * N / target.n
    M, Sv = target.w_cross, target.w_sum
    q = M.shape[0]
    delta = np.array([s.value - target.value for s in sources])
    E = np.zeros((q, m))
    for k, s in enumerate(sources):
        g = np.asarray(s.tilt_gradient, dtype=float)
        if g.shape[0] != q - 2:
            raise SummaryError("tilt gradient length does not match the target summary")
        E[0, k], E[1, k] = 1.0, -1.0
        E[2:, k] = -g
    s_y = a * a * M[0, 0]
    eS = E.T @ Sv
    s_xy = a * a * (E.T @ M[:, 0]) - a * delta * Sv[0]
    s_x = (a * a * (E.T @ M @ E) - a * np.outer(eS, delta) - a * np.outer(delta, eS)
           + target.n * np.outer(delta, delta))
    for k, s in enumerate(sources):
        b = np.sqrt(kappa) * N / s.n
        s_x += s.n * np.outer(delta, delta)
        row = b * delta * s.if_sum
        s_x[k, :] += row
        s_x[:, k] += row
        s_x[k, k] += b * b * s.if_sumsq
    sizes = [target.n] + [s.n for s in sources]
    return QSummaries(s_y, s_x, s_xy, delta, sizes, N)


def q_objective(summ: QSummaries, eta_sources, lam: float = 0.0, penalty: str = L1) -> float:
    e = np.asarray(eta_sources, dtype=float)
    pen = e if penalty == L1 else e * e
    return float(summ.s_y - 2.0 * e @ summ.s_xy + e @ summ.s_x @ e
                 + lam * np.sum(pen * summ.delta ** 2))


# --------------------------------------------------------------------------
# solver: min 0.5 x'Gx + c'x  s.t.  x >= 0, sum x <= 1
# --------------------------------------------------------------------------

def _qp_terms(summ, lam, penalty):
    d2 = summ.delta ** 2
    G = 2.0 * summ.s_x
    c = -2.0 * summ.s_xy
    if penalty == L1:
        c = c + lam * d2
    elif penalty == L2:
        G = G + 2.0 * lam * np.diag(d2)
    else:
        raise ValueError(f"unknown penalty {penalty!r}")
    return G, c


def project_capped_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x <= 1}."""
    v = np.asarray(v, dtype=float)
    x = np.maximum(v, 0.0)
    if x.sum() <= 1.0:
        return x
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def projected_gradient(G, c, x0=None, max_iter=10_000, rtol=1e-12):
    """Accelerated projected gradient with restart; slow but simple."""
    m = c.shape[0]
    L = max(float(np.linalg.eigvalsh(G)[-1]) if m else 0.0, 1e-300)
    x = project_capped_simplex(np.zeros(m) if x0 is None else x0)
    f = lambda z: 0.5 * z @ G @ z + c @ z
    y, t, fx = x.copy(), 1.0, f(x)
    for _ in range(max_iter):
        xn = project_capped_simplex(y - (G @ y + c) / L)
        fn = f(xn)
        if fn > fx:  # restart momentum
            y, t = x.copy(), 1.0
            continue
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = xn + (t - 1) / tn * (xn - x)
        done = fx - fn <= rtol * max(abs(fx), 1e-300)
        x, fx, t = xn, fn, tn
        if done:
            break
    return x


def _eqp_step(G, g, free, cap):
    """Minimizer step of the quadratic over the current face of the feasible set."""
    m = g.shape[0]
    p = np.zeros(m)
    nf = free.size
    if nf == 0:
        return p
    Gf = G[np.ix_(free, free)]
    if cap:
        K = np.empty((nf + 1, nf + 1))
        K[:nf, :nf] = Gf
        K[:nf, nf] = 1.0
        K[nf, :nf] = 1.0
        K[nf, nf] = 0.0
        rhs = np.empty(nf + 1)
        rhs[:nf] = -g[free]
        rhs[nf] = 0.0
    else:
        K, rhs = Gf, -g[free]
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    p[free] = sol[:nf]
    return p


def _active_set(G, c, x0=None, max_iter=500):
    """Primal active-set method for min 0.5 x'Gx + c'x, x >= 0, sum x <= 1.

    Starts from the vertex x = 0 or from a feasible warm start.  Returns None
    if it fails to terminate (degenerate cycling).
    """
    m = c.shape[0]
    if x0 is None:
        x = np.zeros(m)
    else:
        x = project_capped_simplex(x0)
    bound = x <= 0.0                 # x_k >= 0 held active
    x[bound] = 0.0
    cap = bool(abs(x.sum() - 1.0) <= 1e-15) and not bound.all()
    scale = max(np.abs(G).max(initial=0.0), np.abs(c).max(initial=0.0), 1e-300)
    tol = 1e-13 * scale
    for _ in range(max_iter):
        g = G @ x + c
        free = np.flatnonzero(~bound)
        p = _eqp_step(G, g, free, cap)
        alpha, block = 1.0, None
        for k in free:
            if p[k] < 0.0:
                a = -x[k] / p[k]
                if a < alpha:
                    alpha, block = a, k
        sp = p.sum()
        if not cap and sp > 0.0:
            a = (1.0 - x.sum()) / sp
            if a < alpha:
                alpha, block = a, m
        x = np.maximum(x + max(alpha, 0.0) * p, 0.0)
        if block is not None:
            if block == m:
                cap = True
            else:
                bound[block] = True
                x[block] = 0.0
            continue
        # full step: x minimizes over the current face; check multipliers
        g = G @ x + c
        free = np.flatnonzero(~bound)
        lam_cap = -float(np.mean(g[free])) if (cap and free.size) else 0.0
        worst, which = 0.0, None
        for k in np.flatnonzero(bound):
            if g[k] + lam_cap < worst:
                worst, which = g[k] + lam_cap, k
        if cap and lam_cap < worst:
            worst, which = lam_cap, m
        if which is None or worst >= -tol:
            return x
        if which == m:
            cap = False
        else:
            bound[which] = False
    return None


def _kkt_violation(G, c, x):
    """Size of the best descent available from x (projected-gradient residual)."""
    g = G @ x + c
    return float(np.max(np.abs(x - project_capped_simplex(x - g)), initial=0.0))


def solve_weights(summ: QSummaries, lam: float, penalty: str = L1,
                  warm_start=None) -> WeightSolution:
    """Minimize the penalized objective over the capped simplex.

    ``warm_start`` (source weights) only affects speed, not the answer.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValueError("lambda must be a finite non-negative number")
    m = summ.n_sources
    if m == 0:
        return WeightSolution(np.array([1.0]), float(lam), summ.s_y, penalty)
    G, c = _qp_terms(summ, lam, penalty)
    x = _active_set(G, c, warm_start)
    if x is None and warm_start is not None:
        x = _active_set(G, c)
    if x is None or _kkt_violation(G, c, x) > 1e-9 * max(1.0, np.abs(c).max()):
        x = projected_gradient(G, c, x0=x)
    x = np.maximum(x, 0.0)
    s = x.sum()
    if s > 1.0:
        x = x / s
    eta = np.concatenate([[max(0.0, 1.0 - x.sum())], x])
    return WeightSolution(eta, float(lam), q_objective(summ, x, lam, penalty), penalty)


# --------------------------------------------------------------------------
# combination and variance
# --------------------------------------------------------------------------

def combine(target_value: float, source_values, weights: WeightSolution | np.ndarray) -> float:
    eta = weights.eta if isinstance(weights, WeightSolution) else np.asarray(weights)
    sv = np.asarray(source_values, dtype=float)
    t = float(getattr(target_value, "value", target_value))
    return float(t + eta[1:] @ (sv - t))


def combined_if_sumsq(eta, target: TargetSummary, sources: Sequence[SourceSummary]) -> float:
    """sum_i (sum_k eta_k xi_ik)^2 over all patients, all-patients scale."""
    N = target.n + sum(s.n for s in sources)
    q = target.w_cross.shape[0]
    coef = np.zeros(q)
    coef[0] = eta[0]
    for k, s in enumerate(sources):
        coef[1] += eta[k + 1]
        coef[2:] += eta[k + 1] * s.tilt_gradient
    a = N / target.n
    total = a * a * coef @ target.w_cross @ coef
    for k, s in enumerate(sources):
        b = N / s.n
        total += (eta[k + 1] * b) ** 2 * s.if_sumsq
    return float(total)


def global_variance(weights, target_if, source_ifs, value: float = 0.0):
    """se and 95% interval from all-patients influence vectors.

    ``target_if`` and ``source_ifs`` are length-N vectors on the
    all-patients scale.  Cross-site terms are kept: the target patients
    influence every source estimate through the target outcome model.
    """
    eta = weights.eta if isinstance(weights, WeightSolution) else np.asarray(weights)
    comb = eta[0] * np.asarray(target_if, dtype=float)
    for k, v in enumerate(source_ifs):
        comb = comb + eta[k + 1] * np.asarray(v, dtype=float)
    N = comb.shape[0]
    se = float(np.sqrt(comb @ comb) / N)
    return se, (value - Z95 * se, value + Z95 * se)


def make_global(arm, value, se, weights) -> GlobalEstimate:
    return GlobalEstimate(TreatmentArm(int(arm)), float(value), float(se),
                          (value - Z95 * se, value + Z95 * se), weights)


def global_tate(est1: GlobalEstimate, est0: GlobalEstimate):
    """Treated minus control; arm variances are added."""
    d = est1.value - est0.value
    se = float(np.sqrt(est1.se ** 2 + est0.se ** 2))
    return d, se, (d - Z95 * se, d + Z95 * se)


# --------------------------------------------------------------------------
# lambda selection from per-split ingredients
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitArm:
    """One arm of one half/half split: training summaries and validation target."""
    summaries: QSummaries
    target_value: float
    source_values: np.ndarray
    validation_value: float


def validation_losses(splits: Sequence[Sequence[SplitArm]], grid, penalty: str) -> np.ndarray:
    """Sum over splits and arms of (combined training estimate - validation target)^2."""
    loss = np.zeros(len(grid))
    for arms in splits:
        for sa in arms:
            prev = None
            for j, lam in enumerate(grid):
                w = solve_weights(sa.summaries, lam, penalty, prev)
                prev = w.eta[1:]
                est = combine(sa.target_value, sa.source_values, w)
                loss[j] += (est - sa.validation_value) ** 2
    return loss


def pick_lambda(grid, loss) -> float:
    """Smallest grid value whose loss is within 1e-9 (relative) of the minimum."""
    grid = list(grid)
    loss = np.asarray(loss, dtype=float)
    best = loss.min()
    ok = np.flatnonzero(loss <= best + 1e-9 * max(abs(best), 1e-300))
    return float(min(grid[i] for i in ok))


def select_lambda_from_splits(splits, grid, penalty: str) -> float:
    grid = list(grid)
    if len(grid) == 1:
        return float(grid[0])
    if not splits:
        return float(min(grid))
    return pick_lambda(grid, validation_losses(splits, grid, penalty))
