"""Data-generating process for multi-site studies and the Monte Carlo study runner."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import expit

from .domain import SeedSpec, SiteDataset, derive_seed
from .ensemble import L1, L2, DEFAULT_LAMBDA_GRID, Z95
from .estimators import default_mode, local_aipw, target_aipw
from .federation import (ARM_KEYS, ARMS, DEFAULT_SPLITS, SOURCE_FAILURES, aggregate,
                         run_source_round, run_target_round)
from .nuisance import FitError, fit_outcomes, fit_propensity

SPECS = ("I", "II", "III", "IV", "V")
TARGET_ONLY = "Target-Only"
SS_NAIVE = "SS (naive)"
SS = "SS"
GLOBAL_L2 = "GLOBAL-l2"
GLOBAL_L1 = "GLOBAL-l1"
FIXED_EFFECTS = "Fixed-Effects"
ESTIMATORS = (TARGET_ONLY, SS_NAIVE, SS, GLOBAL_L2, GLOBAL_L1)
TARGET_N = 100


@dataclass(frozen=True)
class SkewNormalParams:
    location: float
    scale: float = 1.0
    skew: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("skew-normal scale must be positive")

    @property
    def mean(self) -> float:
        d = self.skew / math.sqrt(1 + self.skew ** 2)
        return self.location + self.scale * d * math.sqrt(2 / math.pi)


@dataclass(frozen=True)
class DgpConfig:
    K: int = 10
    P: int = 2
    density: str = "sparse"
    specification: str = "I"
    target_n: int = TARGET_N
    seed: int = 0
    mu1: str = "analytic"   # or "empirical": centre outcomes at the target sample mean

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.P < 2:
            raise ValueError("P must be at least 2")
        if self.density not in ("dense", "sparse"):
            raise ValueError(f"density must be dense or sparse, got {self.density!r}")
        if self.specification not in SPECS:
            raise ValueError(f"specification must be one of {SPECS}")
        if self.mu1 not in ("analytic", "empirical"):
            raise ValueError("mu1 must be analytic or empirical")


@dataclass
class MetricsRow:
    estimator: str
    bias: float
    rmse: float
    coverage: float
    ci_length: float
    n_fail: int = 0


# --------------------------------------------------------------------------
# samplers
# --------------------------------------------------------------------------

def sample_skew_normal(params: SkewNormalParams, n: int, rng: np.random.Generator) -> np.ndarray:
    d = params.skew / math.sqrt(1 + params.skew ** 2)
    z0 = np.abs(rng.standard_normal(n))
    z1 = rng.standard_normal(n)
    return params.location + params.scale * (d * z0 + math.sqrt(1 - d * d) * z1)


def sample_site_sizes(K: int, rng: np.random.Generator) -> np.ndarray:
    """K-1 source sizes: Gamma(shape 16, rate 0.08) clamped below at 50."""
    if K < 2:
        raise ValueError("K must be at least 2")
    g = rng.gamma(16.0, 1.0 / 0.08, size=K - 1)
    return np.rint(np.maximum(g, 50.0)).astype(int)


# --------------------------------------------------------------------------
# generating model
# --------------------------------------------------------------------------

def locations(P: int) -> np.ndarray:
    p = np.arange(1, P + 1)
    return 0.15 + 0.05 * (1 - p) / (P - 1)


def coefficients(cfg: DgpConfig) -> dict:
    P = cfg.P
    b10 = np.linspace(0.4, 1.2, P) / P
    quad = cfg.specification in ("II", "IV", "V")
    return {
        "beta10": b10,
        "beta11": 3 * b10,
        "beta20": np.linspace(0.2, 0.4, P) if quad else np.zeros(P),
        "beta21": np.linspace(0.2, 0.4, P) if quad else np.zeros(P),
        "alpha1": np.linspace(0.5, -0.5, P),
        "alpha2": np.linspace(0.15, -0.15, P),
        "noise_sd": 1.5 * P,
    }


def _continuous_dims(cfg: DgpConfig) -> int:
    return 2 if (cfg.density == "sparse" and cfg.P == 10) else cfg.P


def site_skews(cfg: DgpConfig, sizes: np.ndarray) -> np.ndarray:
    """Skew parameter per (site, continuous covariate); row 0 is the target."""
    K = cfg.K
    pc = _continuous_dims(cfg)
    all_n = np.concatenate([[cfg.target_n], sizes]).astype(float)
    skew = np.zeros((K, pc))
    if cfg.density == "sparse":
        hi = np.percentile(all_n, 65 - K / 10)
        lo = np.percentile(all_n, 35 + K / 10)
        for k in range(1, K):
            if all_n[k] >= hi or all_n[k] <= lo:
                skew[k, :min(2, pc)] = 2.0
    else:
        q1, q3 = np.percentile(all_n, [25, 75])
        for k in range(1, K):
            if all_n[k] >= q3:
                skew[k] = 3 * 2 / cfg.P
            elif all_n[k] <= q1:
                skew[k] = -1 * 2 / cfg.P
    return skew


def quadratic_propensity(cfg: DgpConfig, sizes: np.ndarray) -> np.ndarray:
    """Whether each site's true propensity has the squared terms."""
    K = cfg.K
    if cfg.specification in ("III", "IV"):
        return np.ones(K, dtype=bool)
    if cfg.specification == "V":
        all_n = np.concatenate([[cfg.target_n], sizes]).astype(float)
        q1, q3 = np.percentile(all_n, [25, 75])
        out = ~((all_n > q1) & (all_n < q3))
        out[0] = False
        return out
    return np.zeros(K, dtype=bool)


def target_mean(cfg: DgpConfig) -> np.ndarray:
    """Analytic mean of the target covariate law."""
    m = locations(cfg.P)
    pc = _continuous_dims(cfg)
    return np.concatenate([m[:pc], np.full(cfg.P - pc, 0.5)])


@dataclass(frozen=True, eq=False)
class Study:
    sites: list
    potential: list          # per site (Y1, Y0); never part of a SiteDataset
    sizes: np.ndarray
    skews: np.ndarray


def _draw_covariates(cfg, k, n, skew, rng):
    loc = locations(cfg.P)
    pc = _continuous_dims(cfg)
    cols = [sample_skew_normal(SkewNormalParams(loc[j], 1.0, skew[j]), n, rng) for j in range(pc)]
    for j in range(pc, cfg.P):
        theta = 0.5 if k == 0 else 0.45 + 0.1 * ((j + 1) - 3) / 7
        cols.append(rng.binomial(1, theta, n).astype(float))
    return np.column_stack(cols)


def generate_study(cfg: DgpConfig, rng: np.random.Generator) -> Study:
    c = coefficients(cfg)
    sizes = sample_site_sizes(cfg.K, rng)
    skews = site_skews(cfg, sizes)
    quad_ps = quadratic_propensity(cfg, sizes)
    all_n = np.concatenate([[cfg.target_n], sizes])
    Xs = [_draw_covariates(cfg, k, int(all_n[k]), skews[k], rng) for k in range(cfg.K)]
    mu1 = target_mean(cfg) if cfg.mu1 == "analytic" else Xs[0].mean(axis=0)
    sites, pots = [], []
    for k in range(cfg.K):
        X = Xs[k]
        n = X.shape[0]
        lin = X @ c["alpha1"] + (X ** 2 @ c["alpha2"] if quad_ps[k] else 0.0)
        pi = expit(lin)
        for _ in range(21):
            A = rng.binomial(1, pi).astype(float)
            if 0 < A.sum() < n:
                break
        eps = rng.normal(0.0, c["noise_sd"], n)
        Xc = X - mu1
        y1 = Xc @ c["beta11"] + X ** 2 @ c["beta21"] + 3 + eps
        y0 = Xc @ c["beta10"] + X ** 2 @ c["beta20"] + eps
        Y = np.where(A == 1, y1, y0)
        sid = "T" if k == 0 else f"S{k:02d}"
        sites.append(SiteDataset(sid, X, A, Y))
        pots.append((y1, y0))
    return Study(sites, pots, sizes, skews)


def generate_sites(cfg: DgpConfig, rng: np.random.Generator) -> list:
    """Site datasets, target first."""
    return generate_study(cfg, rng).sites


@lru_cache(maxsize=64)
def _true_tate_cached(K, P, density, specification, n_draws, oracle_seed):
    cfg = DgpConfig(K=K, P=P, density=density, specification=specification)
    c = coefficients(cfg)
    mu1 = target_mean(cfg)
    rng = np.random.default_rng(oracle_seed)
    skew = np.zeros(_continuous_dims(cfg))
    total = total2 = 0.0
    chunk = 1_000_000
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        X = _draw_covariates(cfg, 0, m, skew, rng)
        d = (X - mu1) @ (c["beta11"] - c["beta10"]) + X ** 2 @ (c["beta21"] - c["beta20"]) + 3.0
        total += d.sum()
        total2 += d @ d
        done += m
    mean = total / n_draws
    sd = math.sqrt(max(total2 / n_draws - mean * mean, 0.0))
    return mean, sd / math.sqrt(n_draws)


def true_tate(cfg: DgpConfig, n_draws: int = 10_000_000, oracle_seed: int = 20240601,
              with_se: bool = False):
    """Target-population effect by Monte Carlo over the target covariate law."""
    v, se = _true_tate_cached(cfg.K, cfg.P, cfg.density, cfg.specification, n_draws, oracle_seed)
    return (v, se) if with_se else v


# --------------------------------------------------------------------------
# comparators
# --------------------------------------------------------------------------

def fixed_effects_tate(sites: Sequence[SiteDataset], target_index: int = 0):
    """OLS with site intercepts, site-specific treatment effects and common slopes.

    Returns (target site's treatment coefficient, its OLS standard error).
    """
    K = len(sites)
    rows = []
    for k, ds in enumerate(sites):
        site = np.zeros((ds.n, K))
        site[:, k] = 1.0
        rows.append(np.column_stack([site, site * ds.treatment[:, None], ds.covariates]))
    D = np.vstack(rows)
    y = np.concatenate([ds.outcome for ds in sites])
    G = D.T @ D
    if np.linalg.matrix_rank(G) < G.shape[0]:
        raise FitError("singular design")
    Ginv = np.linalg.inv(G)
    beta = Ginv @ (D.T @ y)
    r = y - D @ beta
    dof = D.shape[0] - D.shape[1]
    s2 = float(r @ r / dof) if dof > 0 else 0.0
    j = K + target_index
    return float(beta[j]), float(math.sqrt(s2 * Ginv[j, j]))


def _interval(v, se):
    return (v, se, v - Z95 * se, v + Z95 * se)


def run_replication(cfg: DgpConfig, estimators=ESTIMATORS, lambda_grid=DEFAULT_LAMBDA_GRID,
                    seed: int = 0, n_splits: int = DEFAULT_SPLITS, clip: float = 1e-3,
                    scale: str = "mse", study: Study | None = None) -> dict:
    """One simulated study; estimator name -> (tate, se, lo, hi) or an error string."""
    if study is None:
        study = generate_study(cfg, np.random.default_rng(seed))
    sites = study.sites
    ds_T, sources = sites[0], sites[1:]
    out: dict = {}
    mode = default_mode(ds_T)
    want = set(estimators)

    try:
        ps_T, or_T = fit_propensity(ds_T), fit_outcomes(ds_T)
        t_est = {ARM_KEYS[a]: target_aipw(ds_T, ps_T, or_T, a, clip, mode) for a in ARMS}
    except SOURCE_FAILURES as exc:
        return {name: f"target: {exc}" for name in estimators}

    if TARGET_ONLY in want:
        d = t_est["treated"].value - t_est["control"].value
        se = math.sqrt(sum((e.per_patient_if @ e.per_patient_if) / e.n_contributing ** 2
                           for e in t_est.values()))
        out[TARGET_ONLY] = _interval(d, se)

    if SS_NAIVE in want:
        # each site's own AIPW estimate, pooled with sample-size weights
        vals = {k: [e.value] for k, e in t_est.items()}
        sq = {k: [e.per_patient_if @ e.per_patient_if] for k, e in t_est.items()}
        ns = [ds_T.n]
        for ds in sources:
            try:
                ps, orf = fit_propensity(ds), fit_outcomes(ds)
                loc = {ARM_KEYS[a]: local_aipw(ds, ps, orf, a, clip, mode) for a in ARMS}
            except SOURCE_FAILURES:
                continue
            ns.append(ds.n)
            for k, e in loc.items():
                vals[k].append(e.value)
                sq[k].append(e.per_patient_if @ e.per_patient_if)
        N = sum(ns)
        w = np.array(ns) / N
        arm_v = {k: float(w @ np.array(v)) for k, v in vals.items()}
        arm_var = {k: float(np.sum(np.array(sq[k]))) / N ** 2 for k in vals}
        d = arm_v["treated"] - arm_v["control"]
        out[SS_NAIVE] = _interval(d, math.sqrt(arm_var["treated"] + arm_var["control"]))

    if SS in want:
        from .pipeline import study_influence
        from .ensemble import global_variance
        try:
            per_arm, live, _ = study_influence(ds_T, sources, clip, mode)
            ns = np.array([ds_T.n] + [ds.n for ds in sources if ds.site_id in live], dtype=float)
            eta = ns / ns.sum()
            arm_v, arm_var = {}, {}
            for k, (tval, svals, tvec, svecs) in per_arm.items():
                arm_v[k] = float(eta[0] * tval + eta[1:] @ svals)
                se, _ = global_variance(eta, tvec, svecs)
                arm_var[k] = se ** 2
            d = arm_v["treated"] - arm_v["control"]
            out[SS] = _interval(d, math.sqrt(arm_var["treated"] + arm_var["control"]))
        except SOURCE_FAILURES as exc:
            out[SS] = str(exc)

    globals_wanted = [(GLOBAL_L2, L2), (GLOBAL_L1, L1)]
    if any(name in want for name, _ in globals_wanted):
        try:
            b, state = run_target_round(ds_T, n_splits, derive_seed(SeedSpec(seed, 0, "split")), clip, mode)
            replies = [run_source_round(ds, b) for ds in sources]
            for name, pen in globals_wanted:
                if name in want:
                    res = aggregate(b, state, replies, lambda_grid, pen, scale)
                    v, se, (lo, hi) = res.tate
                    out[name] = (v, se, lo, hi)
        except Exception as exc:  # record, keep the replication
            for name, _ in globals_wanted:
                if name in want:
                    out[name] = f"{type(exc).__name__}: {exc}"

    if FIXED_EFFECTS in want:
        try:
            v, se = fixed_effects_tate(sites)
            out[FIXED_EFFECTS] = _interval(v, se)
        except (FitError, np.linalg.LinAlgError) as exc:
            out[FIXED_EFFECTS] = str(exc)
    return out


# --------------------------------------------------------------------------
# study runner
# --------------------------------------------------------------------------

def _one(args):
    cfg, estimators, grid, master, rep, n_splits, scale = args
    seed = derive_seed(SeedSpec(master, rep, "dgp"))
    return run_replication(cfg, estimators, grid, seed, n_splits, scale=scale)


def run_replications(cfg: DgpConfig, n_reps: int, estimators=ESTIMATORS,
                     lambda_grid=DEFAULT_LAMBDA_GRID, master_seed: int = 0, workers: int = 1,
                     n_splits: int = DEFAULT_SPLITS, scale: str = "mse") -> list:
    jobs = [(cfg, tuple(estimators), tuple(lambda_grid), master_seed, r, n_splits, scale)
            for r in range(n_reps)]
    if workers <= 1:
        return [_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_one, jobs, chunksize=max(1, n_reps // (4 * workers))))


def summarize(results: list, truth: float, estimators=ESTIMATORS) -> list:
    rows = []
    for name in estimators:
        ok = [r[name] for r in results if isinstance(r.get(name), tuple)]
        n_fail = len(results) - len(ok)
        if not ok:
            rows.append(MetricsRow(name, float("nan"), float("nan"), float("nan"), float("nan"), n_fail))
            continue
        a = np.array(ok)
        est, lo, hi = a[:, 0], a[:, 2], a[:, 3]
        bias = abs(float(est.mean()) - truth)
        rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
        cov = 100.0 * float(np.mean((lo <= truth) & (truth <= hi)))
        rows.append(MetricsRow(name, bias, rmse, cov, float(np.mean(hi - lo)), n_fail))
    return rows


def run_study(cfg: DgpConfig, n_reps: int, estimators=ESTIMATORS, lambda_grid=DEFAULT_LAMBDA_GRID,
              master_seed: int = 0, workers: int = 1, n_splits: int = DEFAULT_SPLITS,
              scale: str = "mse", return_replications: bool = False):
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    results = run_replications(cfg, n_reps, estimators, lambda_grid, master_seed, workers,
                               n_splits, scale)
    truth = true_tate(cfg)
    rows = summarize(results, truth, estimators)
    return (rows, results) if return_replications else rows
