"""End-to-end acceptance checks.

Each test prints one line ``[criterion N] PASS|FAIL: ...`` and asserts the
stated threshold.  The Monte Carlo studies share module-scoped fixtures so
each design is simulated once.
"""

import itertools
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from fedtate.domain import SiteDataset, rng_for
from fedtate.ensemble import (L1, L2, DEFAULT_LAMBDA_GRID, SourceSummary, TargetSummary,
                              build_summaries, build_summaries_raw, q_objective, solve_weights)
from fedtate.estimators import (compute_source_if, source_augmented, target_aipw,
                                target_or_mean)
from fedtate.federation import (ARM_KEYS, aggregate, run_protocol, run_source_round,
                                run_target_round, serialize)
from fedtate.nuisance import fit_outcomes, fit_propensity
from fedtate.pipeline import pooled_estimate, study_influence
from fedtate.simulation import (GLOBAL_L1, GLOBAL_L2, SS, SS_NAIVE, TARGET_ONLY, DgpConfig,
                                SkewNormalParams, _draw_covariates, coefficients,
                                generate_study, run_replications, sample_site_sizes,
                                sample_skew_normal, summarize, target_mean, true_tate)
from fedtate.tilt import TargetMoments, density_ratio_weights, moment_residual, solve_tilt

MASTER_SEED = 2024


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


def check(capsys, n, items):
    """items: list of (label, ok, text); prints one line, then asserts."""
    ok = all(i[1] for i in items)
    report(capsys, n, ok, "; ".join(f"{lab} {txt}{'' if good else ' (x)'}"
                                    for lab, good, txt in items))
    assert ok, [lab for lab, good, _ in items if not good]


# --------------------------------------------------------------------------
# shared Monte Carlo studies
# --------------------------------------------------------------------------

def _study(spec, n_reps):
    cfg = DgpConfig(K=10, P=2, density="sparse", specification=spec)
    reps = run_replications(cfg, n_reps, master_seed=MASTER_SEED)
    return cfg, reps


@pytest.fixture(scope="module")
def spec_one():
    # 500 replications; the first 200 are exactly the 200-replication study
    return _study("I", 500)


@pytest.fixture(scope="module", params=["II", "III", "V"])
def other_spec(request):
    return request.param, _study(request.param, 200)


def _by_name(rows):
    return {r.estimator: r for r in rows}


# --------------------------------------------------------------------------

def test_criterion_1_table_reproduction(spec_one, capsys):
    cfg, reps = spec_one
    m = _by_name(summarize(reps[:200], true_tate(cfg)))
    t, nv, g1, g2, ss = m[TARGET_ONLY], m[SS_NAIVE], m[GLOBAL_L1], m[GLOBAL_L2], m[SS]
    check(capsys, 1, [
        ("Target-Only |bias|", t.bias <= 0.10, f"{t.bias:.3f}<=0.10"),
        ("SS(naive) bias", 0.70 <= nv.bias <= 1.05, f"{nv.bias:.3f} in [0.70,1.05]"),
        ("GLOBAL-l1 |bias|", g1.bias <= 0.15, f"{g1.bias:.3f}<=0.15"),
        ("GLOBAL-l1 RMSE", g1.rmse <= 0.65, f"{g1.rmse:.3f}<=0.65"),
        ("GLOBAL-l2 RMSE", g2.rmse <= ss.rmse + 0.05, f"{g2.rmse:.3f}<={ss.rmse:.3f}+0.05"),
        ("Target-Only cov", t.coverage >= 93, f"{t.coverage:.1f}%>=93%"),
        ("SS(naive) cov", nv.coverage <= 50, f"{nv.coverage:.1f}%<=50%"),
    ])


def test_criterion_2_orderings(other_spec, capsys):
    spec, (cfg, reps) = other_spec
    m = _by_name(summarize(reps, true_tate(cfg)))
    g1, t, nv = m[GLOBAL_L1], m[TARGET_ONLY], m[SS_NAIVE]
    check(capsys, 2, [
        (f"spec {spec} RMSE GLOBAL-l1<Target-Only", g1.rmse < t.rmse, f"{g1.rmse:.3f}<{t.rmse:.3f}"),
        (f"spec {spec} bias SS(naive)>5xGLOBAL-l1", nv.bias > 5 * g1.bias,
         f"{nv.bias:.3f}>5x{g1.bias:.3f}"),
    ])


# --------------------------------------------------------------------------

def _small_study(r):
    rng = rng_for(MASTER_SEED, r, "small-study")
    K = int(rng.integers(2, 6))
    sites = []
    for k in range(K):
        n = int(rng.integers(60, 121))
        X = rng.normal(size=(n, 2)) + rng.uniform(-0.3, 0.3, 2) * (k > 0)
        A = rng.binomial(1, expit(X @ [0.5, -0.5])).astype(float)
        Y = X @ [0.4, 0.8] + A * (3 + X @ [0.8, 1.6]) + rng.normal(0, 2, n)
        sites.append(SiteDataset("T" if k == 0 else f"S{k}", X, A, Y))
    return sites


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_criterion_3_federated_equals_pooled(capsys):
    worst = 0.0
    for r in range(20):
        sites = _small_study(r)
        penalty = L1 if r % 2 == 0 else L2
        fed, _, _ = run_protocol(sites, penalty=penalty, n_splits=5, seed=r)
        pooled = pooled_estimate(sites, penalty=penalty, n_splits=5, seed=r)
        errs = [_rel(fed.tate[0], pooled.tate[0]), _rel(fed.tate[1], pooled.tate[1])]
        for key in ("treated", "control"):
            errs += [_rel(fed.arms[key].value, pooled.arms[key].value),
                     _rel(fed.arms[key].se, pooled.arms[key].se)]
            errs += [abs(fed.eta[key][s] - pooled.eta[key][s]) for s in pooled.eta[key]]
        assert fed.lambda_opt == pooled.lambda_opt
        worst = max(worst, max(errs))
    check(capsys, 3, [("max relative error over 20 studies", worst <= 1e-10, f"{worst:.2e}<=1e-10")])


# --------------------------------------------------------------------------

def test_criterion_4_summary_identity(capsys):
    worst = 0.0
    for r in range(20):
        sites = _small_study(100 + r)
        if len(sites) < 2:
            continue
        T, sources = sites[0], sites[1:]
        per_arm, ids, _ = study_influence(T, sources)
        psT, orT = fit_propensity(T), fit_outcomes(T)
        mom = TargetMoments(T.covariates.mean(axis=0), T.n)
        rng = rng_for(MASTER_SEED, r, "identity")
        for arm in (1, 0):
            key = ARM_KEYS[arm]
            tval, svals, tvec, svecs = per_arm[key]
            te = target_aipw(T, psT, orT, arm)
            ses = [SourceSummary.from_estimate(source_augmented(
                target_or_mean(T, orT, arm), S, solve_tilt(S.covariates, mom),
                fit_propensity(S), fit_outcomes(S), arm)) for S in sources]
            summ = build_summaries(TargetSummary.from_estimate(te), ses)
            eta = rng.dirichlet(np.ones(len(sources) + 1))[1:]
            lam = float(rng.choice(DEFAULT_LAMBDA_GRID))
            penalty = L1 if arm == 1 else L2
            deltas = svals - tval
            N = tvec.shape[0]
            kappa = 1.0 / N
            loop = 0.0
            for i in range(N):
                y = math.sqrt(kappa) * tvec[i]
                pred = 0.0
                for k in range(len(sources)):
                    pred += eta[k] * (math.sqrt(kappa) * (tvec[i] - svecs[k][i]) - deltas[k])
                loop += (y - pred) ** 2
            loop += lam * sum((e if penalty == L1 else e * e) * d * d for e, d in zip(eta, deltas))
            worst = max(worst, _rel(q_objective(summ, eta, lam, penalty), loop))
    check(capsys, 4, [("max relative error over 20 instances", worst <= 1e-12, f"{worst:.2e}<=1e-12")])


# --------------------------------------------------------------------------

def _grid_points(m, step=0.01):
    n = int(round(1 / step))
    return np.array([c for c in itertools.product(range(n + 1), repeat=m) if sum(c) <= n]) * step


def _grid_min(s, lam, penalty, pts):
    pen = pts if penalty == L1 else pts * pts
    q = (s.s_y - 2 * pts @ s.s_xy + np.einsum("ij,jk,ik->i", pts, s.s_x, pts)
         + lam * pen @ s.delta ** 2)
    return float(q.min())


def test_criterion_5_solver_optimality(capsys):
    worst_gap, n_checked = -np.inf, 0
    for K in (2, 3, 4):
        m = K - 1
        pts = _grid_points(m)
        for r in range(50):
            rng = rng_for(MASTER_SEED, r, f"qp:{K}")
            N = 80
            tif = np.zeros(N)
            tif[:30] = rng.normal(size=30) * rng.uniform(0.5, 3)
            sifs = [tif * rng.uniform(0, 1) + rng.normal(size=N) * rng.uniform(0.2, 3)
                    for _ in range(m)]
            s = build_summaries_raw(tif, sifs, rng.normal(size=m) * rng.uniform(0, 1))
            lam = float(rng.choice(DEFAULT_LAMBDA_GRID))
            penalty = L1 if r % 2 == 0 else L2
            w = solve_weights(s, lam, penalty)
            best = _grid_min(s, lam, penalty, pts)
            worst_gap = max(worst_gap, (w.objective_value - best) / abs(best))
            n_checked += 1
    closed_err, n_interior = 0.0, 0
    for r in range(50):
        rng = rng_for(MASTER_SEED, r, "closed-form")
        nT, nS = int(rng.integers(20, 200)), int(rng.integers(20, 200))
        tif = np.r_[rng.normal(size=nT) * rng.uniform(0.2, 3), np.zeros(nS)]
        sif = np.r_[np.zeros(nT), rng.normal(size=nS) * rng.uniform(0.2, 3)]
        star = np.sum(tif ** 2) / np.sum((tif - sif) ** 2)
        if 0 < star < 1:
            n_interior += 1
            w = solve_weights(build_summaries_raw(tif, [sif], [0.0]), 0.0, L1)
            closed_err = max(closed_err, abs(w.eta[1] - star))
    check(capsys, 5, [
        (f"objective - grid min over {n_checked} instances", worst_gap <= 1e-12,
         f"max rel gap {worst_gap:.2e}<=1e-12"),
        (f"two-site closed form ({n_interior} interior)", closed_err <= 1e-6, f"{closed_err:.2e}<=1e-6"),
    ])


# --------------------------------------------------------------------------

def _shrink_site(n, sid, rng):
    X = rng.normal(size=(n, 2)) + np.array([0.15, 0.10])
    A = rng.binomial(1, expit(X @ [0.5, -0.5])).astype(float)
    b10 = np.linspace(0.4, 1.2, 2) / 2
    Y = np.where(A == 1, X @ (3 * b10) + 3, X @ b10) + rng.normal(0, 3, n)
    return SiteDataset(sid, X, A, Y)


def _with_bias(reply, delta):
    """Reported source summaries shifted so the source estimate is off by delta."""
    bump = lambda arms: {k: replace(a, augmentation=a.augmentation + delta) for k, a in arms.items()}
    splits = tuple(s if s.dropped else replace(s, arms=bump(s.arms)) for s in reply.splits)
    return replace(reply, arms=bump(reply.arms), splits=splits)


def test_criterion_6_adaptive_shrinkage(capsys):
    fractions = []
    for n in (200, 800, 3200):
        hits = 0
        for r in range(100):
            rng = rng_for(MASTER_SEED, r, f"shrink:{n}")
            T, S1, S2 = (_shrink_site(n, sid, rng) for sid in ("T", "S1", "S2"))
            b, state = run_target_round(T, 10, r)
            replies = [run_source_round(S1, b), _with_bias(run_source_round(S2, b), 2.0)]
            res = aggregate(b, state, replies)
            eta = max(res.eta["treated"]["S2"], res.eta["control"]["S2"])
            hits += eta < 0.01
        fractions.append(hits / 100)
    mono = all(a <= b for a, b in zip(fractions, fractions[1:]))
    check(capsys, 6, [
        ("fraction eta<0.01 at n=200/800/3200 non-decreasing", mono,
         "/".join(f"{f:.2f}" for f in fractions)),
        ("at n=3200", fractions[-1] >= 0.95, f"{fractions[-1]:.2f}>=0.95"),
    ])


# --------------------------------------------------------------------------

def _setting_one_site(cfg, k, n, skew, rng, sid):
    """A Setting-I site of a given size; skew applies to both continuous covariates."""
    c = coefficients(cfg)
    X = _draw_covariates(cfg, k, n, np.full(2, skew), rng)
    A = rng.binomial(1, expit(X @ c["alpha1"])).astype(float)
    Xc = X - target_mean(cfg)
    Y = np.where(A == 1, Xc @ c["beta11"] + 3, Xc @ c["beta10"]) + rng.normal(0, c["noise_sd"], n)
    return SiteDataset(sid, X, A, Y)


def _source_value(T, S, arm):
    tilt = solve_tilt(S.covariates, TargetMoments(T.covariates.mean(axis=0), T.n))
    return source_augmented(target_or_mean(T, fit_outcomes(T), arm), S, tilt,
                            fit_propensity(S), fit_outcomes(S), arm).value


def _target_value(T, arm):
    return target_aipw(T, fit_propensity(T), fit_outcomes(T), arm).value


def _drop(ds, i):
    return ds.subset(np.delete(np.arange(ds.n), i))


def test_criterion_7_influence_validity(spec_one, capsys):
    cfg = DgpConfig(K=2, P=2)
    rng = rng_for(MASTER_SEED, 0, "jackknife")
    n = 200
    T = _setting_one_site(cfg, 0, n, 0.0, rng, "T")
    # the sparse design's shifted source law (skew 2 on both covariates)
    S = _setting_one_site(cfg, 1, n, 2.0, rng, "S")
    items = []
    for arm in (1, 0):
        name = ARM_KEYS[arm]
        est = target_aipw(T, fit_propensity(T), fit_outcomes(T), arm)
        loo = [n * (est.value - _target_value(_drop(T, i), arm)) for i in range(n)]
        c = np.corrcoef(loo, est.per_patient_if)[0, 1]
        items.append((f"target {name} jackknife corr", c > 0.99, f"{c:.4f}>0.99"))
        tilt = solve_tilt(S.covariates, TargetMoments(T.covariates.mean(axis=0), T.n))
        v, s = compute_source_if(T, S, tilt, fit_propensity(S), fit_outcomes(S), fit_outcomes(T), arm)
        full = _source_value(T, S, arm)
        loo_t = [n * (full - _source_value(_drop(T, i), S, arm)) for i in range(n)]
        loo_s = [n * (full - _source_value(T, _drop(S, i), arm)) for i in range(n)]
        # all 2n patients on the all-patients scale
        c = np.corrcoef(np.r_[loo_t, loo_s], np.r_[v, s])[0, 1]
        items.append((f"source {name} jackknife corr", c > 0.99, f"{c:.4f}>0.99"))

    _, reps = spec_one
    for name in (TARGET_ONLY, SS, GLOBAL_L1):
        a = np.array([r[name] for r in reps if isinstance(r.get(name), tuple)])
        ratio = float(a[:, 1].mean() / a[:, 0].std(ddof=1))
        items.append((f"{name} mean se / MC sd over {len(a)} reps", 0.7 <= ratio <= 1.3,
                      f"{ratio:.3f} in [0.7,1.3]"))
    check(capsys, 7, items)


# --------------------------------------------------------------------------

def test_criterion_8_moment_matching(capsys):
    worst_res, worst_mean, n_tilts = 0.0, 0.0, 0
    for r in range(40):
        spec = ("I", "III")[r % 2]
        density = ("sparse", "dense")[(r // 2) % 2]
        cfg = DgpConfig(K=10, P=2 if r % 4 < 2 else 10, density=density, specification=spec)
        st = generate_study(cfg, rng_for(MASTER_SEED, r, "tilt"))
        T = st.sites[0]
        mom = TargetMoments(T.covariates.mean(axis=0), T.n)
        for S in st.sites[1:]:
            try:
                fit = solve_tilt(S.covariates, mom)
            except Exception:
                continue
            if not fit.converged:
                continue
            n_tilts += 1
            w = density_ratio_weights(fit, S.covariates)
            worst_res = max(worst_res, moment_residual(fit, S.covariates, mom))
            worst_mean = max(worst_mean, float(np.max(np.abs(
                (S.covariates * w[:, None]).mean(axis=0) - mom.means))))
    check(capsys, 8, [
        (f"residual sup-norm over {n_tilts} tilts", worst_res < 1e-8, f"{worst_res:.2e}<1e-8"),
        ("weighted source means vs target", worst_mean < 1e-8, f"{worst_mean:.2e}<1e-8"),
    ])


# --------------------------------------------------------------------------

def _leaf_lengths(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _leaf_lengths(v)
    elif isinstance(obj, list) and obj and all(isinstance(v, (int, float)) for v in obj):
        yield len(obj)
    elif isinstance(obj, list):
        for v in obj:
            yield from _leaf_lengths(v)
    else:
        yield 1


def test_criterion_9_privacy_audit(capsys):
    p, K = 3, 3
    sizes, longest = {}, 0
    for n in (100, 10_000):
        rng = rng_for(MASTER_SEED, n, "privacy")
        sites = []
        for k in range(K):
            X = rng.normal(size=(n, p))
            A = rng.binomial(1, expit(X @ [0.4, -0.3, 0.2])).astype(float)
            Y = X @ [1.0, 0.5, -0.5] + 2 * A + rng.normal(size=n)
            sites.append(SiteDataset("T" if k == 0 else f"S{k}", X, A, Y))
        res, bb, rb = run_protocol(sites, n_splits=4)
        res_bytes = serialize(replace(res, audit={}))
        sizes[n] = (len(bb), tuple(len(v) for v in rb.values()), len(res_bytes))
        for raw in [bb, res_bytes, *rb.values()]:
            longest = max(longest, max(_leaf_lengths(json.loads(raw))))
    check(capsys, 9, [
        ("message sizes n=100 vs n=10000", sizes[100] == sizes[10_000],
         f"{sizes[100]} == {sizes[10_000]}"),
        ("longest numeric field", longest <= p + 1, f"{longest}<=p+1={p + 1}"),
    ])


# --------------------------------------------------------------------------

def _skew_normal_pdf(params, t):
    z = (t - params.location) / params.scale
    return 2.0 / params.scale * stats.norm.pdf(z) * stats.norm.cdf(params.skew * z)


def _ks_by_quadrature(x, params, n_grid=20001, order=30):
    x = np.sort(x)
    grid = np.linspace(x[0], x[-1], n_grid)
    F0 = integrate.quad(lambda t: _skew_normal_pdf(params, t), -np.inf, grid[0])[0]
    nodes, weights = np.polynomial.legendre.leggauss(order)
    a, b = grid[:-1, None], grid[1:, None]
    t = 0.5 * (b - a) * nodes + 0.5 * (a + b)
    F = F0 + np.r_[0.0, np.cumsum(0.5 * (b[:, 0] - a[:, 0]) * (_skew_normal_pdf(params, t) @ weights))]
    hi = np.searchsorted(x, grid, side="right") / x.size
    lo = np.searchsorted(x, grid, side="left") / x.size
    return float(max(np.abs(hi - F).max(), np.abs(lo - F).max()))


def test_criterion_10_dgp_fidelity(capsys):
    params = SkewNormalParams(0.15, 1.0, 2.0)
    ks = _ks_by_quadrature(sample_skew_normal(params, 100_000, rng_for(MASTER_SEED, 0, "ks")), params)
    g = sample_site_sizes(100_001, rng_for(MASTER_SEED, 0, "sizes"))
    check(capsys, 10, [
        ("skew-normal KS", ks < 0.01, f"{ks:.4f}<0.01"),
        ("site size mean", 195 <= g.mean() <= 205, f"{g.mean():.2f} in [195,205]"),
        ("site size SD", 45 <= g.std() <= 55, f"{g.std():.2f} in [45,55]"),
    ])
