"""Monolithic (non-federated) computation of the global estimate.

Works on all patients at once with full influence vectors.  It is the
reference the message protocol must reproduce, and it never goes through
the compressed summaries.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .domain import DatasetError, SiteDataset
from .ensemble import (L1, DEFAULT_LAMBDA_GRID, SplitArm, build_summaries_raw, combine,
                       global_tate, global_variance, make_global, select_lambda_from_splits,
                       solve_weights)
from .estimators import default_mode, source_augmented, target_aipw
from .federation import (ARM_KEYS, ARMS, DEFAULT_SPLITS, SOURCE_FAILURES, ProcessingResult,
                         SiteError, split_rows)
from .nuisance import fit_outcomes, fit_propensity
from .tilt import TargetMoments, solve_tilt


def study_influence(ds_T: SiteDataset, sources: Sequence[SiteDataset], clip=1e-3, mode=None):
    """Fit every site and return per-arm all-patient influence vectors.

    Returns (per_arm, live_ids, dropped) where per_arm[key] holds
    target value, source values, target vector, source vectors.
    """
    mode = mode or default_mode(ds_T)
    ps_T = fit_propensity(ds_T)
    or_T = fit_outcomes(ds_T)
    t_est = {ARM_KEYS[a]: target_aipw(ds_T, ps_T, or_T, a, clip, mode) for a in ARMS}
    or_mean = {ARM_KEYS[a]: float(np.mean(or_T.predict(ds_T.covariates, a))) for a in ARMS}
    moments = TargetMoments(ds_T.covariates.mean(axis=0), ds_T.n)
    live, dropped = [], []
    for ds in sorted(sources, key=lambda d: d.site_id):
        try:
            tilt = solve_tilt(ds.covariates, moments)
            ps, orf = fit_propensity(ds), fit_outcomes(ds)
            ests = {ARM_KEYS[a]: source_augmented(or_mean[ARM_KEYS[a]], ds, tilt, ps, orf, a, clip, mode)
                    for a in ARMS}
        except SOURCE_FAILURES as exc:
            dropped.append((ds.site_id, str(exc)))
            continue
        live.append((ds, ests))
    N = ds_T.n + sum(ds.n for ds, _ in live)
    offsets = np.cumsum([ds_T.n] + [ds.n for ds, _ in live])
    per_arm = {}
    for key, te in t_est.items():
        tvec = np.zeros(N)
        tvec[:ds_T.n] = N / ds_T.n * te.per_patient_if
        svecs = []
        for k, (ds, ests) in enumerate(live):
            e = ests[key]
            v = np.zeros(N)
            v[:ds_T.n] = N / ds_T.n * e.target_part(te)
            v[offsets[k]:offsets[k + 1]] = N / ds.n * e.per_patient_if
            svecs.append(v)
        per_arm[key] = (te.value, np.array([ests[key].value for _, ests in live]), tvec, svecs)
    return per_arm, [ds.site_id for ds, _ in live], dropped


def pooled_estimate(datasets: Sequence[SiteDataset], target_id: str | None = None,
                    lambda_grid=DEFAULT_LAMBDA_GRID, penalty: str = L1,
                    n_splits: int = DEFAULT_SPLITS, seed: int = 0, clip: float = 1e-3,
                    mode: str | None = None, scale: str = "mse") -> ProcessingResult:
    datasets = list(datasets)
    tid = target_id if target_id is not None else datasets[0].site_id
    targets = [d for d in datasets if d.site_id == tid]
    if len(targets) != 1:
        raise DatasetError(f"target site {tid!r} not found")
    ds_T = targets[0]
    sources = [d for d in datasets if d.site_id != tid]
    per_arm, live_ids, dropped = study_influence(ds_T, sources, clip, mode)

    split_sets = []
    for j in range(n_splits):
        rows = split_rows(ds_T, seed, j, ds_T.p + 2)
        if rows is None:
            raise SiteError(f"target site {tid}: no admissible split")
        tr_T, va_T = ds_T.subset(rows[0]), ds_T.subset(rows[1])
        halves = []
        for ds in sources:
            if ds.site_id not in live_ids:
                continue
            r = split_rows(ds, seed, j, ds.p + 2)
            if r is not None:
                halves.append(ds.subset(r[0]))
        tr_arm, ids, _ = study_influence(tr_T, halves, clip, mode)
        if not ids:
            continue
        ps_v, or_v = fit_propensity(va_T), fit_outcomes(va_T)
        arms = []
        for a in ARMS:
            key = ARM_KEYS[a]
            tval, svals, tvec, svecs = tr_arm[key]
            summ = build_summaries_raw(tvec, svecs, svals - tval, scale=scale)
            val = target_aipw(va_T, ps_v, or_v, a, clip, mode or default_mode(ds_T)).value
            arms.append(SplitArm(summ, tval, svals, val))
        split_sets.append(arms)
    lam = select_lambda_from_splits(split_sets, lambda_grid, penalty) if live_ids else float(min(lambda_grid))

    ests, etas = {}, {}
    for a in ARMS:
        key = ARM_KEYS[a]
        tval, svals, tvec, svecs = per_arm[key]
        summ = build_summaries_raw(tvec, svecs, svals - tval, scale=scale)
        w = solve_weights(summ, lam, penalty)
        value = combine(tval, svals, w)
        se, _ = global_variance(w, tvec, svecs, value)
        ests[key] = make_global(a, value, se, w)
        etas[key] = dict(zip([tid] + live_ids, map(float, w.eta)))
        for sid, _ in dropped:
            etas[key][sid] = 0.0
    t = global_tate(ests["treated"], ests["control"])
    return ProcessingResult(ests, t, etas, lam, penalty, dropped, {}, [tid] + live_ids)
