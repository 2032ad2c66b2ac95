"""One-round protocol between the target, the source sites and a processing site.

Flow: the target broadcasts covariate means and a few per-arm scalars (for
the full data and for each half/half tuning split); each source answers once
with model coefficients and per-arm influence summaries; the processing
site, which holds the target's retained state, assembles everything.

Wire format: one JSON object per line, keys sorted, every number written at
fixed width (17 significant digits, padded exponent, leading space for
non-negative values) so message size never depends on the data values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import DatasetError, SiteDataset, TreatmentArm, derive_seed, SeedSpec, validate_dataset
from .ensemble import (L1, DEFAULT_LAMBDA_GRID, GlobalEstimate, SourceSummary, SplitArm,
                       TargetSummary, WeightSolution, build_summaries, combine, combined_if_sumsq,
                       global_tate, make_global, select_lambda_from_splits, solve_weights)
from .estimators import (EstimationError, default_mode, source_augmented, target_aipw)
from .nuisance import FitError, fit_outcomes, fit_propensity
from .tilt import TargetMoments, TiltError, solve_tilt

PROTOCOL_VERSION = "fedtate/1"
ARMS = (TreatmentArm.TREATED, TreatmentArm.CONTROL)
ARM_KEYS = {TreatmentArm.TREATED: "treated", TreatmentArm.CONTROL: "control"}
DEFAULT_SPLITS = 10
MAX_REDRAWS = 20


class ProtocolError(RuntimeError):
    """Malformed or incompatible message."""

    def __init__(self, message, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class SiteError(RuntimeError):
    """A site could not take part; carries the site id."""


# --------------------------------------------------------------------------
# messages
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitBroadcast:
    covariate_means: np.ndarray
    n_target: int
    target_or_mean: dict


@dataclass(frozen=True, eq=False)
class TargetBroadcast:
    covariate_means: np.ndarray
    n_target: int
    target_or_mean: dict          # arm key -> float
    target_mu_hat: dict           # arm key -> float
    if_mode: str = "general"
    clip: float = 1e-3
    split_seed: int = 0
    splits: tuple = ()
    protocol_version: str = PROTOCOL_VERSION


@dataclass(frozen=True, eq=False)
class ArmSummary:
    augmentation: float
    if_sum: float
    if_sumsq: float
    tilt_gradient: np.ndarray


@dataclass(frozen=True, eq=False)
class SplitReply:
    n_k: Optional[int] = None
    arms: Optional[dict] = None   # arm key -> ArmSummary
    dropped: Optional[str] = None


@dataclass(frozen=True, eq=False)
class SourceReply:
    site_id: str
    gamma: Optional[np.ndarray] = None
    ps_coefficients: Optional[np.ndarray] = None
    or_coefficients: Optional[dict] = None
    arms: Optional[dict] = None
    n_k: Optional[int] = None
    splits: Optional[tuple] = None
    dropped: Optional[str] = None
    protocol_version: str = PROTOCOL_VERSION


@dataclass(frozen=True, eq=False)
class ProcessingResult:
    arms: dict                    # arm key -> GlobalEstimate
    tate: tuple                   # (value, se, (lo, hi))
    eta: dict                     # arm key -> {site_id: weight}
    lambda_opt: float
    penalty: str
    dropped_sites: list
    audit: dict = field(default_factory=dict)
    site_order: list = field(default_factory=list)   # order of eta entries, target first
    protocol_version: str = PROTOCOL_VERSION


@dataclass
class TargetState:
    """What the target keeps locally (and hands to the processing site)."""
    site_id: str
    summaries: dict               # arm key -> TargetSummary
    split_summaries: list         # per split: arm key -> TargetSummary | None
    validation: list              # per split: arm key -> float


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

def split_rows(ds: SiteDataset, seed: int, split_index: int, min_arm: int):
    """Random half/half split of a site; redrawn until each half has both arms.

    Returns (train_rows, validation_rows) or None if no admissible split was
    found within the redraw budget.
    """
    n = ds.n
    for attempt in range(MAX_REDRAWS + 1):
        label = f"split:{ds.site_id}:{attempt}"
        rng = np.random.default_rng(derive_seed(SeedSpec(seed, split_index, label)))
        perm = rng.permutation(n)
        tr, va = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
        ok = True
        for rows in (tr, va):
            a = ds.treatment[rows]
            if (a == 1).sum() < min_arm or (a == 0).sum() < min_arm:
                ok = False
                break
        if ok:
            return tr, va
    return None


# --------------------------------------------------------------------------
# target round
# --------------------------------------------------------------------------

def _target_fit(ds: SiteDataset, clip, mode):
    ps = fit_propensity(ds)
    orf = fit_outcomes(ds)
    ests = {ARM_KEYS[a]: target_aipw(ds, ps, orf, a, clip, mode) for a in ARMS}
    or_means = {ARM_KEYS[a]: float(np.mean(orf.predict(ds.covariates, a))) for a in ARMS}
    return ests, or_means


def run_target_round(ds_T: SiteDataset, n_splits: int = DEFAULT_SPLITS, split_seed: int = 0,
                     clip: float = 1e-3, mode: str | None = None):
    """Fit the target's models and produce (broadcast, retained state)."""
    problems = validate_dataset(ds_T)
    if problems:
        raise DatasetError(f"target site {ds_T.site_id}: " + "; ".join(problems))
    mode = mode or default_mode(ds_T)
    try:
        ests, or_means = _target_fit(ds_T, clip, mode)
    except (FitError, EstimationError, np.linalg.LinAlgError) as exc:
        raise SiteError(f"target site {ds_T.site_id}: {exc}") from exc
    splits, split_summ, validation = [], [], []
    for j in range(n_splits):
        rows = split_rows(ds_T, split_seed, j, ds_T.p + 2)
        if rows is None:
            raise SiteError(f"target site {ds_T.site_id}: no admissible split after {MAX_REDRAWS} redraws")
        tr, va = rows
        try:
            tr_ests, tr_or = _target_fit(ds_T.subset(tr), clip, mode)
            va_ests, _ = _target_fit(ds_T.subset(va), clip, mode)
        except (FitError, EstimationError, np.linalg.LinAlgError) as exc:
            raise SiteError(f"target site {ds_T.site_id}, split {j}: {exc}") from exc
        splits.append(SplitBroadcast(ds_T.covariates[tr].mean(axis=0), len(tr), tr_or))
        split_summ.append({k: TargetSummary.from_estimate(e) for k, e in tr_ests.items()})
        validation.append({k: e.value for k, e in va_ests.items()})
    b = TargetBroadcast(ds_T.covariates.mean(axis=0), ds_T.n, or_means,
                        {k: e.value for k, e in ests.items()}, mode, clip, split_seed, tuple(splits))
    state = TargetState(ds_T.site_id, {k: TargetSummary.from_estimate(e) for k, e in ests.items()},
                        split_summ, validation)
    return b, state


# --------------------------------------------------------------------------
# source round
# --------------------------------------------------------------------------

def _source_fit(ds, means, n_target, or_means, clip, mode):
    tilt = solve_tilt(ds.covariates, TargetMoments(means, n_target))
    ps = fit_propensity(ds)
    orf = fit_outcomes(ds)
    arms = {}
    for a in ARMS:
        key = ARM_KEYS[a]
        est = source_augmented(or_means[key], ds, tilt, ps, orf, a, clip, mode)
        s = est.per_patient_if
        arms[key] = ArmSummary(est.augmentation, float(s.sum()), float(s @ s),
                               np.asarray(est.tilt_gradient, dtype=float))
    return tilt, ps, orf, arms


SOURCE_FAILURES = (TiltError, FitError, EstimationError, np.linalg.LinAlgError)


def run_source_round(ds_k: SiteDataset, b: TargetBroadcast) -> SourceReply:
    """Everything a source sends, computed from its own data and the broadcast."""
    check_version(b.protocol_version)
    for a in ARMS:
        if ds_k.n and not np.any(ds_k.treatment == int(a)):
            return SourceReply(ds_k.site_id, dropped=f"no arm-{ARM_KEYS[a]} patients")
    problems = validate_dataset(ds_k)
    if problems:
        return SourceReply(ds_k.site_id, dropped="; ".join(problems))
    if ds_k.p != len(b.covariate_means):
        return SourceReply(ds_k.site_id, dropped=f"covariate count {ds_k.p} != {len(b.covariate_means)}")
    try:
        tilt, ps, orf, arms = _source_fit(ds_k, b.covariate_means, b.n_target, b.target_or_mean,
                                          b.clip, b.if_mode)
    except SOURCE_FAILURES as exc:
        return SourceReply(ds_k.site_id, dropped=str(exc))
    splits = []
    for j, sb in enumerate(b.splits):
        rows = split_rows(ds_k, b.split_seed, j, ds_k.p + 2)
        if rows is None:
            splits.append(SplitReply(dropped="no admissible split"))
            continue
        sub = ds_k.subset(rows[0])
        try:
            _, _, _, sarms = _source_fit(sub, sb.covariate_means, sb.n_target, sb.target_or_mean,
                                         b.clip, b.if_mode)
        except SOURCE_FAILURES as exc:
            splits.append(SplitReply(dropped=str(exc)))
            continue
        splits.append(SplitReply(sub.n, sarms))
    return SourceReply(ds_k.site_id, tilt.gamma, ps.coefficients,
                       {ARM_KEYS[a]: orf.for_arm(a).coefficients for a in ARMS},
                       arms, ds_k.n, tuple(splits))


# --------------------------------------------------------------------------
# processing site
# --------------------------------------------------------------------------

def _source_summary(n, arm_summary: ArmSummary, or_mean) -> SourceSummary:
    return SourceSummary(n, float(or_mean + arm_summary.augmentation), arm_summary.if_sum,
                         arm_summary.if_sumsq, arm_summary.tilt_gradient)


def aggregate(b: TargetBroadcast, target_state: TargetState, replies: Sequence[SourceReply],
              lambda_grid=DEFAULT_LAMBDA_GRID, penalty: str = L1, scale: str = "mse",
              audit: dict | None = None) -> ProcessingResult:
    """Global estimate from the broadcast, the target's state and one reply per source."""
    check_version(b.protocol_version)
    replies = sorted(replies, key=lambda r: r.site_id)
    for r in replies:
        check_version(r.protocol_version)
    live = [r for r in replies if r.dropped is None]
    dropped = [(r.site_id, r.dropped) for r in replies if r.dropped is not None]

    # lambda by sample splitting: one lambda per penalty shared by both arms
    split_sets = []
    for j in range(len(b.splits)):
        arms = []
        for a in ARMS:
            key = ARM_KEYS[a]
            tsum = target_state.split_summaries[j][key]
            srcs = []
            for r in live:
                sr = r.splits[j]
                if sr.dropped is None:
                    srcs.append(_source_summary(sr.n_k, sr.arms[key], b.splits[j].target_or_mean[key]))
            if not srcs:
                continue
            summ = build_summaries(tsum, srcs, scale)
            arms.append(SplitArm(summ, tsum.value, np.array([s.value for s in srcs]),
                                 target_state.validation[j][key]))
        if arms:
            split_sets.append(arms)
    lam = select_lambda_from_splits(split_sets, lambda_grid, penalty) if live else float(min(lambda_grid))

    ests, etas = {}, {}
    for a in ARMS:
        key = ARM_KEYS[a]
        tsum = target_state.summaries[key]
        srcs = [_source_summary(r.n_k, r.arms[key], b.target_or_mean[key]) for r in live]
        summ = build_summaries(tsum, srcs, scale)
        w = solve_weights(summ, lam, penalty)
        value = combine(tsum.value, [s.value for s in srcs], w)
        N = summ.n_total
        se = float(np.sqrt(combined_if_sumsq(w.eta, tsum, srcs)) / N)
        ests[key] = make_global(a, value, se, w)
        etas[key] = dict(zip([target_state.site_id] + [r.site_id for r in live], map(float, w.eta)))
        for sid, _ in dropped:
            etas[key][sid] = 0.0
    t = global_tate(ests["treated"], ests["control"])
    order = [target_state.site_id] + [r.site_id for r in live]
    return ProcessingResult(ests, t, etas, lam, penalty, dropped, dict(audit or {}), order)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _num(x: float) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise ProtocolError("non-finite number cannot be serialized")
    if x == 0.0:
        x = 0.0  # drop the sign of -0.0
    mant, exp = f"{x:.16e}".split("e")
    e = int(exp)
    s = f"{mant}e{'-' if e < 0 else '+'}{abs(e):03d}"
    return s if s.startswith("-") else " " + s


def _int(n: int) -> str:
    return f"{int(n):20d}"


def _encode(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return _int(v)
    if isinstance(v, (float, np.floating)):
        return _num(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=True)
    if isinstance(v, np.ndarray):
        return _encode([float(z) for z in v.ravel()])
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_encode(z) for z in v) + "]"
    if isinstance(v, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _encode(v[k]) for k in sorted(v)) + "}"
    raise ProtocolError(f"cannot serialize {type(v).__name__}")


def _arm_summary_obj(s: ArmSummary):
    return {"augmentation": float(s.augmentation), "if_sum": float(s.if_sum),
            "if_sumsq": float(s.if_sumsq), "tilt_gradient": s.tilt_gradient}


def _to_obj(msg) -> dict:
    if isinstance(msg, TargetBroadcast):
        return {"type": "broadcast", "protocol_version": msg.protocol_version,
                "covariate_means": msg.covariate_means, "n_target": msg.n_target,
                "target_or_mean": {k: float(v) for k, v in msg.target_or_mean.items()},
                "target_mu_hat": {k: float(v) for k, v in msg.target_mu_hat.items()},
                "if_mode": msg.if_mode, "clip": float(msg.clip), "split_seed": int(msg.split_seed),
                "splits": [{"covariate_means": s.covariate_means, "n_target": s.n_target,
                            "target_or_mean": {k: float(v) for k, v in s.target_or_mean.items()}}
                           for s in msg.splits]}
    if isinstance(msg, SourceReply):
        o = {"type": "reply", "protocol_version": msg.protocol_version, "site_id": msg.site_id}
        if msg.dropped is not None:
            o["dropped"] = msg.dropped
            return o
        o.update({"gamma": msg.gamma, "ps_coefficients": msg.ps_coefficients,
                  "or_coefficients": dict(msg.or_coefficients), "n_k": msg.n_k,
                  "arms": {k: _arm_summary_obj(s) for k, s in msg.arms.items()},
                  "splits": [({"dropped": s.dropped} if s.dropped is not None else
                              {"n_k": s.n_k, "arms": {k: _arm_summary_obj(a) for k, a in s.arms.items()}})
                             for s in msg.splits]})
        return o
    if isinstance(msg, ProcessingResult):
        return {"type": "result", "protocol_version": msg.protocol_version,
                "arms": {k: {"value": g.value, "se": g.se, "ci95": list(g.ci95),
                             "lambda": g.weights.lam, "objective": g.weights.objective_value}
                         for k, g in msg.arms.items()},
                "tate": {"value": msg.tate[0], "se": msg.tate[1], "ci95": list(msg.tate[2])},
                "eta": msg.eta, "lambda_opt": msg.lambda_opt, "penalty": msg.penalty,
                "dropped_sites": [{"site_id": s, "reason": r} for s, r in msg.dropped_sites],
                "audit": {k: int(v) for k, v in msg.audit.items()},
                "site_order": list(msg.site_order)}
    raise ProtocolError(f"unknown message type {type(msg).__name__}")


def serialize(msg) -> bytes:
    return (_encode(_to_obj(msg)) + "\n").encode("ascii")


def check_version(v):
    if v != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {v!r}")


def _arr(v):
    return np.array(v, dtype=float)


def _arm_summary(o):
    return ArmSummary(float(o["augmentation"]), float(o["if_sum"]), float(o["if_sumsq"]),
                      _arr(o["tilt_gradient"]))


def _from_obj(o):
    kind = o.get("type")
    check_version(o.get("protocol_version"))
    if kind == "broadcast":
        splits = tuple(SplitBroadcast(_arr(s["covariate_means"]), int(s["n_target"]),
                                      {k: float(v) for k, v in s["target_or_mean"].items()})
                       for s in o["splits"])
        return TargetBroadcast(_arr(o["covariate_means"]), int(o["n_target"]),
                               {k: float(v) for k, v in o["target_or_mean"].items()},
                               {k: float(v) for k, v in o["target_mu_hat"].items()},
                               o["if_mode"], float(o["clip"]), int(o["split_seed"]), splits)
    if kind == "reply":
        if "dropped" in o:
            return SourceReply(o["site_id"], dropped=o["dropped"])
        splits = tuple(SplitReply(dropped=s["dropped"]) if "dropped" in s else
                       SplitReply(int(s["n_k"]), {k: _arm_summary(a) for k, a in s["arms"].items()})
                       for s in o["splits"])
        return SourceReply(o["site_id"], _arr(o["gamma"]), _arr(o["ps_coefficients"]),
                           {k: _arr(v) for k, v in o["or_coefficients"].items()},
                           {k: _arm_summary(a) for k, a in o["arms"].items()}, int(o["n_k"]), splits)
    if kind == "result":
        arms = {}
        for k, g in o["arms"].items():
            w = WeightSolution(np.array([o["eta"][k][s] for s in o["site_order"]]), float(g["lambda"]),
                               float(g["objective"]), o["penalty"])
            arms[k] = GlobalEstimate(TreatmentArm.TREATED if k == "treated" else TreatmentArm.CONTROL,
                                     float(g["value"]), float(g["se"]), tuple(g["ci95"]), w)
        t = o["tate"]
        return ProcessingResult(arms, (float(t["value"]), float(t["se"]), tuple(t["ci95"])),
                                {k: {s: float(x) for s, x in v.items()} for k, v in o["eta"].items()},
                                float(o["lambda_opt"]), o["penalty"],
                                [(d["site_id"], d["reason"]) for d in o["dropped_sites"]],
                                {k: int(v) for k, v in o["audit"].items()}, list(o["site_order"]))
    raise ProtocolError(f"unknown message type {kind!r}")


def deserialize(data: bytes | str):
    text = data.decode("ascii") if isinstance(data, (bytes, bytearray)) else data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed message: {exc.msg}", exc.pos) from None
    if not isinstance(obj, dict):
        raise ProtocolError("message must be a JSON object", 0)
    try:
        return _from_obj(obj)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ProtocolError):
            raise
        raise ProtocolError(f"malformed {obj.get('type', 'message')}: {exc!r}") from None


# --------------------------------------------------------------------------
# convenience driver
# --------------------------------------------------------------------------

def run_protocol(datasets: Sequence[SiteDataset], target_id: str | None = None,
                 lambda_grid=DEFAULT_LAMBDA_GRID, penalty: str = L1, n_splits: int = DEFAULT_SPLITS,
                 seed: int = 0, clip: float = 1e-3, mode: str | None = None, scale: str = "mse",
                 wire: bool = True):
    """Run every role in-process; messages go through the wire format when ``wire``.

    Returns (result, broadcast_bytes, {site_id: reply_bytes}).
    """
    datasets = list(datasets)
    tid = target_id if target_id is not None else datasets[0].site_id
    targets = [d for d in datasets if d.site_id == tid]
    if len(targets) != 1:
        raise DatasetError(f"target site {tid!r} not found")
    ds_T = targets[0]
    b, state = run_target_round(ds_T, n_splits, seed, clip, mode)
    b_bytes = serialize(b)
    b_recv = deserialize(b_bytes) if wire else b
    replies, reply_bytes = [], {}
    for d in datasets:
        if d.site_id == tid:
            continue
        r = run_source_round(d, b_recv)
        rb = serialize(r)
        reply_bytes[d.site_id] = rb
        replies.append(deserialize(rb) if wire else r)
    audit = {"broadcast": len(b_bytes)}
    audit.update({f"reply_{k}": len(v) for k, v in reply_bytes.items()})
    res = aggregate(b_recv, state, replies, lambda_grid, penalty, scale, audit)
    return res, b_bytes, reply_bytes
