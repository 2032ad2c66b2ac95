"""Command-line front end: ``fedtate simulate | estimate | report``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .domain import DatasetError, OutcomeKind, load_sites_csv
from .ensemble import L1, L2, DEFAULT_LAMBDA_GRID
from .federation import (DEFAULT_SPLITS, ProtocolError, SiteError, aggregate, run_source_round,
                         run_target_round, serialize)
from .simulation import ESTIMATORS, SPECS, DgpConfig, run_study, true_tate

EXIT_OK, EXIT_INVALID, EXIT_PROTOCOL = 0, 2, 3
METRIC_FIELDS = ["estimator", "bias", "rmse", "coverage", "ci_length", "n_fail"]


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# flat key=value configuration
# --------------------------------------------------------------------------

def _grid(text: str):
    try:
        vals = [float(v) for v in str(text).replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"lambda_grid: not a comma-separated list of numbers: {text!r}") from None
    if not vals or any(v < 0 or not np.isfinite(v) for v in vals):
        raise ConfigError("lambda_grid: values must be finite and non-negative")
    return vals


def _positive_int(name):
    def conv(v):
        try:
            i = int(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected an integer, got {v!r}") from None
        if i < 1:
            raise ConfigError(f"{name}: must be at least 1, got {i}")
        return i
    return conv


def _nonneg_int(name):
    def conv(v):
        try:
            i = int(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected an integer, got {v!r}") from None
        if i < 0:
            raise ConfigError(f"{name}: must be non-negative")
        return i
    return conv


def _choice(name, options):
    def conv(v):
        if v not in options:
            raise ConfigError(f"{name}: must be one of {', '.join(options)}; got {v!r}")
        return v
    return conv


SIM_KEYS = {
    "spec": (_choice("spec", SPECS), "I"),
    "density": (_choice("density", ("dense", "sparse")), "sparse"),
    "K": (_positive_int("K"), 10),
    "P": (_positive_int("P"), 2),
    "reps": (_positive_int("reps"), 200),
    "seed": (_nonneg_int("seed"), 0),
    "workers": (_positive_int("workers"), 1),
    "lambda_grid": (_grid, list(DEFAULT_LAMBDA_GRID)),
    "splits": (_positive_int("splits"), DEFAULT_SPLITS),
    "scale": (_choice("scale", ("mse", "sum")), "mse"),
}


def read_config_file(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SIM_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = (value, f"{path}:{lineno}")
    return out


def resolve_config(args) -> dict:
    """defaults < FEDTATE_SEED (seed only) < config file < command-line flags."""
    cfg = {k: d for k, (_, d) in SIM_KEYS.items()}
    raw: dict = {}
    env_seed = os.environ.get("FEDTATE_SEED")
    if env_seed not in (None, ""):
        raw["seed"] = (env_seed, "FEDTATE_SEED")
    if args.config:
        raw.update(read_config_file(args.config))
    flag_map = {"spec": args.spec, "density": args.density, "K": args.K, "P": args.P,
                "reps": args.reps, "seed": args.seed, "workers": args.workers,
                "lambda_grid": args.lambda_grid, "splits": args.splits, "scale": args.scale}
    for k, v in flag_map.items():
        if v is not None:
            raw[k] = (v, f"--{k.replace('_', '-')}")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set: expected key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in SIM_KEYS:
            raise ConfigError(f"--set: unknown key {k!r}")
        raw[k] = (v, "--set")
    for k, (v, where) in raw.items():
        try:
            cfg[k] = SIM_KEYS[k][0](v)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if cfg["K"] < 2:
        raise ConfigError("K: must be at least 2")
    if cfg["P"] < 2:
        raise ConfigError("P: must be at least 2")
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for k in SIM_KEYS:
        v = cfg[k]
        if k == "lambda_grid":
            v = ",".join(repr(float(x)) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dgp = DgpConfig(K=cfg["K"], P=cfg["P"], density=cfg["density"], specification=cfg["spec"])
    rows, reps = run_study(dgp, cfg["reps"], ESTIMATORS, cfg["lambda_grid"], cfg["seed"],
                           cfg["workers"], cfg["splits"], cfg["scale"], return_replications=True)
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.estimator, _fmt(r.bias), _fmt(r.rmse), _fmt(r.coverage),
                        _fmt(r.ci_length), r.n_fail])
    with (out / "replications.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replication", "estimator", "estimate", "se", "ci_lo", "ci_hi", "error"])
        for i, rep in enumerate(reps):
            for name in ESTIMATORS:
                v = rep.get(name)
                if isinstance(v, tuple):
                    w.writerow([i, name] + [_fmt(x) for x in v] + [""])
                else:
                    w.writerow([i, name, "", "", "", "", str(v)])
    truth = true_tate(dgp)
    manifest = {
        "config": {k: cfg[k] for k in SIM_KEYS},
        "truth": truth,
        "seed": cfg["seed"],
        "version": __version__,
        "git_describe": _git_describe(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'metrics.csv'}, {out / 'replications.csv'}, {out / 'manifest.json'}")
    return EXIT_OK


def _summary_text(res) -> str:
    v, se, (lo, hi) = res.tate
    lines = [
        f"target effect estimate: {v:.6f}",
        f"standard error:         {se:.6f}",
        f"95% interval:           [{lo:.6f}, {hi:.6f}]",
        f"penalty: {res.penalty}   lambda: {res.lambda_opt:g}",
        "",
        "site weights (eta):",
        f"  {'site':<16s} {'treated':>10s} {'control':>10s}",
    ]
    for sid in res.site_order + [s for s, _ in res.dropped_sites]:
        lines.append(f"  {sid:<16s} {res.eta['treated'][sid]:10.6f} {res.eta['control'][sid]:10.6f}")
    for arm in ("treated", "control"):
        lines.append(f"  sum ({arm}): {sum(res.eta[arm].values()):.6f}")
    lines.append("")
    if res.dropped_sites:
        lines.append("dropped sites:")
        lines += [f"  {s}: {r}" for s, r in res.dropped_sites]
    else:
        lines.append("dropped sites: none")
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    try:
        datasets = load_sites_csv(args.data, OutcomeKind(args.outcome_kind))
    except OSError as exc:
        raise ConfigError(f"{args.data}: {exc.strerror}") from None
    ids = [d.site_id for d in datasets]
    if args.target not in ids:
        raise ConfigError(f"target site {args.target!r} not in data (sites: {', '.join(ids)})")
    grid = _grid(args.lambda_grid) if args.lambda_grid else list(DEFAULT_LAMBDA_GRID)
    seed = args.seed if args.seed is not None else int(os.environ.get("FEDTATE_SEED") or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds_T = datasets[ids.index(args.target)]
    b, state = run_target_round(ds_T, args.splits, seed)
    b_bytes = serialize(b)
    (out / "broadcast.ndjson").write_bytes(b_bytes)
    replies, audit = [], {"broadcast": len(b_bytes)}
    for d in datasets:
        if d.site_id == args.target:
            continue
        r = run_source_round(d, b)
        rb = serialize(r)
        (out / f"reply_{d.site_id}.ndjson").write_bytes(rb)
        audit[f"reply_{d.site_id}"] = len(rb)
        replies.append(r)
    res = aggregate(b, state, replies, grid, args.penalty, audit=audit)
    (out / "result.ndjson").write_bytes(serialize(res))
    text = _summary_text(res)
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _read_metrics(path: Path):
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if not rows:
        raise ConfigError(f"{path}: no metric rows")
    if list(rows[0].keys()) != METRIC_FIELDS:
        raise ConfigError(f"{path}: header must be {','.join(METRIC_FIELDS)}")
    meta = {"spec": "", "density": "", "K": "", "P": ""}
    man = path.parent / "manifest.json"
    if man.exists():
        try:
            c = json.loads(man.read_text()).get("config", {})
            meta = {k: str(c.get(k, "")) for k in meta}
        except json.JSONDecodeError:
            raise ConfigError(f"{man}: malformed manifest") from None
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            vals = {k: float(r[k]) for k in METRIC_FIELDS[1:5]}
            n_fail = int(r["n_fail"])
        except (TypeError, ValueError):
            raise ConfigError(f"{path}:{i}: non-numeric metric") from None
        out.append({**meta, "estimator": r["estimator"], **vals, "n_fail": n_fail,
                    "source": str(path)})
    return out


def _estimator_rank(name):
    return ESTIMATORS.index(name) if name in ESTIMATORS else len(ESTIMATORS)


def _spec_rank(s):
    return SPECS.index(s) if s in SPECS else len(SPECS)


def _k_rank(k):
    try:
        return int(k)
    except ValueError:
        return -1


def render_report(rows) -> str:
    rows = sorted(rows, key=lambda r: (_spec_rank(r["spec"]), _k_rank(r["K"]),
                                       _estimator_rank(r["estimator"]), r["estimator"]))
    head = "| spec | density | K | P | estimator | bias | rmse | coverage | ci_length | n_fail |"
    lines = [head, "|" + "---|" * 10]
    for r in rows:
        lines.append(f"| {r['spec']} | {r['density']} | {r['K']} | {r['P']} | {r['estimator']} | "
                     f"{r['bias']:.4f} | {r['rmse']:.4f} | {r['coverage']:.4f} | "
                     f"{r['ci_length']:.4f} | {r['n_fail']} |")
    lines.append("")
    lines.append("Coverage is of the fixed population effect of each design.")
    return "\n".join(lines) + "\n", rows


def cmd_report(args) -> int:
    rows = []
    for p in args.metrics:
        rows += _read_metrics(Path(p))
    text, rows = render_report(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text)
    with (out / "report_long.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spec", "density", "K", "P", "estimator", "metric", "value"])
        for r in rows:
            for m in ("bias", "rmse", "coverage", "ci_length"):
                w.writerow([r["spec"], r["density"], r["K"], r["P"], r["estimator"], m,
                            f"{r[m]:.4f}"])
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedtate", description=__doc__)
    ap.add_argument("--version", action="version", version=f"fedtate {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--config", help="flat key=value configuration file")
    sim.add_argument("--spec", help="model specification I..V")
    sim.add_argument("--density", help="dense or sparse covariate design")
    sim.add_argument("--K", help="number of sites, target included")
    sim.add_argument("--P", help="number of covariates")
    sim.add_argument("--reps", help="number of replications")
    sim.add_argument("--seed", help="master seed (falls back to FEDTATE_SEED)")
    sim.add_argument("--workers", help="worker processes")
    sim.add_argument("--lambda-grid", dest="lambda_grid", help="comma-separated penalty grid")
    sim.add_argument("--splits", help="half/half splits for lambda selection")
    sim.add_argument("--scale", help="objective scaling: mse or sum")
    sim.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    sim.add_argument("--print-config", action="store_true", help="print effective config and exit")
    sim.add_argument("--out", default="out", help="output directory")
    sim.set_defaults(func=cmd_simulate)

    est = sub.add_parser("estimate", help="run the one-round protocol on a CSV of sites")
    est.add_argument("data", help="CSV with header site_id,a,y,x1,...,xp")
    est.add_argument("--target", required=True, help="site_id of the target site")
    est.add_argument("--outcome-kind", dest="outcome_kind", default="continuous",
                     choices=["continuous", "binary"])
    est.add_argument("--penalty", default=L1, choices=[L1, L2])
    est.add_argument("--lambda-grid", dest="lambda_grid")
    est.add_argument("--splits", type=int, default=DEFAULT_SPLITS)
    est.add_argument("--seed", type=int)
    est.add_argument("--out", default="out")
    est.set_defaults(func=cmd_estimate)

    rep = sub.add_parser("report", help="merge metrics.csv files into a markdown table")
    rep.add_argument("metrics", nargs="+")
    rep.add_argument("--out", default="report")
    rep.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"fedtate: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"fedtate: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ProtocolError, SiteError) as exc:
        print(f"fedtate: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
