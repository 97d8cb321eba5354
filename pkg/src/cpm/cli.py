"""Command-line harness.

Usage::

    cpm simulate --config cfg.json --out runs/a
    cpm run      --config cfg.json --out runs/a
    cpm tune     --config cfg.json --out runs/a
    cpm curves   --out runs/a
    cpm table    ssm_k2 --out runs/a [--config overrides.json]

Every command takes ``--seed`` (overrides the config), ``--jobs`` (worker
bound; never changes results) and ``--out``. Set ``CPM_LOG=INFO`` (or DEBUG)
for progress messages. Every CSV starts with a ``# config_hash=...`` line.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .diagnostics import clt_moment_checks, loglik_error_samples, summarize, write_report
from .errors import CPMError, ConfigError
from .experiments import (TABLE_PRESETS, TableRow, central_estimate, make_model, make_proposal,
                          scaling_table, simulate_data)
from .models import GaussianREModel, HestonEulerModel, read_observations, write_observations
from .samplers import (KernelConfig, NDJSONSink, build_target, init_state, make_kernel,
                       run_chain)
from .auxvars import stream
from .theory import curve
from .tuning import (ScalingPlan, calibrate_psi, fit_ct_curve, measure_ct, write_tuning_report,
                     default_step_cov)

log = logging.getLogger("cpm")

_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_nonneg = {"type": "integer", "minimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "required": ["type"],
            "properties": {"type": {"enum": ["gaussian_re", "lgssm", "heston"]}},
        },
        "T": _posint,
        "seed": _nonneg,
        "data": {"type": "string"},
        "n_iters": _posint,
        "burn_in": _nonneg,
        "plan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"alpha": _pos, "beta": _pos, "psi": _pos, "N": _posint,
                           "rho": {"type": "number", "minimum": -1, "maximum": 1}},
        },
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"proposal": {"enum": ["rw", "ar"]}, "scale": _pos,
                           "ar_coef": {"type": "number", "exclusiveMinimum": -1,
                                       "exclusiveMaximum": 1}},
        },
        "kappa_samples": _nonneg,
        "sigma_samples": _nonneg,
        "subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "tune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"beta_grid": {"type": "array", "items": _pos, "minItems": 3},
                           "pilot_N": _posint, "target_kappa": _pos, "n_iters": _posint,
                           "kappa_samples": _nonneg, "psi0": _pos},
        },
        "table": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"T_grid": {"type": "array", "items": _posint, "minItems": 1},
                           "kappa_iters": {"type": "integer", "minimum": 2},
                           "sigma_iters": {"type": "integer", "minimum": 2},
                           "chain_iters": _nonneg,
                           "N_override": {"type": "object",
                                          "additionalProperties": _posint}},
        },
    },
}

_validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)


def validate_config(cfg):
    """Raise :class:`ConfigError` with the dotted field path of the first violation."""
    errors = sorted(_validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, ".".join(str(p) for p in e.absolute_path))
    return cfg


def load_config(path, seed=None):
    cfg = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    if seed is not None:
        cfg["seed"] = seed
    return validate_config(cfg)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _default_iters(model):
    return 100_000 if isinstance(model, GaussianREModel) else 20_000


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _write_csv(path, header, rows, chash):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={chash}\r\n")
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _model_and_data(cfg):
    if "model" not in cfg:
        raise ConfigError("'model' is a required property")
    try:
        model = make_model(cfg["model"])
    except TypeError as exc:
        raise ConfigError(f"invalid model parameters: {exc}", "model") from exc
    seed = cfg.get("seed", 0)
    if "data" in cfg:
        y = read_observations(cfg["data"])
    else:
        if "T" not in cfg:
            raise ConfigError("'T' is required when no data file is given")
        y = simulate_data(model, cfg["T"], seed)
    return model, y


def _plan(cfg, T, theta_hat):
    p = cfg.get("plan", {})
    return ScalingPlan(T, p.get("alpha", 0.5), p.get("beta", 1.0), p.get("psi", 1.0), theta_hat,
                       n_fixed=p.get("N"))


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out, jobs=1):
    model, y = _model_and_data(cfg)
    path = out / "data.csv"
    write_observations(path, y, f"config_hash={config_hash(cfg)}")
    return path


def cmd_run(cfg, out, jobs=1):
    model, y = _model_and_data(cfg)
    seed = cfg.get("seed", 0)
    chash = config_hash(cfg)
    theta_hat, post_cov = central_estimate(model, y, seed)
    plan = _plan(cfg, len(y), theta_hat)
    rho = cfg.get("plan", {}).get("rho", plan.rho)
    kern = cfg.get("kernel", {})
    proposal = make_proposal(kern.get("proposal", "rw"), theta_hat, post_cov,
                             kern.get("scale", 1.0), kern.get("ar_coef", 0.9))
    n_iters = cfg.get("n_iters", _default_iters(model))
    burn_in = cfg.get("burn_in", n_iters // 10)
    target = build_target(model, y, plan.N, theta_hat, seed=seed)
    config = KernelConfig(proposal, rho, n_iters, burn_in)
    state = init_state(target, theta_hat, stream(seed, 2))
    sink = NDJSONSink(out / "trace.ndjson")
    try:
        trace = run_chain(state, make_kernel(target, config), n_iters, [sink], seed=seed)
    finally:
        sink.close()
    tr = trace.after(burn_in)
    rows = [("N", plan.N, math.nan, ""), ("rho", rho, math.nan, "")]
    summ = summarize(tr)
    rows += summ.rows()[:-2]
    for j in range(tr.theta.shape[1]):
        col = tr.theta[:, j]
        f = summ.if_estimate[j]
        se = float(col.std() * math.sqrt(f / len(col))) if math.isfinite(f) else math.nan
        rows += [(f"mean_theta{j}", float(col.mean()), se, ""),
                 (f"sd_theta{j}", float(col.std()), math.nan, "")]
    if isinstance(model, HestonEulerModel):
        phi = np.exp(-np.exp(tr.theta[:, 1]))
        rows.append(("mean_phi", float(phi.mean()), math.nan, ""))
    ks = cfg.get("kappa_samples", 0)
    if ks:
        es = loglik_error_samples(target, theta_hat, rho, ks, seed=seed, chain_id=1,
                                  require_exact=False)
        rows.append(("kappa_sq", es.kappa_sq, math.nan, ""))
        for c in clt_moment_checks(R=es.R):
            rows.append((c.stat, c.value, c.stderr, "FAIL" if c.flag else "ok"))
    ss = cfg.get("sigma_samples", 0)
    if ss and not isinstance(model, HestonEulerModel):
        esm = loglik_error_samples(target, theta_hat, rho, ss, mode="proposal_m", seed=seed,
                                   chain_id=2)
        rows.append(("sigma_sq", esm.sigma_sq, math.nan, ""))
        for c in clt_moment_checks(Z=esm.Z):
            rows.append((c.stat, c.value, c.stderr, "FAIL" if c.flag else "ok"))
    write_report(out / "summary.csv", rows, f"config_hash={chash}")
    return out / "summary.csv"


def cmd_tune(cfg, out, jobs=1):
    model, y = _model_and_data(cfg)
    seed = cfg.get("seed", 0)
    frac = cfg.get("subset_fraction", 0.25)
    ys = y[: max(2, int(math.ceil(frac * len(y))))]
    T = len(ys)
    tc = cfg.get("tune", {})
    theta_hat, post_cov = central_estimate(model, ys, seed)
    p = cfg.get("plan", {})
    alpha = p.get("alpha", 0.5)
    pilot = ScalingPlan(T, alpha, 1.0, tc.get("psi0", p.get("psi", 1.0)), theta_hat,
                        n_fixed=tc.get("pilot_N", 20))
    psi = calibrate_psi(model, ys, pilot, tc.get("target_kappa", 1.4),
                        n_samples=tc.get("kappa_samples", 20000), seed=seed)
    log.info("calibrated psi=%.5g", psi)
    grid = tc.get("beta_grid", [0.1, 0.2, 0.3, 0.5, 0.8])
    n_iters = tc.get("n_iters", 20000)
    step = default_step_cov(post_cov)
    meas = [measure_ct(model, ys, ScalingPlan(T, alpha, b, psi, theta_hat), step, n_iters,
                       seed=seed, chain_id=100 + 2 * i, kappa_samples=min(2000, n_iters))
            for i, b in enumerate(grid)]
    fit = fit_ct_curve([m.beta for m in meas], [m.CT for m in meas])
    path = out / "tuning_report.csv"
    write_tuning_report(path, meas, fit, f"config_hash={config_hash(cfg)} psi_hat={psi!r}")
    return path


def cmd_curves(cfg, out, kmin=0.2, kmax=4.0, step=0.01, jobs=1):
    n = int(round((kmax - kmin) / step)) + 1
    kappas = [round(kmin + i * step, 10) for i in range(n)]
    rows = [(p.kappa, p.rho_u, p.rif_if1, p.rif_inf, p.arct_if1, p.arct_inf) for p in curve(kappas)]
    path = out / "curves.csv"
    chash = config_hash(dict(cfg, curves=[kmin, kmax, step]))
    _write_csv(path, ["kappa", "rho_u", "rif_if1", "rif_inf", "arct_if1", "arct_inf"], rows, chash)
    return path


def cmd_table(cfg, out, table_id, jobs=1):
    if table_id not in TABLE_PRESETS:
        raise ConfigError(f"unknown table {table_id!r}", "table")
    preset = dict(TABLE_PRESETS[table_id])
    model = make_model(cfg.get("model", preset["model"]))
    p = cfg.get("plan", {})
    tc = cfg.get("table", {})
    rows = scaling_table(model, tc.get("T_grid", preset["T_grid"]), p.get("alpha", preset["alpha"]),
                         p.get("beta", preset["beta"]), p.get("psi", preset["psi"]),
                         seed=cfg.get("seed", 0), kappa_iters=tc.get("kappa_iters", 1000),
                         sigma_iters=tc.get("sigma_iters", 1000),
                         chain_iters=tc.get("chain_iters", 0),
                         n_override=tc.get("N_override", preset.get("N")), jobs=jobs)
    path = out / f"table_{table_id}.csv"
    _write_csv(path, list(TableRow.FIELDS), [r.as_list() for r in rows],
               config_hash(dict(cfg, table_id=table_id)))
    return path


# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="cpm", description="Correlated pseudo-marginal MCMC harness")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON experiment config")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    common.add_argument("--out", type=str, default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate observations to data.csv")
    sub.add_parser("run", parents=[common], help="run a chain; writes trace.ndjson and summary.csv")
    sub.add_parser("tune", parents=[common], help="calibrate psi and fit CT(beta)")
    c = sub.add_parser("curves", parents=[common], help="acceptance / RIF / ARCT curves")
    c.add_argument("--kappa-min", type=float, default=0.2)
    c.add_argument("--kappa-max", type=float, default=4.0)
    c.add_argument("--kappa-step", type=float, default=0.01)
    t = sub.add_parser("table", parents=[common], help="scaling tables")
    t.add_argument("table_id", choices=sorted(TABLE_PRESETS))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("CPM_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1", "jobs")
        cfg = load_config(args.config, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "curves":
            path = cmd_curves(cfg, out, args.kappa_min, args.kappa_max, args.kappa_step)
        elif args.command == "table":
            path = cmd_table(cfg, out, args.table_id, args.jobs)
        else:
            path = {"simulate": cmd_simulate, "run": cmd_run, "tune": cmd_tune}[args.command](
                cfg, out, args.jobs)
    except CPMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
