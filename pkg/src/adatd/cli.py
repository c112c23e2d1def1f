"""Command-line entry point.

Usage::

    adatd run CONFIG [--out DIR] [--threads N]
    adatd sweep CONFIG [--out DIR] [--threads N]
    adatd oracle MDP [--lambda X] [--eta E --delta D --beta B --radius R --K K]
    adatd validate MDP [--eps E ...] [--horizon T]
    adatd certify CONFIG

Errors are reported on stderr as a single ``error: <kind>: <message>`` line.
Exit status is 0 on success, 1 on a failed certificate and 2 on usage or
input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import AdaTdError, CertificateError, ConfigError
from .harness import (
    default_threads,
    emit_csv,
    expand_sweep,
    load_config,
    parse_config,
    run_experiment,
)
from .mdp import diagnose, load_mdp, mixing_time, tabular_features
from .oracle import TheoryInputs, fixed_point_td_lambda, radius_lower_bound

DEFAULT_EPS = (1e-1, 1e-2, 1e-3, 1e-6)


def _fail(kind: str, message: str, status: int) -> int:
    print(f"error: {kind}: {message}", file=sys.stderr)
    return status


def _load_problem(path):
    try:
        mdp, features = load_mdp(path)
    except FileNotFoundError:
        raise ConfigError(f"MDP file not found: {path}")
    except (json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"invalid MDP document {path}: {exc}")
    return mdp, features if features is not None else tabular_features(mdp.n_states)


def cmd_run(args) -> int:
    config = load_config(args.config)
    result = run_experiment(config, threads=args.threads)
    out = Path(args.out)
    emit_csv(result.series, out)
    flagged = {k: [c.k for c in v] for k, v in result.violations.items() if v}
    if flagged:
        print(f"warning: bound overlay violated at {flagged}", file=sys.stderr)
    print(json.dumps({"out": str(out), "series": len(result.series), "overlay_violations": flagged}))
    return 0


def cmd_sweep(args) -> int:
    path = Path(args.config)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    parse_config(doc, base_dir=str(path.parent), allow_lists=True)
    out = Path(args.out)
    cells = expand_sweep(doc)
    for name, cell in cells:
        config = parse_config(cell, base_dir=str(path.parent))
        result = run_experiment(config, threads=args.threads)
        emit_csv(result.series, out / name)
    print(json.dumps({"out": str(out), "cells": [n for n, _ in cells]}))
    return 0


def cmd_oracle(args) -> int:
    mdp, features = _load_problem(args.mdp)
    diag = diagnose(mdp, features)
    fp = fixed_point_td_lambda(mdp, features, diag.pi, args.lam)
    radius = args.radius
    if radius is None:
        radius = radius_lower_bound(mdp.reward_bound, diag.omega, mdp.discount, args.lam)
    inputs = TheoryInputs(
        lam=args.lam, B=mdp.reward_bound, R=radius, gamma=mdp.discount, beta=args.beta,
        eta=args.eta, delta=args.delta, omega=diag.omega, kappa_bar=diag.kappa_bar, rho=diag.rho,
    )
    consts = inputs.at(args.K)
    doc = fp.to_dict(consts)
    doc["constants"].update(
        rho=diag.rho, kappa_bar=diag.kappa_bar, bound=consts.rhs(),
        radius_lower_bound=radius_lower_bound(mdp.reward_bound, diag.omega, mdp.discount, args.lam),
    )
    print(json.dumps(doc, indent=1))
    return 0


def cmd_validate(args) -> int:
    mdp, features = _load_problem(args.mdp)
    diag = diagnose(mdp, features, horizon=args.horizon)
    eps = args.eps or list(DEFAULT_EPS)
    report = {
        "n_states": mdp.n_states,
        "discount": mdp.discount,
        "reward_bound": mdp.reward_bound,
        "pi": diag.pi.tolist(),
        "rho": diag.rho,
        "kappa_bar": diag.kappa_bar,
        "fit_horizon": diag.horizon,
        "omega": diag.omega,
        "mixing_time": [{"eps": e, "tau": mixing_time(diag.kappa_bar, diag.rho, e)} for e in eps],
        "pi_residual": float(np.max(np.abs(diag.pi @ mdp.transition - diag.pi))),
    }
    print(json.dumps(report, indent=1))
    return 0


def cmd_certify(args) -> int:
    from .certify import format_table, run_certificates

    config = load_config(args.config)
    results = run_certificates(config, n_trials=args.trials)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adatd", description="Adaptive TD policy-evaluation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("run", cmd_run, "run an experiment"), ("sweep", cmd_sweep, "run a hyperparameter grid")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--out", default="out")
        p.add_argument("--threads", type=int, default=default_threads())
        p.set_defaults(func=fn)

    p = sub.add_parser("oracle", help="print the fixed point and theory constants")
    p.add_argument("mdp")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--K", type=int, default=10_000)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("validate", help="assumption and mixing diagnostics")
    p.add_argument("mdp")
    p.add_argument("--eps", type=float, action="append")
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("certify", help="run all numerical certificates")
    p.add_argument("config")
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CertificateError as exc:
        return _fail("certificate", str(exc).splitlines()[0], 1)
    except (ConfigError, FileNotFoundError) as exc:
        return _fail("config", str(exc).splitlines()[0], 2)
    except (AdaTdError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc).splitlines()[0], 2)
    except OSError as exc:
        return _fail("io", str(exc).splitlines()[0], 2)


if __name__ == "__main__":
    sys.exit(main())
