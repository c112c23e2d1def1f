"""Run the full battery of numerical certificates on one problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import learners as L
from .errors import CertificateError
from .harness import ExperimentConfig, Problem, build_problem
from .mdp import fit_kappa_bar, mixing_distances, sample_chain
from .oracle import (
    bias_certificate,
    descent_certificate,
    sample_ball,
    zeta_bound,
    zeta_series,
)


@dataclass(frozen=True)
class CertificateResult:
    name: str
    passed: bool
    detail: str


def _ada_hyperparams(config: ExperimentConfig, problem: Problem) -> L.Hyperparams:
    for spec in config.algorithms:
        if spec.name == "adatd0":
            radius = problem.default_radius(0.0) if spec.radius is None else spec.radius
            return L.Hyperparams(eta=spec.eta, delta=spec.delta, beta=spec.beta, radius=radius)
    return L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, radius=problem.default_radius(0.0))


def run_certificates(
    config: ExperimentConfig,
    n_trials: int = 1000,
    max_delay: int = 20,
    n_steps: int = 1000,
    seed: int = 0,
) -> list[CertificateResult]:
    problem = build_problem(config.problem, config.base_dir)
    mdp, features = problem.mdp, problem.features
    diag = problem.diagnostics
    pi = diag.pi
    results: list[CertificateResult] = []

    def attempt(name, fn):
        try:
            passed, detail = fn()
        except CertificateError as exc:
            passed, detail = False, str(exc)
        results.append(CertificateResult(name, passed, detail))

    lams = sorted({0.0} | {spec.lam for spec in config.algorithms})
    for lam in lams:
        fp = problem.fixed_point(lam)
        attempt(f"fixed_point[lam={lam:g}]", lambda fp=fp: (fp.residual <= 1e-9, f"residual {fp.residual:.2e}"))

    for lam in lams:
        def descent(lam=lam):
            rep = descent_certificate(mdp, features, pi, lam, n_trials, seed=seed)
            return True, f"min ratio {rep.min_ratio:.6g} >= {rep.required:.6g}"
        attempt(f"descent[lam={lam:g}]", descent)

    hp = _ada_hyperparams(config, problem)

    def bias():
        horizon = max(diag.horizon, max_delay)
        kappa_bar = fit_kappa_bar(mdp, pi, diag.rho, horizon)
        dist = mixing_distances(mdp, pi, horizon)[1:]
        rng = np.random.default_rng(seed)
        thetas = sample_ball(rng, features.d, hp.radius, 5)
        worst = -np.inf
        for theta in thetas:
            for K0 in range(1, max_delay + 1):
                rep = bias_certificate(mdp, features, pi, theta, K0, kappa_bar, diag.rho, hp.radius)
                worst = max(worst, rep.max_bias - rep.bound)
        ok = bool(np.all(dist <= kappa_bar * diag.rho ** np.arange(1, horizon + 1) + 1e-13))
        return ok, f"kappa_bar {kappa_bar:.4g}, worst bias minus bound {worst:.3g} over K0=1..{max_delay}"
    attempt("delayed_bias", bias)

    traj = sample_chain(mdp, 0, n_steps, seed)
    transitions = list(traj)
    trace = L.run_learner(L.ada_td0_step, hp, features, transitions, mdp.discount)
    G = 2 * hp.radius + mdp.reward_bound

    def log_sum():
        lhs, rhs = L.log_sum_check([float(s.g @ s.g) for s in trace[1:]], hp.delta, G)
        return lhs <= rhs + 1e-9, f"{lhs:.6g} <= {rhs:.6g}"
    attempt("log_sum", log_sum)

    def ema():
        rep = L.ema_reformulation_check(trace, hp, features, transitions, mdp.discount)
        return rep.passed, f"max deviation {rep.max_deviation:.2e}"
    attempt("ema_identity", ema)

    def bounded():
        rep = L.boundedness_check(trace, problem.fixed_point(0.0).theta_star, hp.radius, mdp.reward_bound)
        return rep.passed, f"||theta-theta*|| {rep.max_dist:.4g} <= {2 * rep.R:.4g}, ||g|| {rep.max_g:.4g}, ||m|| {rep.max_m:.4g} <= G {rep.G:.4g}"
    attempt("trajectory_bounds", bounded)

    def reduction():
        hp_lam = L.Hyperparams(eta=hp.eta, delta=hp.delta, beta=hp.beta, lam=0.0, radius=hp.radius)
        other = L.run_learner(L.ada_td_lambda_step, hp_lam, features, transitions, mdp.discount)
        gap = max(float(np.max(np.abs(a.theta - b.theta))) for a, b in zip(trace, other))
        return gap <= 1e-14, f"max gap {gap:.2e}"
    attempt("lambda0_reduction", reduction)

    for lam in lams:
        gl = mdp.discount * lam
        def zeta(gl=gl):
            s, b = zeta_series(gl, diag.rho), zeta_bound(gl, diag.rho)
            return s <= b + 1e-9, f"{s:.6g} <= {b:.6g}"
        attempt(f"zeta_sum[lam={lam:g}]", zeta)
    return results


def format_table(results: list[CertificateResult]) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}" for r in results)
