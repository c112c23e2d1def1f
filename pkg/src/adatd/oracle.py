"""Exact, sampling-free quantities for linear TD policy evaluation.

Everything here is computed from the model ``(P, R, gamma, Phi, pi)``:
Bellman operators, limiting update directions, projected fixed points for
TD(0) and TD(lambda), theory constants of the finite-time bounds, and
numerical certificates for the inequalities those bounds rest on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import AssumptionError, CertificateError, ConditioningError, NumericError
from .mdp import FeatureMap, Mdp, expected_reward, feature_gram_omega

MAX_CONDITION = 1e12
SERIES_TAIL = 1e-14
# longest series used for residuals; closer to lam = 1 the closed form is used
MAX_SERIES_TERMS = 100_000


# --------------------------------------------------------------------------
# Bellman operators
# --------------------------------------------------------------------------


def bellman_apply(mdp: Mdp, V: np.ndarray) -> np.ndarray:
    """``(T V)(s) = Rbar(s) + gamma * sum_s' P(s'|s) V(s')``."""
    return expected_reward(mdp) + mdp.discount * (mdp.transition @ np.asarray(V, dtype=float))


def true_value_function(mdp: Mdp) -> np.ndarray:
    """Solve the Bellman equation ``V = Rbar + gamma P V``."""
    n = mdp.n_states
    try:
        return np.linalg.solve(np.eye(n) - mdp.discount * mdp.transition, expected_reward(mdp))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Bellman system is singular: {exc}") from exc


def series_length(lam: float, tail: float = SERIES_TAIL) -> int:
    """Smallest ``m`` with ``lam**m <= tail``."""
    if lam <= 0.0:
        return 1
    m = max(1, math.ceil(math.log(tail) / math.log(lam)))
    while lam**m > tail:
        m += 1
    return m


def lambda_bellman_apply(mdp: Mdp, V: np.ndarray, lam: float, m_max: int | None = None) -> np.ndarray:
    """lambda-averaged Bellman operator, evaluated as its truncated series.

    ``(1 - lam) sum_{m<=m_max} lam^m (sum_{t<=m} gamma^t P^t Rbar + gamma^(m+1) P^(m+1) V)``
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"series form needs lam in [0, 1), got {lam}")
    V = np.asarray(V, dtype=float)
    if lam == 0.0:
        return bellman_apply(mdp, V)
    if m_max is None:
        m_max = series_length(lam)
    P, gamma = mdp.transition, mdp.discount
    reward_term = expected_reward(mdp)          # gamma^t P^t Rbar
    partial = reward_term.copy()                # sum_{t<=m} gamma^t P^t Rbar
    boot = gamma * (P @ V)                      # gamma^(m+1) P^(m+1) V
    total = partial + boot
    weight = 1.0
    for _ in range(m_max):
        weight *= lam
        reward_term = gamma * (P @ reward_term)
        partial = partial + reward_term
        boot = gamma * (P @ boot)
        total = total + weight * (partial + boot)
    return (1.0 - lam) * total


def lambda_bellman_closed_form(mdp: Mdp, V: np.ndarray, lam: float) -> np.ndarray:
    """``V + (I - lam gamma P)^{-1} (T V - V)``; agrees with the series for lam < 1.

    At ``lam = 1`` this returns the true value function for every ``V``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    V = np.asarray(V, dtype=float)
    n = mdp.n_states
    M = np.eye(n) - lam * mdp.discount * mdp.transition
    return V + np.linalg.solve(M, bellman_apply(mdp, V) - V)


# --------------------------------------------------------------------------
# limiting directions and fixed points
# --------------------------------------------------------------------------


def limiting_direction(mdp: Mdp, features: FeatureMap, pi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``g(theta) = Phi^T Diag(pi) (T Phi theta - Phi theta)``."""
    phi = features.phi
    V = phi @ np.asarray(theta, dtype=float)
    return phi.T @ (pi * (bellman_apply(mdp, V) - V))


def lambda_limiting_direction(
    mdp: Mdp, features: FeatureMap, pi: np.ndarray, theta: np.ndarray, lam: float, series: bool = False
) -> np.ndarray:
    """``g^lam(theta) = Phi^T Diag(pi) (T^lam Phi theta - Phi theta)``.

    ``series=True`` evaluates the operator by its truncated series instead of
    the closed form (only for ``lam < 1``).
    """
    phi = features.phi
    V = phi @ np.asarray(theta, dtype=float)
    TV = lambda_bellman_apply(mdp, V, lam) if series else lambda_bellman_closed_form(mdp, V, lam)
    return phi.T @ (pi * (TV - V))


def td_linear_system(mdp: Mdp, features: FeatureMap, pi: np.ndarray, lam: float = 0.0):
    """``(A, b)`` with ``g^lam(theta) = b - A theta``."""
    phi = features.phi
    n = mdp.n_states
    D_phi = pi[:, None] * phi
    gamma, P = mdp.discount, mdp.transition
    M = np.eye(n) - lam * gamma * P
    rbar = expected_reward(mdp)
    if lam == 0.0:
        A = D_phi.T @ (phi - gamma * (P @ phi))
        b = D_phi.T @ rbar
    else:
        A = D_phi.T @ (phi - gamma * (1.0 - lam) * np.linalg.solve(M, P @ phi))
        b = D_phi.T @ np.linalg.solve(M, rbar)
    return A, b


@dataclass(frozen=True, eq=False)
class FixedPoint:
    theta_star: np.ndarray
    lam: float
    residual: float
    value_vector: np.ndarray
    condition: float

    def to_dict(self, constants: "TheoryConstants | None" = None) -> dict:
        return {
            "theta_star": self.theta_star.tolist(),
            "lambda": self.lam,
            "residual": self.residual,
            "condition": self.condition,
            "constants": constants.to_dict() if constants is not None else {},
        }

    def to_json(self, constants: "TheoryConstants | None" = None) -> str:
        return json.dumps(self.to_dict(constants), indent=1)


def _solve_checked(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise ConditioningError(f"fixed-point system condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}")
    return np.linalg.solve(A, b), cond


def _require_full_support(pi: np.ndarray) -> None:
    if np.any(pi <= 0):
        raise AssumptionError("stationary distribution must have full support")


def fixed_point_td0(mdp: Mdp, features: FeatureMap, pi: np.ndarray) -> FixedPoint:
    """Solution of the projected Bellman equation for TD(0)."""
    _require_full_support(pi)
    A, b = td_linear_system(mdp, features, pi, 0.0)
    theta, cond = _solve_checked(A, b)
    residual = float(np.linalg.norm(limiting_direction(mdp, features, pi, theta)))
    return FixedPoint(theta, 0.0, residual, features.phi @ theta, cond)


def pi_projection(features: FeatureMap, pi: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Coefficients of the ``pi``-weighted least-squares projection of ``V`` onto span(Phi)."""
    phi = features.phi
    D_phi = pi[:, None] * phi
    return np.linalg.solve(phi.T @ D_phi, D_phi.T @ V)


def fixed_point_td_lambda(mdp: Mdp, features: FeatureMap, pi: np.ndarray, lam: float) -> FixedPoint:
    """Zero of ``g^lam``.

    For ``lam < 1`` the residual is measured with the truncated series
    operator (the closed form once the series would exceed
    ``MAX_SERIES_TERMS`` terms); at ``lam = 1`` the fixed point is the ``pi``-norm projection of
    the true value function.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    _require_full_support(pi)
    if lam == 0.0:
        return fixed_point_td0(mdp, features, pi)
    phi = features.phi
    if lam == 1.0:
        V_mu = true_value_function(mdp)
        A = phi.T @ (pi[:, None] * phi)
        theta, cond = _solve_checked(A, phi.T @ (pi * V_mu))
        residual = float(np.linalg.norm(phi.T @ (pi * (V_mu - phi @ theta))))
    else:
        A, b = td_linear_system(mdp, features, pi, lam)
        theta, cond = _solve_checked(A, b)
        series = series_length(lam) <= MAX_SERIES_TERMS
        residual = float(np.linalg.norm(lambda_limiting_direction(mdp, features, pi, theta, lam, series=series)))
    return FixedPoint(theta, float(lam), residual, phi @ theta, cond)


def pi_norm(V: np.ndarray, pi: np.ndarray) -> float:
    return float(np.sqrt(np.sum(pi * np.asarray(V) ** 2)))


def contraction_modulus(gamma: float, lam: float) -> float:
    """``alpha = gamma (1 - lam) / (1 - gamma lam)``."""
    return gamma * (1.0 - lam) / (1.0 - gamma * lam)


def approximation_gap(mdp: Mdp, features: FeatureMap, pi: np.ndarray, lam: float) -> tuple[float, float]:
    """``(||Phi theta*_lam - V_mu||_pi, bound)`` where the bound is
    ``||Proj V_mu - V_mu||_pi / sqrt(1 - alpha^2)``."""
    V_mu = true_value_function(mdp)
    fp = fixed_point_td_lambda(mdp, features, pi, lam)
    lhs = pi_norm(fp.value_vector - V_mu, pi)
    proj = features.phi @ pi_projection(features, pi, V_mu)
    alpha = contraction_modulus(mdp.discount, lam)
    rhs = pi_norm(proj - V_mu, pi) / math.sqrt(1.0 - alpha**2)
    return lhs, rhs


# --------------------------------------------------------------------------
# certificates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DescentReport:
    lam: float
    n_trials: int
    min_ratio: float
    required: float
    worst_slack: float


def sample_ball(rng: np.random.Generator, d: int, radius: float, n: int) -> np.ndarray:
    """``n`` points uniformly distributed in the radius-``radius`` ball of R^d."""
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * (radius * rng.random((n, 1)) ** (1.0 / d))


def descent_certificate(
    mdp: Mdp,
    features: FeatureMap,
    pi: np.ndarray,
    lam: float,
    n_trials: int,
    seed=None,
    radius: float | None = None,
    slack: float = 1e-9,
) -> DescentReport:
    """Check ``<theta* - theta, g^lam(theta)> >= (1 - alpha) omega ||theta* - theta||^2``.

    Trial points are drawn uniformly from the ball of the given radius
    (default ``2 ||theta*|| + 1``).

    Raises
    ------
    CertificateError
        On a violation beyond ``slack``; ``witness`` is the offending theta.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    fp = fixed_point_td_lambda(mdp, features, pi, lam)
    omega = feature_gram_omega(mdp, features, pi)
    alpha = contraction_modulus(mdp.discount, lam)
    required = (1.0 - alpha) * omega
    if radius is None:
        radius = 2.0 * float(np.linalg.norm(fp.theta_star)) + 1.0
    rng = np.random.default_rng(seed)
    thetas = sample_ball(rng, features.d, radius, n_trials)
    min_ratio = math.inf
    worst_slack = math.inf
    for theta in thetas:
        gap = fp.theta_star - theta
        g = lambda_limiting_direction(mdp, features, pi, theta, lam)
        lhs = float(gap @ g)
        sq = float(gap @ gap)
        margin = lhs - required * sq
        worst_slack = min(worst_slack, margin)
        if sq > 0:
            min_ratio = min(min_ratio, lhs / sq)
        if margin < -slack:
            raise CertificateError(
                f"descent inequality violated at lam={lam}: margin {margin:.3e}", witness=theta
            )
    return DescentReport(float(lam), n_trials, min_ratio, required, worst_slack)


@dataclass(frozen=True)
class BiasReport:
    K0: int
    bias: np.ndarray          # per start state
    bound: float        # kappa_bar (B + R gamma + R) rho^K0
    inflated_bound: float        # |S| times the bound
    holds: bool
    holds_inflated: bool

    @property
    def max_bias(self) -> float:
        return float(np.max(self.bias))


def delayed_semi_gradient_mean(mdp: Mdp, features: FeatureMap, theta: np.ndarray, start_law: np.ndarray) -> np.ndarray:
    """``E[d_k phi(s_k)]`` when ``s_k`` has law ``start_law`` and ``s_{k+1} ~ P(.|s_k)``,
    summed explicitly over every pair ``(s, s')``."""
    phi = features.phi
    V = phi @ theta
    gamma = mdp.discount
    # xi[s, s'] = R(s, s') + gamma V(s') - V(s)
    xi = mdp.reward + gamma * V[None, :] - V[:, None]
    weights = start_law[:, None] * mdp.transition
    return np.einsum("ij,ij,ik->k", weights, xi, phi)


def bias_certificate(
    mdp: Mdp,
    features: FeatureMap,
    pi: np.ndarray,
    theta: np.ndarray,
    K0: int,
    kappa_bar: float,
    rho: float,
    radius: float,
    slack: float = 1e-12,
) -> BiasReport:
    """Exact bias of the semi-gradient ``K0`` steps after each start state.

    The bias ``||E[gbar(theta; s_K0, s_K0+1) | s_0] - g(theta)||`` is compared
    with ``kappa rho^K0`` where ``kappa = kappa_bar (B + R gamma + R)``, and
    also with the ``|S|``-inflated constant.

    Raises
    ------
    CertificateError
        If the bias exceeds ``kappa rho^K0`` (plus ``slack``). A too-short
        fitting window for ``kappa_bar`` is the usual cause.
    """
    if K0 < 1:
        raise ValueError("K0 must be >= 1")
    theta = np.asarray(theta, dtype=float)
    if np.linalg.norm(theta) > radius * (1 + 1e-12):
        raise ValueError("theta lies outside the projection ball")
    g = limiting_direction(mdp, features, pi, theta)
    PK = np.linalg.matrix_power(mdp.transition, K0)
    bias = np.array(
        [np.linalg.norm(delayed_semi_gradient_mean(mdp, features, theta, PK[s]) - g) for s in range(mdp.n_states)]
    )
    B, gamma = mdp.reward_bound, mdp.discount
    tight = kappa_bar * (B + radius * gamma + radius) * rho**K0
    inflated = mdp.n_states * tight
    worst = float(np.max(bias))
    report = BiasReport(K0, bias, tight, inflated, worst <= tight + slack, worst <= inflated + slack)
    if not report.holds:
        raise CertificateError(
            f"delayed bias {worst:.3e} exceeds kappa rho^K0 = {tight:.3e} at K0={K0}; "
            "refit kappa_bar over a longer horizon",
            witness=theta,
        )
    return report


# --------------------------------------------------------------------------
# theory constants
# --------------------------------------------------------------------------


def zeta_series(gamma_lam: float, rho: float, tol: float = 1e-18, max_terms: int = 1_000_000) -> float:
    """Directly summed ``sum_k zeta_k`` with ``zeta_k = sum_{t=1}^k (gamma lam)^(k-t) rho^t``.

    Uses the convention ``0^0 = 0``, so the sum vanishes when ``gamma lam = 0``.
    """
    if gamma_lam == 0.0 or rho == 0.0:
        return 0.0
    total = 0.0
    zeta = 0.0
    rho_k = 1.0
    for _ in range(max_terms):
        rho_k *= rho
        zeta = gamma_lam * zeta + rho_k
        total += zeta
        if zeta <= tol * total:
            return total
    raise NumericError("zeta series did not converge")


def zeta_bound(gamma_lam: float, rho: float) -> float:
    m = max(gamma_lam, rho)
    return m / (1.0 - m) ** 2


def burn_in_length(K: int, rho: float) -> int:
    """``K0 = ceil(ln K / ln(1/rho))``; 1 for a chain that mixes in one step."""
    if rho == 0.0:
        return 1
    return max(1, math.ceil(math.log(K) / math.log(1.0 / rho)))


@dataclass(frozen=True)
class TheoryConstants:
    B: float
    R: float
    G: float
    kappa: float
    omega: float
    alpha: float
    C1: float
    C2: float
    C1_lam: float
    C2_lam: float
    zeta_sum: float
    K: int
    K0: int
    lam: float
    gamma: float
    delta: float

    def log_factor(self) -> float:
        return math.log((self.delta + self.K * self.G**2) / self.delta)

    def td0_rhs(self) -> float:
        return (self.C1 * self.log_factor() + self.C2) / math.sqrt(self.K)

    def td_lambda_rhs(self) -> float:
        return (self.C1_lam * self.log_factor() + self.C2_lam) / math.sqrt(self.K)

    def rhs(self) -> float:
        """Bound on ``min_{k<=K} E||theta* - theta^k||^2`` for the configured lam."""
        return self.td0_rhs() if self.lam == 0.0 else self.td_lambda_rhs()

    def to_dict(self) -> dict:
        return {k: float(v) if isinstance(v, float) else v for k, v in asdict(self).items()}


def bound_constants(
    lam: float,
    B: float,
    R: float,
    gamma: float,
    beta: float,
    eta: float,
    delta: float,
    omega: float,
    kappa_bar: float,
    rho: float,
    K: int,
) -> TheoryConstants:
    """Evaluate the constants of the AdaTD(0) and AdaTD(lam) finite-time bounds at horizon ``K``.

    ``R`` plays the role of the projection radius of whichever algorithm is
    being bounded and ``G = 2R + B``.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if not (eta > 0 and delta > 0 and 0 <= beta < 1 and omega > 0 and 0 < gamma < 1):
        raise ValueError("invalid hyperparameters for the theory constants")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    G = 2.0 * R + B
    kappa = kappa_bar * (B + R * gamma + R)
    alpha = contraction_modulus(gamma, lam)
    mix = 0.0 if rho == 0.0 else (math.log(K) / math.log(1.0 / rho)) ** 2
    sd = math.sqrt(delta)
    one_g = 1.0 - gamma

    C1 = (
        16.0 * mix * G / (sd * one_g**2 * omega**2)
        + 2.0 * eta * beta * G / ((1.0 - beta) * one_g * omega)
        + eta * G / (one_g * omega)
        + 4.0 * R * G**2 / (one_g * omega * delta)
    )
    C2 = (
        4.0 * R**2 * G / (one_g * omega * eta)
        + 4.0 * R * eta * G**2 / (sd * (1.0 - beta) * one_g * omega)
        + 4.0 * R * kappa_bar * (B + R * gamma + R) * G / (sd * one_g * omega)
    )

    gl = gamma * lam
    zeta_sum = zeta_series(gl, rho)
    if zeta_sum > zeta_bound(gl, rho) + 1e-9:
        raise NumericError(f"zeta series {zeta_sum} exceeds its closed-form bound {zeta_bound(gl, rho)}")
    one_a = 1.0 - alpha
    C1_lam = (
        16.0 * mix * G / (sd * one_g * one_a * omega**2)
        + 2.0 * eta * beta * G / ((1.0 - beta) * one_a * omega)
        + eta * G / (one_a * omega)
        + 4.0 * R * G**2 / (delta * one_a * omega)
    )
    C2_lam = (
        4.0 * R**2 * G / (eta * one_a * omega)
        + 4.0 * R * G**2 * eta / (sd * (1.0 - beta) * one_a * omega)
        + 2.0 * R * G**2 * zeta_sum / (sd * (1.0 - gl) * one_a * omega)
        + 4.0 * R * kappa_bar * (B + R * gamma + R) * G / (one_a * sd * omega)
    )
    return TheoryConstants(
        B=float(B), R=float(R), G=G, kappa=kappa, omega=float(omega), alpha=alpha,
        C1=C1, C2=C2, C1_lam=C1_lam, C2_lam=C2_lam, zeta_sum=zeta_sum,
        K=int(K), K0=burn_in_length(K, rho), lam=float(lam), gamma=float(gamma), delta=float(delta),
    )


@dataclass(frozen=True)
class TheoryInputs:
    """Everything the bound needs except the horizon ``K``."""

    lam: float
    B: float
    R: float
    gamma: float
    beta: float
    eta: float
    delta: float
    omega: float
    kappa_bar: float
    rho: float

    def at(self, K: int) -> TheoryConstants:
        return bound_constants(K=K, **asdict(self))


def radius_lower_bound(B: float, omega: float, gamma: float, lam: float = 0.0, exponent: float = 1.5) -> float:
    """Smallest admissible projection radius.

    At ``lam = 0`` this is ``2B / (sqrt(omega) (1-gamma)^exponent)``; the
    default exponent 3/2 gives the larger of the two radii in circulation,
    pass ``exponent=0.5`` for the other. For ``lam > 0`` it is
    ``2B / (sqrt(omega) (1-gamma) sqrt(1-alpha))``.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    if lam == 0.0:
        return 2.0 * B / (math.sqrt(omega) * (1.0 - gamma) ** exponent)
    alpha = contraction_modulus(gamma, lam)
    return 2.0 * B / (math.sqrt(omega) * (1.0 - gamma) * math.sqrt(1.0 - alpha))
