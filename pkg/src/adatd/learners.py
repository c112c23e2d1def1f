"""TD learners with linear function approximation as pure step functions.

Each ``*_step`` maps ``(state, hyperparameters, features, transition, gamma)``
to a new :class:`AdaTdState`; nothing is mutated in place.

Available learners:

* ``td0_step`` -- plain TD(0), no projection.
* ``projected_td0_step`` -- TD(0) followed by projection onto a ball.
* ``projected_td_lambda_step`` -- TD(lambda) with accumulating trace, projected.
* ``ada_td0_step`` -- AdaTD(0): momentum direction scaled by the root of the
  running sum of squared semi-gradient norms.
* ``ada_td_lambda_step`` -- AdaTD(lambda): the same adaptive rule driven by the
  trace-weighted semi-gradient.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AssumptionError, CertificateError
from .mdp import FeatureMap, Transition


@dataclass(frozen=True)
class Hyperparams:
    eta: float
    delta: float = 1.0
    beta: float = 0.0
    lam: float = 0.0
    radius: float = math.inf

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    def check_radius(self, lower_bound: float, strict: bool = False) -> None:
        """Warn (or raise when ``strict``) if the radius is below ``lower_bound``."""
        if self.radius >= lower_bound:
            return
        msg = f"projection radius {self.radius:.6g} is below the admissible bound {lower_bound:.6g}"
        if strict:
            raise AssumptionError(msg)
        warnings.warn(msg, stacklevel=2)


@dataclass(frozen=True, eq=False)
class AdaTdState:
    """Learner state before iteration ``k``.

    ``g`` is the semi-gradient used by the most recent step (zero initially).
    """

    theta: np.ndarray
    m: np.ndarray
    v: float
    z: np.ndarray
    g: np.ndarray
    k: int = 1

    @classmethod
    def initial(cls, d: int, theta0: np.ndarray | None = None) -> "AdaTdState":
        zero = np.zeros(d)
        theta = zero if theta0 is None else np.asarray(theta0, dtype=float).copy()
        return cls(theta=theta, m=zero, v=0.0, z=zero, g=zero, k=1)


def td_error(theta: np.ndarray, features: FeatureMap, t: Transition, gamma: float) -> float:
    """``d_k = r + gamma phi(s')^T theta - phi(s)^T theta``."""
    phi = features.phi
    return t.r + gamma * float(phi[t.s_next] @ theta) - float(phi[t.s] @ theta)


def semi_gradient(theta: np.ndarray, features: FeatureMap, t: Transition, gamma: float) -> np.ndarray:
    """``d_k phi(s_k)``."""
    return td_error(theta, features, t, gamma) * features.phi[t.s]


def project_ball(y: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x|| <= radius}``."""
    if math.isinf(radius):
        return y
    norm = math.sqrt(float(y @ y))
    if norm <= radius:
        return y
    return y * (radius / norm)


def trace_update(z: np.ndarray, features: FeatureMap, s: int, gamma: float, lam: float) -> np.ndarray:
    """Accumulating trace ``z' = gamma lam z + phi(s)``."""
    return (gamma * lam) * z + features.phi[s]


def lambda_semi_gradient(
    theta: np.ndarray, features: FeatureMap, t: Transition, z: np.ndarray, gamma: float
) -> np.ndarray:
    """Trace-weighted semi-gradient ``d_k z^k``."""
    return td_error(theta, features, t, gamma) * z


def td0_step(state: AdaTdState, hp: Hyperparams, features: FeatureMap, t: Transition, gamma: float) -> AdaTdState:
    g = semi_gradient(state.theta, features, t, gamma)
    return AdaTdState(state.theta + hp.eta * g, state.m, state.v, state.z, g, state.k + 1)


def projected_td0_step(
    state: AdaTdState, hp: Hyperparams, features: FeatureMap, t: Transition, gamma: float
) -> AdaTdState:
    g = semi_gradient(state.theta, features, t, gamma)
    theta = project_ball(state.theta + hp.eta * g, hp.radius)
    return AdaTdState(theta, state.m, state.v, state.z, g, state.k + 1)


def projected_td_lambda_step(
    state: AdaTdState, hp: Hyperparams, features: FeatureMap, t: Transition, gamma: float
) -> AdaTdState:
    z = trace_update(state.z, features, t.s, gamma, hp.lam)
    g = lambda_semi_gradient(state.theta, features, t, z, gamma)
    theta = project_ball(state.theta + hp.eta * g, hp.radius)
    return AdaTdState(theta, state.m, state.v, z, g, state.k + 1)


def _adaptive_update(state: AdaTdState, hp: Hyperparams, g: np.ndarray, z: np.ndarray) -> AdaTdState:
    m = hp.beta * state.m + (1.0 - hp.beta) * g
    v = state.v + float(g @ g)
    theta = project_ball(state.theta + hp.eta * m / math.sqrt(v + hp.delta), hp.radius)
    return AdaTdState(theta, m, v, z, g, state.k + 1)


def ada_td0_step(state: AdaTdState, hp: Hyperparams, features: FeatureMap, t: Transition, gamma: float) -> AdaTdState:
    """One AdaTD(0) iteration: momentum, squared-norm accumulation, scaled projected step."""
    g = semi_gradient(state.theta, features, t, gamma)
    return _adaptive_update(state, hp, g, state.z)


def ada_td_lambda_step(
    state: AdaTdState, hp: Hyperparams, features: FeatureMap, t: Transition, gamma: float
) -> AdaTdState:
    """One AdaTD(lambda) iteration; ``hp.radius`` is the lambda-specific radius."""
    z = trace_update(state.z, features, t.s, gamma, hp.lam)
    g = lambda_semi_gradient(state.theta, features, t, z, gamma)
    return _adaptive_update(state, hp, g, z)


StepFn = Callable[[AdaTdState, Hyperparams, FeatureMap, Transition, float], AdaTdState]

STEP_FUNCTIONS: dict[str, StepFn] = {
    "td0": td0_step,
    "ptd0": projected_td0_step,
    "tdlambda": projected_td_lambda_step,
    "adatd0": ada_td0_step,
    "adatdlambda": ada_td_lambda_step,
}

ADAPTIVE = frozenset({"adatd0", "adatdlambda"})
USES_TRACE = frozenset({"tdlambda", "adatdlambda"})


def run_learner(
    step: StepFn,
    hp: Hyperparams,
    features: FeatureMap,
    transitions: Iterable[Transition],
    gamma: float,
    state: AdaTdState | None = None,
) -> list[AdaTdState]:
    """Run ``step`` over ``transitions`` and return every state, initial one included."""
    if state is None:
        state = AdaTdState.initial(features.d)
    states = [state]
    for t in transitions:
        state = step(state, hp, features, t, gamma)
        states.append(state)
    return states


# --------------------------------------------------------------------------
# trajectory checks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmaReport:
    steps: int
    max_deviation: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol


def ema_reformulation_check(
    trace: Sequence[AdaTdState],
    hp: Hyperparams,
    features: FeatureMap,
    transitions: Sequence[Transition],
    gamma: float,
    tol: float = 1e-12,
) -> EmaReport:
    """Replay a recorded AdaTD(0) run with the running-average form of the scaling.

    The replay keeps ``vhat^k = (1 - 1/k) vhat^(k-1) + ||g^k||^2 / k`` and steps
    ``theta <- Proj(theta + (eta / sqrt(k)) m / sqrt(vhat + delta / k))``,
    recomputing every semi-gradient from its own iterates. The report gives the
    largest per-coordinate gap to the recorded ``theta``.
    """
    if len(trace) != len(transitions) + 1:
        raise ValueError("trace must hold one more state than there are transitions")
    theta = trace[0].theta.copy()
    m = trace[0].m.copy()
    k0 = trace[0].k
    vhat = trace[0].v / (k0 - 1) if k0 > 1 else 0.0
    worst = 0.0
    for i, t in enumerate(transitions):
        k = k0 + i
        g = semi_gradient(theta, features, t, gamma)
        m = hp.beta * m + (1.0 - hp.beta) * g
        vhat = (1.0 - 1.0 / k) * vhat + float(g @ g) / k
        theta = project_ball(theta + (hp.eta / math.sqrt(k)) * m / math.sqrt(vhat + hp.delta / k), hp.radius)
        worst = max(worst, float(np.max(np.abs(theta - trace[i + 1].theta))))
    return EmaReport(len(transitions), worst, tol)


@dataclass(frozen=True)
class BoundednessReport:
    max_dist: float
    max_g: float
    max_m: float
    R: float
    G: float
    tol: float

    @property
    def passed(self) -> bool:
        return (
            self.max_dist <= 2 * self.R + self.tol
            and self.max_g <= self.G + self.tol
            and self.max_m <= self.G + self.tol
        )


def boundedness_check(
    trace: Sequence[AdaTdState], theta_star: np.ndarray, radius: float, B: float, tol: float = 1e-9
) -> BoundednessReport:
    """Largest ``||theta^k - theta*||``, ``||g^k||``, ``||m^k||`` along a trajectory
    against ``2R`` and ``G = 2R + B``."""
    dist = max(float(np.linalg.norm(s.theta - theta_star)) for s in trace)
    gmax = max(float(np.linalg.norm(s.g)) for s in trace)
    mmax = max(float(np.linalg.norm(s.m)) for s in trace)
    return BoundednessReport(dist, gmax, mmax, radius, 2 * radius + B, tol)


def log_sum_check(g_sq: Sequence[float], delta: float, G: float) -> tuple[float, float]:
    """``(sum_k a_k / (delta + sum_{i<=k} a_i), ln((delta + K G^2) / delta))`` for ``a_k = ||g^k||^2``."""
    a = np.asarray(g_sq, dtype=float)
    lhs = float(np.sum(a / (delta + np.cumsum(a))))
    rhs = math.log((delta + len(a) * G**2) / delta)
    return lhs, rhs


def momentum_expansion(g_seq: Sequence[np.ndarray], beta: float) -> np.ndarray:
    """``(1 - beta) sum_j beta^(k-j) g^j`` accumulated explicitly from the first gradient."""
    g_seq = list(g_seq)
    if not g_seq:
        raise ValueError("need at least one gradient")
    k = len(g_seq)
    out = np.zeros_like(np.asarray(g_seq[0], dtype=float))
    for j, g in enumerate(g_seq, start=1):
        out = out + (1.0 - beta) * beta ** (k - j) * np.asarray(g, dtype=float)
    return out


@dataclass(frozen=True)
class NuFit:
    c: float
    nu: float
    max_rel_residual: float


def nu_estimate(v_trace: Sequence[float], burn_in: float = 0.1) -> NuFit:
    """Least-squares fit of ``v^k ~ c k^nu`` on a log-log scale.

    ``v_trace[i]`` is taken to be ``v^(i+1)``; the first ``burn_in`` fraction
    of the trace is discarded.
    """
    v = np.asarray(v_trace, dtype=float)
    if len(v) < 100:
        raise ValueError("need at least 100 values of v to fit a growth exponent")
    if not np.any(v > 0):
        raise ValueError("v is identically zero: no gradient signal")
    k = np.arange(1, len(v) + 1, dtype=float)
    start = int(math.floor(burn_in * len(v)))
    k, v = k[start:], v[start:]
    if np.any(v <= 0):
        raise ValueError("v must be strictly positive past the burn-in")
    X = np.column_stack([np.ones_like(k), np.log(k)])
    (log_c, nu), *_ = np.linalg.lstsq(X, np.log(v), rcond=None)
    c = math.exp(log_c)
    rel = float(np.max(np.abs(c * k**nu - v) / v))
    return NuFit(c, float(nu), rel)


def check_projection(state: AdaTdState, radius: float, tol: float = 1e-9) -> None:
    """Raise :class:`CertificateError` if the iterate left the projection ball."""
    norm = float(np.linalg.norm(state.theta))
    if norm > radius + tol:
        raise CertificateError(
            f"projection invariant violated at k={state.k - 1}: ||theta|| = {norm:.12g} > R = {radius:.12g}",
            witness=state.theta,
        )
