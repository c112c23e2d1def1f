"""Finite Markov reward processes under a fixed policy.

Holds the policy-induced chain ``(P, R, gamma)``, the feature matrix used
for linear value approximation, chain diagnostics (stationary distribution,
geometric mixing constants, Gram eigenvalue) and the synthetic generators
used by the experiments.

States are indexed ``0 .. n_states - 1``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import AssumptionError, NumericError

ROW_SUM_TOL = 1e-12
# Mixing distances below this are treated as exact zeros when fitting kappa_bar.
MIXING_NOISE_FLOOR = 1e-13
# Second eigenvalue moduli below this are reported as exactly 0.
RHO_ZERO_TOL = 1e-14


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mdp:
    """Policy-induced chain with transition-dependent rewards.

    Parameters
    ----------
    transition : array, shape (n, n)
        Row-stochastic matrix, ``transition[s, s'] = P(s'|s)``.
    reward : array, shape (n, n)
        ``reward[s, s'] = R(s, s')``.
    discount : float
        Discount factor in ``(0, 1)``.
    reward_bound : float, optional
        Declared bound ``B`` with ``|R(s, s')| <= B``. Defaults to ``max |R|``.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    reward_bound: float | None = None

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise ValueError(f"transition must be square, got shape {P.shape}")
        if R.shape != P.shape:
            raise ValueError(f"reward shape {R.shape} does not match transition {P.shape}")
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(R)):
            raise ValueError("transition and reward must be finite")
        if np.any(P < 0):
            raise ValueError("transition has negative entries")
        worst = float(np.max(np.abs(P.sum(axis=1) - 1.0)))
        if worst > ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1 (worst deviation {worst:.3e})")
        gamma = float(self.discount)
        if not 0.0 < gamma < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {gamma}")
        max_abs = float(np.max(np.abs(R)))
        bound = max_abs if self.reward_bound is None else float(self.reward_bound)
        if max_abs > bound:
            raise AssumptionError(
                f"bounded reward violated: max |R| = {max_abs} exceeds declared B = {bound}"
            )
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "discount", gamma)
        object.__setattr__(self, "reward_bound", bound)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature matrix ``phi`` of shape ``(n_states, d)``; row ``s`` is ``phi(s)``.

    Rows must have Euclidean norm at most 1 and the matrix must have full
    column rank.
    """

    phi: np.ndarray

    def __post_init__(self):
        phi = _frozen(self.phi)
        if phi.ndim != 2 or phi.shape[1] < 1:
            raise ValueError(f"phi must be a 2-d matrix, got shape {phi.shape}")
        norms = np.linalg.norm(phi, axis=1)
        if np.any(norms > 1.0 + 1e-12):
            s = int(np.argmax(norms))
            raise AssumptionError(
                f"bounded features violated: ||phi({s})|| = {norms[s]:.6g} > 1"
            )
        _check_full_rank(phi)
        object.__setattr__(self, "phi", phi)

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]


def _check_full_rank(phi: np.ndarray) -> None:
    if phi.shape[1] > phi.shape[0]:
        raise AssumptionError(
            f"feature matrix has more columns ({phi.shape[1]}) than rows ({phi.shape[0]})"
        )
    smin = float(np.linalg.svd(phi, compute_uv=False)[-1])
    if smin <= 1e-10:
        raise AssumptionError(
            f"feature matrix is not full column rank (smallest singular value {smin:.3e})"
        )


@dataclass(frozen=True)
class ChainDiagnostics:
    """Stationary distribution and the constants of the geometric mixing bound."""

    pi: np.ndarray
    rho: float
    kappa_bar: float
    omega: float
    horizon: int


@dataclass(frozen=True)
class AggregationScheme:
    """Partition of the states into disjoint, non-empty clusters."""

    clusters: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        clusters = tuple(tuple(int(s) for s in c) for c in self.clusters)
        seen: set[int] = set()
        for j, c in enumerate(clusters):
            if not c:
                raise ValueError(f"cluster {j} is empty")
            for s in c:
                if s < 0:
                    raise ValueError(f"negative state index {s} in cluster {j}")
                if s in seen:
                    raise ValueError(f"state {s} appears in more than one cluster")
                seen.add(s)
        object.__setattr__(self, "clusters", clusters)

    @property
    def d(self) -> int:
        return len(self.clusters)

    @classmethod
    def contiguous(cls, n_states: int, d: int) -> "AggregationScheme":
        """Split ``0..n_states-1`` into ``d`` contiguous blocks of near-equal size."""
        if not 1 <= d <= n_states:
            raise ValueError(f"need 1 <= d <= n_states, got d={d}, n_states={n_states}")
        return cls(tuple(tuple(int(s) for s in b) for b in np.array_split(np.arange(n_states), d)))


class Transition(NamedTuple):
    s: int
    s_next: int
    r: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A sampled path ``s_0 .. s_L`` with rewards ``r_k = R(s_k, s_{k+1})``."""

    states: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def __iter__(self) -> Iterator[Transition]:
        states = self.states.tolist()
        for k, r in enumerate(self.rewards.tolist()):
            yield Transition(states[k], states[k + 1], r)

    def __getitem__(self, k: int) -> Transition:
        return Transition(int(self.states[k]), int(self.states[k + 1]), float(self.rewards[k]))


def tabular_features(n_states: int) -> FeatureMap:
    return FeatureMap(np.eye(n_states))


def aggregation_features(n_states: int, scheme: AggregationScheme) -> FeatureMap:
    """One-hot cluster-membership features for a state aggregation."""
    covered = sorted(s for c in scheme.clusters for s in c)
    if covered != list(range(n_states)):
        raise ValueError("aggregation clusters must partition all states exactly")
    phi = np.zeros((n_states, scheme.d))
    for j, c in enumerate(scheme.clusters):
        phi[list(c), j] = 1.0
    return FeatureMap(phi)


# --------------------------------------------------------------------------
# chain structure
# --------------------------------------------------------------------------


def _boolean_power_positive(support: np.ndarray, max_power: int) -> int | None:
    """Smallest t <= max_power with support^t entrywise positive, else None."""
    A = support.astype(np.float64)
    M = A.copy()
    for t in range(1, max_power + 1):
        if np.all(M > 0):
            return t
        M = ((M @ A) > 0).astype(np.float64)
    return None


def check_ergodic(mdp: Mdp) -> None:
    """Raise :class:`AssumptionError` unless the chain is irreducible and aperiodic."""
    n = mdp.n_states
    support = (mdp.transition > 0).astype(np.float64)
    reach = np.zeros_like(support)
    M = np.eye(n)
    for _ in range(n):
        M = ((M @ support) > 0).astype(np.float64)
        reach = np.maximum(reach, M)
    if not np.all(reach > 0):
        i, j = map(int, np.argwhere(reach == 0)[0])
        raise AssumptionError(
            f"irreducibility check failed: state {j} is unreachable from state {i}; "
            "geometric mixing cannot hold"
        )
    if _boolean_power_positive(support, n * n) is None:
        raise AssumptionError(
            f"aperiodicity check failed: no power P^t with t <= {n * n} is entrywise "
            "positive; geometric mixing cannot hold"
        )


def stationary_distribution(mdp: Mdp) -> np.ndarray:
    """Stationary distribution ``pi`` with ``pi P = pi``.

    Raises
    ------
    AssumptionError
        If the chain is reducible or periodic.
    """
    check_ergodic(mdp)
    n = mdp.n_states
    A = mdp.transition.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    # one refinement step tightens pi P = pi to a few ulps
    pi = pi + np.linalg.solve(A, b - A @ pi)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if np.any(pi <= 0):
        raise NumericError("stationary distribution has a non-positive entry")
    return pi


def mixing_rate(mdp: Mdp) -> float:
    """Second-largest eigenvalue modulus of the transition matrix."""
    try:
        eig = np.linalg.eigvals(mdp.transition)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from exc
    if len(eig) == 1:
        return 0.0
    unit = int(np.argmin(np.abs(eig - 1.0)))
    rest = np.delete(eig, unit)
    rho = float(np.max(np.abs(rest)))
    if rho < RHO_ZERO_TOL:
        return 0.0
    if rho >= 1.0 - 1e-12:
        raise NumericError(f"second eigenvalue modulus {rho} is not below 1")
    return rho


def mixing_distances(mdp: Mdp, pi: np.ndarray, horizon: int) -> np.ndarray:
    """``dist[t] = max_s sum_s' |P^t(s'|s) - pi(s')|`` for ``t = 0..horizon``."""
    n = mdp.n_states
    out = np.empty(horizon + 1)
    Pt = np.eye(n)
    for t in range(horizon + 1):
        out[t] = float(np.max(np.abs(Pt - pi[None, :]).sum(axis=1)))
        Pt = Pt @ mdp.transition
    return out


def default_fit_horizon(rho: float) -> int:
    return 10 * math.ceil(1.0 / (1.0 - rho))


def fit_kappa_bar(mdp: Mdp, pi: np.ndarray, rho: float, horizon: int) -> float:
    """Smallest prefactor making ``dist(t) <= kappa_bar * rho**t`` for ``1 <= t <= horizon``.

    Distances at or below ``MIXING_NOISE_FLOOR`` are treated as zero.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    dist = mixing_distances(mdp, pi, horizon)[1:]
    live = dist > MIXING_NOISE_FLOOR
    if not np.any(live):
        return 0.0
    if rho == 0.0:
        raise AssumptionError(
            f"rho = 0 but the chain is not mixed after one step (distance {dist[0]:.3e})"
        )
    t = np.arange(1, horizon + 1)[live]
    # ratio in log space: rho**t underflows long before the distances do
    log_ratio = np.log(dist[live]) - t * math.log(rho)
    return float(math.exp(np.max(log_ratio)))


def mixing_time(kappa_bar: float, rho: float, eps: float) -> int:
    """Smallest integer ``t >= 0`` with ``kappa_bar * rho**t <= eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    if kappa_bar <= eps:
        return 0
    if rho == 0.0:
        return 1
    t = max(0, math.ceil(math.log(eps / kappa_bar) / math.log(rho)) - 1)
    while kappa_bar * rho**t > eps:
        t += 1
    while t > 0 and kappa_bar * rho ** (t - 1) <= eps:
        t -= 1
    return t


def feature_gram_omega(mdp: Mdp, features: FeatureMap | np.ndarray, pi: np.ndarray) -> float:
    """Smallest eigenvalue of ``Phi^T Diag(pi) Phi``."""
    phi = features.phi if isinstance(features, FeatureMap) else np.asarray(features, dtype=float)
    if phi.shape[0] != mdp.n_states:
        raise ValueError("feature rows do not match the number of states")
    _check_full_rank(phi)
    gram = phi.T @ (pi[:, None] * phi)
    omega = float(np.linalg.eigvalsh(gram)[0])
    if omega <= 0:
        raise AssumptionError(f"Gram matrix is not positive definite (lambda_min = {omega})")
    return omega


def diagnose(mdp: Mdp, features: FeatureMap, horizon: int | None = None) -> ChainDiagnostics:
    """Compute ``pi``, ``rho``, the fitted ``kappa_bar`` and ``omega`` in one go."""
    pi = stationary_distribution(mdp)
    rho = mixing_rate(mdp)
    T = default_fit_horizon(rho) if horizon is None else int(horizon)
    kappa_bar = fit_kappa_bar(mdp, pi, rho, T)
    omega = feature_gram_omega(mdp, features, pi)
    return ChainDiagnostics(pi=pi, rho=rho, kappa_bar=kappa_bar, omega=omega, horizon=T)


def expected_reward(mdp: Mdp) -> np.ndarray:
    """``Rbar(s) = sum_s' P(s'|s) R(s, s')``."""
    return np.einsum("ij,ij->i", mdp.transition, mdp.reward)


# --------------------------------------------------------------------------
# sampling and generators
# --------------------------------------------------------------------------


def sample_chain(mdp: Mdp, start: int, length: int, seed) -> Trajectory:
    """Sample ``length`` consecutive transitions starting from ``start``."""
    if length < 0:
        raise ValueError("length must be non-negative")
    n = mdp.n_states
    if not 0 <= start < n:
        raise ValueError(f"start state {start} out of range")
    rng = np.random.default_rng(seed)
    u = rng.random(length).tolist()
    cum = np.cumsum(mdp.transition, axis=1)
    cum[:, -1] = 1.0
    rows = [row.tolist() for row in cum]
    states = [0] * (length + 1)
    states[0] = s = int(start)
    last = n - 1
    for k in range(length):
        s = min(bisect.bisect_right(rows[s], u[k]), last)
        states[k + 1] = s
    states = np.asarray(states, dtype=np.int64)
    rewards = mdp.reward[states[:-1], states[1:]] if length else np.zeros(0)
    return Trajectory(states=states, rewards=np.asarray(rewards, dtype=np.float64))


def random_mdp(n_states: int, n_actions: int = 1, seed=None, discount: float = 0.9) -> Mdp:
    """Random MDP folded into its chain under the uniform policy.

    Per-(state, action) transition rows and per-(state, action, next-state)
    rewards are drawn uniformly from (0, 1); rows are normalised. Under the
    uniform policy the chain is ``P(s'|s) = mean_a P(s'|s, a)`` and
    ``R(s, s')`` is the reward expected given the observed transition.
    The declared reward bound is 1.
    """
    if n_states < 2:
        raise ValueError("n_states must be >= 2")
    if n_actions < 1:
        raise ValueError("n_actions must be >= 1")
    rng = np.random.default_rng(seed)
    P_sa = rng.random((n_states, n_actions, n_states))
    P_sa /= P_sa.sum(axis=2, keepdims=True)
    R_sa = rng.random((n_states, n_actions, n_states))
    joint = P_sa / n_actions
    P = joint.sum(axis=1)
    R = (joint * R_sa).sum(axis=1) / P
    P /= P.sum(axis=1, keepdims=True)
    return Mdp(transition=P, reward=R, discount=discount, reward_bound=1.0)


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------


def mdp_to_dict(mdp: Mdp, features: FeatureMap | None = None) -> dict:
    doc = {
        "n_states": mdp.n_states,
        "discount": mdp.discount,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "reward_bound": mdp.reward_bound,
    }
    if features is not None:
        doc["features"] = features.phi.tolist()
    return doc


_MDP_KEYS = {"n_states", "discount", "transition", "reward", "reward_bound", "features"}


def mdp_from_dict(doc: dict) -> tuple[Mdp, FeatureMap | None]:
    unknown = set(doc) - _MDP_KEYS
    if unknown:
        raise ValueError(f"unknown MDP keys: {sorted(unknown)}")
    for key in ("n_states", "discount", "transition", "reward"):
        if key not in doc:
            raise ValueError(f"MDP document is missing {key!r}")
    mdp = Mdp(
        transition=np.asarray(doc["transition"], dtype=float),
        reward=np.asarray(doc["reward"], dtype=float),
        discount=doc["discount"],
        reward_bound=doc.get("reward_bound"),
    )
    if mdp.n_states != int(doc["n_states"]):
        raise ValueError(f"n_states = {doc['n_states']} but transition is {mdp.n_states}x{mdp.n_states}")
    features = None
    if doc.get("features") is not None:
        features = FeatureMap(np.asarray(doc["features"], dtype=float))
        if features.n_states != mdp.n_states:
            raise ValueError("feature rows do not match n_states")
    return mdp, features


def save_mdp(path, mdp: Mdp, features: FeatureMap | None = None) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp, features), indent=1) + "\n")


def load_mdp(path) -> tuple[Mdp, FeatureMap | None]:
    return mdp_from_dict(json.loads(Path(path).read_text()))
