"""Experiment orchestration: configs, seeded multi-run execution, metrics and CSV output.

A config is a JSON document::

    {
      "problem": {"kind": "random", "n_states": 50, "n_actions": 4, "gamma": 0.9,
                  "seed": 7, "features": {"kind": "aggregation", "d": 10}},
      "algorithms": [{"name": "ptd0", "eta": 0.45},
                     {"name": "adatd0", "eta": 0.5, "delta": 1.0, "beta": 0.5}],
      "n_seeds": 10, "n_steps": 20000, "log_every": 500, "master_seed": 0
    }

Every (algorithm, seed) cell draws its chain from its own RNG stream, seeded
by :func:`cell_seed`, so results do not depend on scheduling or thread count.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import learners as L
from .errors import ConfigError
from .mdp import (
    AggregationScheme,
    ChainDiagnostics,
    FeatureMap,
    Mdp,
    aggregation_features,
    diagnose,
    expected_reward,
    load_mdp,
    mdp_from_dict,
    random_mdp,
    sample_chain,
    tabular_features,
)
from .oracle import FixedPoint, TheoryInputs, burn_in_length, fixed_point_td_lambda, radius_lower_bound

ALGORITHMS = tuple(L.STEP_FUNCTIONS)
CSV_COLUMNS = ("k", "dist_sq", "rmsbe", "v", "bound")

_TOP_KEYS = {
    "problem", "algorithms", "n_seeds", "n_steps", "n_episodes", "horizon",
    "log_every", "master_seed", "trace_reset", "rmsbe", "strict_radius",
}
_PROBLEM_KEYS = {"kind", "n_states", "n_actions", "gamma", "seed", "features", "path", "mdp"}
_FEATURE_KEYS = {"kind", "d", "phi"}
_ALGO_KEYS = {"name", "eta", "delta", "beta", "lambda", "radius", "label"}
_SWEEPABLE = ("eta", "delta", "beta", "lambda", "radius")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    eta: float
    delta: float = 1.0
    beta: float = 0.0
    lam: float = 0.0
    radius: float | None = None
    label: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    algorithms: tuple[AlgorithmSpec, ...]
    n_seeds: int = 1
    n_steps: int = 1000
    horizon: int | None = None
    log_every: int = 100
    master_seed: int = 0
    trace_reset: str = "continuing"
    rmsbe: str = "exact"
    strict_radius: bool = False
    base_dir: str = "."

    def algorithm_ids(self) -> list[str]:
        names = [a.label or a.name for a in self.algorithms]
        counts = {n: names.count(n) for n in names}
        seen: dict[str, int] = {}
        ids = []
        for n in names:
            if counts[n] == 1:
                ids.append(n)
            else:
                seen[n] = seen.get(n, 0) + 1
                ids.append(f"{n}_{seen[n]}")
        return ids


def _unknown(keys, allowed, where):
    extra = set(keys) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _int(doc, key, default, minimum):
    value = doc.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}, got {value}")
    return value


def _algorithm(doc: dict, allow_lists: bool) -> AlgorithmSpec:
    if not isinstance(doc, dict):
        raise ConfigError("each algorithm entry must be an object")
    _unknown(doc, _ALGO_KEYS, "algorithm entry")
    name = doc.get("name")
    if name not in L.STEP_FUNCTIONS:
        raise ConfigError(f"unknown algorithm {name!r}; expected one of {list(ALGORITHMS)}")
    if "eta" not in doc:
        raise ConfigError(f"algorithm {name!r} needs a step size 'eta'")
    values = {}
    for key in _SWEEPABLE:
        if key not in doc:
            continue
        v = doc[key]
        if isinstance(v, list) and not allow_lists:
            raise ConfigError(f"{name}.{key} is a list; use the sweep command for grids")
        values[key] = v
    spec = AlgorithmSpec(
        name=name,
        eta=values.get("eta"),
        delta=values.get("delta", 1.0),
        beta=values.get("beta", 0.0),
        lam=values.get("lambda", 0.0),
        radius=values.get("radius"),
        label=doc.get("label"),
    )
    if not allow_lists:
        if name in ("td0", "ptd0", "adatd0") and spec.lam != 0.0:
            raise ConfigError(f"{name} does not take a nonzero lambda")
        try:
            L.Hyperparams(eta=spec.eta, delta=spec.delta, beta=spec.beta, lam=spec.lam,
                          radius=math.inf if spec.radius is None else spec.radius)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid hyperparameters for {name}: {exc}") from exc
    return spec


def parse_config(doc: dict, base_dir: str = ".", allow_lists: bool = False) -> ExperimentConfig:
    """Validate a config document. Unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _unknown(doc, _TOP_KEYS, "config")
    if "problem" not in doc or not isinstance(doc["problem"], dict):
        raise ConfigError("config needs a 'problem' object")
    problem = doc["problem"]
    _unknown(problem, _PROBLEM_KEYS, "problem")
    if problem.get("kind") not in ("random", "file", "inline"):
        raise ConfigError("problem.kind must be 'random', 'file' or 'inline'")
    feats = problem.get("features", {"kind": "tabular"})
    if not isinstance(feats, dict):
        raise ConfigError("problem.features must be an object")
    _unknown(feats, _FEATURE_KEYS, "problem.features")
    if feats.get("kind", "tabular") not in ("tabular", "aggregation", "matrix"):
        raise ConfigError("features.kind must be 'tabular', 'aggregation' or 'matrix'")
    algos = doc.get("algorithms")
    if not isinstance(algos, list) or not algos:
        raise ConfigError("config needs a non-empty 'algorithms' list")
    algorithms = tuple(_algorithm(a, allow_lists) for a in algos)

    horizon = _int(doc, "horizon", None, 1)
    n_episodes = _int(doc, "n_episodes", None, 0)
    if n_episodes is not None:
        if horizon is None:
            raise ConfigError("n_episodes requires horizon")
        if "n_steps" in doc:
            raise ConfigError("give either n_steps or n_episodes, not both")
        n_steps = n_episodes * horizon
    else:
        n_steps = _int(doc, "n_steps", 1000, 0)
    trace_reset = doc.get("trace_reset", "continuing")
    if trace_reset not in ("continuing", "episodic"):
        raise ConfigError("trace_reset must be 'continuing' or 'episodic'")
    if trace_reset == "episodic" and horizon is None:
        raise ConfigError("episodic trace reset requires horizon")
    rmsbe = doc.get("rmsbe", "exact")
    if rmsbe not in ("exact", "empirical"):
        raise ConfigError("rmsbe must be 'exact' or 'empirical'")
    if rmsbe == "empirical" and horizon is None:
        raise ConfigError("empirical rmsbe requires horizon")
    return ExperimentConfig(
        problem=problem,
        algorithms=algorithms,
        n_seeds=_int(doc, "n_seeds", 1, 1),
        n_steps=n_steps,
        horizon=horizon,
        log_every=_int(doc, "log_every", 100, 1),
        master_seed=_int(doc, "master_seed", 0, 0),
        trace_reset=trace_reset,
        rmsbe=rmsbe,
        strict_radius=bool(doc.get("strict_radius", False)),
        base_dir=str(base_dir),
    )


def load_config(path, allow_lists: bool = False) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc, base_dir=str(path.parent), allow_lists=allow_lists)


# --------------------------------------------------------------------------
# problems
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Problem:
    mdp: Mdp
    features: FeatureMap
    diagnostics: ChainDiagnostics
    _fixed_points: dict = field(default_factory=dict, repr=False)

    def fixed_point(self, lam: float) -> FixedPoint:
        if lam not in self._fixed_points:
            self._fixed_points[lam] = fixed_point_td_lambda(self.mdp, self.features, self.diagnostics.pi, lam)
        return self._fixed_points[lam]

    def default_radius(self, lam: float) -> float:
        return radius_lower_bound(self.mdp.reward_bound, self.diagnostics.omega, self.mdp.discount, lam)


def build_problem(spec: dict, base_dir: str = ".") -> Problem:
    kind = spec["kind"]
    features = None
    if kind == "random":
        for key in ("n_states",):
            if key not in spec:
                raise ConfigError(f"random problem needs {key!r}")
        mdp = random_mdp(spec["n_states"], spec.get("n_actions", 1), seed=spec.get("seed", 0),
                         discount=spec.get("gamma", 0.9))
    else:
        if kind == "file":
            if "path" not in spec:
                raise ConfigError("file problem needs 'path'")
            path = Path(spec["path"])
            if not path.is_absolute():
                path = Path(base_dir) / path
            try:
                mdp, features = load_mdp(path)
            except FileNotFoundError as exc:
                raise ConfigError(f"MDP file not found: {path}") from exc
        else:
            if "mdp" not in spec:
                raise ConfigError("inline problem needs 'mdp'")
            mdp, features = mdp_from_dict(spec["mdp"])
        if "gamma" in spec:
            mdp = Mdp(mdp.transition, mdp.reward, spec["gamma"], mdp.reward_bound)
    fspec = spec.get("features", {"kind": "tabular"})
    fkind = fspec.get("kind", "tabular")
    n = mdp.n_states
    if fkind == "tabular":
        features = tabular_features(n)
    elif fkind == "aggregation":
        if "d" not in fspec:
            raise ConfigError("aggregation features need 'd'")
        features = aggregation_features(n, AggregationScheme.contiguous(n, fspec["d"]))
    elif "phi" in fspec:
        features = FeatureMap(np.asarray(fspec["phi"], dtype=float))
    elif features is None:
        raise ConfigError("matrix features need 'phi' or a features block in the MDP document")
    if features.n_states != n:
        raise ConfigError("feature rows do not match the number of states")
    return Problem(mdp, features, diagnose(mdp, features))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def rmsbe_exact(mdp: Mdp, features: FeatureMap, pi: np.ndarray, theta: np.ndarray) -> float:
    """``sum_s pi(s) (Rbar(s) + gamma (P Phi theta)(s) - (Phi theta)(s))^2``."""
    V = features.phi @ np.asarray(theta, dtype=float)
    resid = expected_reward(mdp) + mdp.discount * (mdp.transition @ V) - V
    return float(np.sum(pi * resid**2))


def rmsbe_empirical(features: FeatureMap, theta: np.ndarray, transitions: Sequence[L.Transition], gamma: float) -> float:
    """Mean squared TD error of ``theta`` over a batch of sampled transitions."""
    if not transitions:
        return 0.0
    return float(np.mean([L.td_error(theta, features, t, gamma) ** 2 for t in transitions]))


@dataclass(frozen=True)
class Checkpoint:
    k: int
    dist_sq: float
    rmsbe: float
    v: float
    bound: float | None = None


@dataclass(frozen=True)
class MetricSeries:
    algorithm: str
    seed: int | None
    checkpoints: tuple[Checkpoint, ...]
    stat: str | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.checkpoints], dtype=float)


def bound_overlay(series: MetricSeries, inputs: TheoryInputs, tol: float = 0.0) -> tuple[MetricSeries, list[Checkpoint]]:
    """Attach the finite-time bound at ``K = k`` to every checkpoint with ``k >= 2``.

    Returns the annotated series and the checkpoints (with ``k >= K0(k)``)
    at which the running minimum of ``dist_sq`` exceeds the bound. A
    violation means an implementation error, not a failure of the theory.
    """
    out = []
    violations = []
    running = math.inf
    for c in series.checkpoints:
        running = min(running, c.dist_sq)
        if c.k < 2:
            out.append(replace(c, bound=None))
            continue
        consts = inputs.at(c.k)
        bound = consts.rhs()
        annotated = replace(c, bound=bound)
        out.append(annotated)
        if c.k >= burn_in_length(c.k, inputs.rho) and running > bound + tol:
            violations.append(annotated)
    return replace(series, checkpoints=tuple(out)), violations


def aggregate_series(series: Sequence[MetricSeries]) -> list[MetricSeries]:
    """Cross-seed mean, min and max per algorithm, in first-seen algorithm order."""
    groups: dict[str, list[MetricSeries]] = {}
    for s in series:
        groups.setdefault(s.algorithm, []).append(s)
    out = []
    for algo, group in groups.items():
        ks = [c.k for c in group[0].checkpoints]
        if any([c.k for c in s.checkpoints] != ks for s in group):
            raise ValueError(f"series for {algo} have mismatched checkpoints")
        for stat, fn in (("mean", np.mean), ("min", np.min), ("max", np.max)):
            cps = []
            for i, k in enumerate(ks):
                row = [s.checkpoints[i] for s in group]
                bounds = [c.bound for c in row]
                bound = None if any(b is None for b in bounds) else float(fn(bounds))
                cps.append(Checkpoint(
                    k=k,
                    dist_sq=float(fn([c.dist_sq for c in row])),
                    rmsbe=float(fn([c.rmsbe for c in row])),
                    v=float(fn([c.v for c in row])),
                    bound=bound,
                ))
            out.append(MetricSeries(algo, None, tuple(cps), stat=stat))
    return out


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def cell_seed(master_seed: int, algorithm_id: str, seed_index: int) -> int:
    """``splitmix64(splitmix64(splitmix64(master) ^ crc32(id)) ^ seed_index)``."""
    h = splitmix64(master_seed & _MASK64)
    h = splitmix64(h ^ zlib.crc32(algorithm_id.encode()))
    return splitmix64(h ^ seed_index)


def checkpoint_steps(n_steps: int, log_every: int) -> list[int]:
    ks = list(range(0, n_steps + 1, log_every))
    if ks[-1] != n_steps:
        ks.append(n_steps)
    return ks


def hyperparams_for(spec: AlgorithmSpec, problem: Problem, strict: bool = False) -> L.Hyperparams:
    if spec.name == "td0":
        radius = math.inf
    elif spec.radius is None:
        radius = problem.default_radius(spec.lam)
    else:
        radius = float(spec.radius)
    hp = L.Hyperparams(eta=spec.eta, delta=spec.delta, beta=spec.beta, lam=spec.lam, radius=radius)
    if spec.name != "td0":
        hp.check_radius(problem.default_radius(spec.lam), strict=strict)
    return hp


def theory_inputs(spec: AlgorithmSpec, hp: L.Hyperparams, problem: Problem) -> TheoryInputs | None:
    if spec.name not in L.ADAPTIVE:
        return None
    d = problem.diagnostics
    return TheoryInputs(
        lam=hp.lam, B=problem.mdp.reward_bound, R=hp.radius, gamma=problem.mdp.discount,
        beta=hp.beta, eta=hp.eta, delta=hp.delta, omega=d.omega, kappa_bar=d.kappa_bar, rho=d.rho,
    )


def run_cell(config: ExperimentConfig, problem: Problem, index: int, seed_index: int) -> MetricSeries:
    """Run one (algorithm, seed) cell and record its checkpoints."""
    spec = config.algorithms[index]
    algo_id = config.algorithm_ids()[index]
    hp = hyperparams_for(spec, problem, config.strict_radius)
    step = L.STEP_FUNCTIONS[spec.name]
    mdp, features = problem.mdp, problem.features
    pi = problem.diagnostics.pi
    gamma = mdp.discount
    theta_star = problem.fixed_point(hp.lam).theta_star
    rng = np.random.default_rng(cell_seed(config.master_seed, algo_id, seed_index))
    start = int(rng.integers(mdp.n_states))
    traj = sample_chain(mdp, start, config.n_steps, int(rng.integers(2**63)))
    transitions = list(traj)
    projected = spec.name != "td0"
    episodic = config.trace_reset == "episodic" and spec.name in L.USES_TRACE
    horizon = config.horizon

    def record(state: L.AdaTdState, k: int) -> Checkpoint:
        if config.rmsbe == "exact":
            err = rmsbe_exact(mdp, features, pi, state.theta)
        else:
            err = rmsbe_empirical(features, state.theta, transitions[max(0, k - horizon):k], gamma)
        diff = state.theta - theta_star
        return Checkpoint(k=k, dist_sq=float(diff @ diff), rmsbe=err, v=state.v)

    state = L.AdaTdState.initial(features.d)
    marks = set(checkpoint_steps(config.n_steps, config.log_every))
    checkpoints = [record(state, 0)]
    zero = np.zeros(features.d)
    for k, t in enumerate(transitions, start=1):
        if episodic and k > 1 and (k - 1) % horizon == 0:
            state = replace(state, z=zero)
        state = step(state, hp, features, t, gamma)
        if projected:
            L.check_projection(state, hp.radius)
        if k in marks:
            checkpoints.append(record(state, k))
    series = MetricSeries(algo_id, seed_index, tuple(checkpoints))
    inputs = theory_inputs(spec, hp, problem)
    if inputs is not None:
        series, _ = bound_overlay(series, inputs)
    return series


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    problem: Problem
    series: list[MetricSeries]
    aggregates: list[MetricSeries]
    violations: dict[str, list[Checkpoint]]

    def aggregate(self, algorithm: str, stat: str = "mean") -> MetricSeries:
        for s in self.aggregates:
            if s.algorithm == algorithm and s.stat == stat:
                return s
        raise KeyError((algorithm, stat))


def default_threads() -> int:
    return os.cpu_count() or 1


def run_experiment(config: ExperimentConfig, threads: int | None = None, problem: Problem | None = None) -> ExperimentResult:
    """Run every (algorithm, seed) cell, aggregate, and check the bound overlay."""
    if problem is None:
        problem = build_problem(config.problem, config.base_dir)
    for spec in config.algorithms:
        problem.fixed_point(spec.lam)
    cells = [(i, s) for i in range(len(config.algorithms)) for s in range(config.n_seeds)]
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1:
        series = [run_cell(config, problem, i, s) for i, s in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            series = list(pool.map(lambda c: run_cell(config, problem, *c), cells))
    aggregates = aggregate_series(series)
    violations: dict[str, list[Checkpoint]] = {}
    ids = config.algorithm_ids()
    for i, spec in enumerate(config.algorithms):
        hp = hyperparams_for(spec, problem)
        inputs = theory_inputs(spec, hp, problem)
        if inputs is None:
            continue
        mean = next(a for a in aggregates if a.algorithm == ids[i] and a.stat == "mean")
        _, bad = bound_overlay(mean, inputs)
        violations[ids[i]] = bad
    return ExperimentResult(config, problem, series, aggregates, violations)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _row(c: Checkpoint) -> list[str]:
    return [_fmt(c.k), _fmt(c.dist_sq), _fmt(c.rmsbe), _fmt(c.v), _fmt(c.bound)]


def series_filename(s: MetricSeries) -> str:
    return f"{s.algorithm}_seed{s.seed:03d}.csv"


_GNUPLOT = """\
# gnuplot -persist plot.gp
set datafile separator ","
set key autotitle columnhead
set logscale y
set xlabel "k"
set ylabel "RMSBE"
plot for [a in "{algos}"] \\
    sprintf("< awk -F, 'NR==1 || ($1==\\"%s\\" && $2==\\"mean\\")' aggregate.csv", a) \\
    using 3:5 with lines title a
"""


def emit_csv(series: Sequence[MetricSeries], out_dir) -> list[Path]:
    """Write one CSV per run, ``aggregate.csv`` and a gnuplot stub into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    header = ",".join(CSV_COLUMNS) + "\n"

    def write(path: Path, text: str):
        try:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    for s in series:
        lines = [header] + [",".join(_row(c)) + "\n" for c in s.checkpoints]
        write(out / series_filename(s), "".join(lines))
    lines = ["algorithm,stat," + header]
    for a in aggregate_series(series):
        lines += [",".join([a.algorithm, a.stat] + _row(c)) + "\n" for c in a.checkpoints]
    write(out / "aggregate.csv", "".join(lines))
    algos = " ".join(dict.fromkeys(s.algorithm for s in series))
    write(out / "plot.gp", _GNUPLOT.format(algos=algos))
    return written


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


def expand_sweep(doc: dict) -> list[tuple[str, dict]]:
    """Split a config whose algorithm entries hold hyperparameter lists into
    single-algorithm cells, one per grid point. Returns ``(cell name, config)``."""
    cells = []
    for entry in doc.get("algorithms", []):
        if not isinstance(entry, dict):
            raise ConfigError("each algorithm entry must be an object")
        grid_keys = [k for k in _SWEEPABLE if isinstance(entry.get(k), list)]
        grids = [entry[k] for k in grid_keys]
        for combo in itertools.product(*grids):
            algo = dict(entry)
            algo.update(zip(grid_keys, combo))
            parts = [entry["name"]] + [f"{k}={json.dumps(v)}" for k, v in zip(grid_keys, combo)]
            name = "_".join(parts)
            cell = copy.deepcopy(doc)
            cell["algorithms"] = [algo]
            cells.append((name, cell))
    names = [n for n, _ in cells]
    if len(set(names)) != len(names):
        cells = [(f"{i:03d}_{n}", c) for i, (n, c) in enumerate(cells)]
    return cells
