"""Seeded multi-trial experiments, timing and result files.

Every trial derives its randomness from ``SeedSequence(seed, spawn_key=(trial,))``
split into four PCG64 streams: environment sampling, fixed-policy sampling,
transition noise and agent exploration. None of them depend on the agent
kind, so fixed and adaptive runs with the same seed see the same
environments and the same start states.
"""
from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from .adaptive import PasaParams
from .envs import (GarnetSpec, GridworldSpec, LogisticsSpec, TabularEnv, sample_garnet,
                   sample_gridworld, sample_logistics)
from .errors import CapacityError, ConfigError, InvalidArgument
from .evaluation import FixedPolicy, mse_weights, stationary_distribution, true_q
from .sarsa import Agent, AgentConfig, SarsaParams, run_episodeless_loop

SCHEMA_VERSION = 1
RESULTS_HEADER = f"# pasa-results schema={SCHEMA_VERSION}"
RESULT_COLUMNS = ("row", "agent", "trial", "seed", "final_reward", "final_reward_ci95",
                  "rmse", "rmse_ci95", "nrmse", "nrmse_ci95", "repartitions", "rho_changes")
CURVE_COLUMNS = ("window", "iteration_end", "mean_reward", "ci_lo", "ci_hi")
MAX_ORACLE_STATES = 20_000
WORKERS_ENV = "PASA_WORKERS"

# cell counts paired with GARNET sizes in the reference experiments
GARNET_CELLS = {250: 70, 500: 100, 1000: 140, 2000: 200, 4000: 280, 8000: 380}
SPECS = {"garnet": GarnetSpec, "gridworld": GridworldSpec, "logistics": LogisticsSpec}
SAMPLERS = {GarnetSpec: sample_garnet, GridworldSpec: sample_gridworld, LogisticsSpec: sample_logistics}


@dataclass
class ExperimentConfig:
    environment: GarnetSpec | GridworldSpec | LogisticsSpec = field(
        default_factory=lambda: GarnetSpec(S=250))
    agent: str = "pasa"
    X: int | None = None
    X0: int | None = None
    sarsa: SarsaParams = field(default_factory=SarsaParams)
    pasa: PasaParams = field(default_factory=PasaParams)
    trials: int = 20
    iterations: int = 5_000_000
    window_fraction: float = 0.2
    n_windows: int = 100
    n_checkpoints: int = 20
    seed: int = 0
    fixed_policy: bool = False
    policy_epsilon: float | None = None

    @property
    def family(self) -> str:
        return {GarnetSpec: "garnet", GridworldSpec: "gridworld", LogisticsSpec: "logistics"}[
            type(self.environment)]

    @property
    def S(self) -> int:
        env = self.environment
        if isinstance(env, GarnetSpec):
            return env.S
        if isinstance(env, GridworldSpec):
            return env.N * env.N
        return 1 << 18

    def resolved_X(self) -> int:
        if self.agent == "tabular":
            return self.S
        if self.X is not None:
            return self.X
        if isinstance(self.environment, GarnetSpec):
            return GARNET_CELLS.get(self.environment.S, max(2, int(round(2 * math.sqrt(self.S)))))
        return 140

    def resolved_X0(self) -> int:
        return self.X0 if self.X0 is not None else self.resolved_X() // 2

    @property
    def final_windows(self) -> int:
        return int(round(self.n_windows * self.window_fraction))

    def validate(self) -> "ExperimentConfig":
        if self.agent not in ("tabular", "fixed", "pasa"):
            raise ConfigError("agent.kind", f"must be tabular, fixed or pasa, got {self.agent!r}")
        X, X0 = self.resolved_X(), self.resolved_X0()
        if not 1 <= X <= self.S:
            raise ConfigError("agent.X", f"need 1 <= X <= S={self.S}, got {X}")
        if self.agent == "pasa" and not 1 <= X0 <= X:
            raise ConfigError("agent.X0", f"need 1 <= X0 <= X={X}, got {X0}")
        if self.trials < 1:
            raise ConfigError("experiment.trials", "must be >= 1")
        if self.iterations < 0:
            raise ConfigError("experiment.iterations", "must be >= 0")
        if self.n_windows < 1:
            raise ConfigError("experiment.n_windows", "must be >= 1")
        if self.iterations and self.iterations % self.n_windows:
            raise ConfigError("experiment.iterations",
                              f"must be a multiple of n_windows={self.n_windows}")
        if not 0 < self.window_fraction <= 1 or not self.final_windows >= 1:
            raise ConfigError("experiment.window_fraction", "must select at least one window")
        if abs(self.final_windows - self.n_windows * self.window_fraction) > 1e-9:
            raise ConfigError("experiment.window_fraction", "must cover a whole number of windows")
        if self.n_checkpoints < 1:
            raise ConfigError("experiment.n_checkpoints", "must be >= 1")
        if self.seed < 0:
            raise ConfigError("experiment.seed", "must be a nonnegative integer")
        if self.policy_epsilon is not None and not 0 <= self.policy_epsilon <= 1:
            raise ConfigError("experiment.policy_epsilon", "must lie in [0,1]")
        return self

    # file round trip -----------------------------------------------------------
    def to_dict(self) -> dict:
        env = asdict(self.environment)
        env.pop("seed", None)
        return {
            "schema_version": SCHEMA_VERSION,
            "environment": {"family": self.family, **_plain(env)},
            "agent": {"kind": self.agent, "X": self.resolved_X(), "X0": self.resolved_X0()},
            "sarsa": _plain(asdict(self.sarsa)),
            "pasa": _plain(asdict(self.pasa)),
            "experiment": {"trials": self.trials, "iterations": self.iterations,
                           "window_fraction": self.window_fraction, "n_windows": self.n_windows,
                           "n_checkpoints": self.n_checkpoints, "seed": self.seed,
                           "fixed_policy": self.fixed_policy,
                           "policy_epsilon": self.policy_epsilon},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version}")
        unknown = set(data) - {"environment", "agent", "sarsa", "pasa", "experiment"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        env = dict(data.get("environment") or {})
        family = env.pop("family", "garnet")
        if family not in SPECS:
            raise ConfigError("environment.family", f"unknown family {family!r}")
        spec_cls = SPECS[family]
        if family == "garnet":
            env.setdefault("S", 250)
        for key in ("walls", "capacities", "transport_cost", "rent_ranges"):
            if key in env:
                env[key] = _tuplify(env[key])
        spec = _build(spec_cls, env, "environment")
        agent = dict(data.get("agent") or {})
        kind = agent.pop("kind", "pasa")
        X, X0 = agent.pop("X", None), agent.pop("X0", None)
        if agent:
            raise ConfigError(f"agent.{sorted(agent)[0]}", "unknown field")
        sarsa = _build(SarsaParams, data.get("sarsa") or {}, "sarsa")
        pasa = _build(PasaParams, data.get("pasa") or {}, "pasa")
        exp = dict(data.get("experiment") or {})
        allowed = {"trials", "iterations", "window_fraction", "n_windows", "n_checkpoints",
                   "seed", "fixed_policy", "policy_epsilon"}
        bad = set(exp) - allowed
        if bad:
            raise ConfigError(f"experiment.{sorted(bad)[0]}", "unknown field")
        cfg = cls(environment=spec, agent=kind, X=X, X0=X0, sarsa=sarsa, pasa=pasa, **exp)
        return cfg.validate()


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    if isinstance(d, np.generic):
        return d.item()
    return d


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def _build(cls, values: dict, path: str):
    names = {f.name for f in fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown field")
    try:
        return cls(**values)
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(path, str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


# trials --------------------------------------------------------------------------

@dataclass
class TrialResult:
    trial: int
    seed: int
    reward_series: np.ndarray          # mean reward per window
    final_reward: float
    rmse: float | None
    nrmse: float | None
    us_per_iteration: float | None
    repartitions: int
    rho_changes: int


def trial_streams(seed: int, trial: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed, spawn_key=(trial,)).spawn(4)
    names = ("environment", "policy", "noise", "agent")
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


def sample_environment(config: ExperimentConfig, rng: np.random.Generator) -> TabularEnv:
    return SAMPLERS[type(config.environment)](config.environment, rng)


def agent_config(config: ExperimentConfig) -> AgentConfig:
    return AgentConfig(config.agent, config.resolved_X(), config.resolved_X0(),
                       config.sarsa, config.pasa)


def mse_checkpoints(config: ExperimentConfig) -> tuple[int, ...]:
    T = config.iterations
    start = T - int(round(T * config.window_fraction))
    n = config.n_checkpoints
    return tuple(sorted({start + (T - start) * (j + 1) // n for j in range(n)}))


def run_trial(config: ExperimentConfig, trial: int) -> TrialResult:
    rng = trial_streams(config.seed, trial)
    env = sample_environment(config, rng["environment"])
    policy = None
    checkpoints: tuple[int, ...] = ()
    errors: list[tuple[float, float]] = []
    if config.fixed_policy:
        if env.S > MAX_ORACLE_STATES:
            raise CapacityError(f"S={env.S} exceeds the dense-oracle limit of {MAX_ORACLE_STATES}")
        eps = config.sarsa.epsilon if config.policy_epsilon is None else config.policy_epsilon
        policy = FixedPolicy.sample(env.S, env.A, eps, rng["policy"])
        q = true_q(env, env.reward, policy.pi, config.sarsa.gamma)
        psi = stationary_distribution(env, policy.pi, env.initial_state)
        w = mse_weights(psi, policy.pi)
        scale = float(np.sum(w * q ** 2))
        checkpoints = mse_checkpoints(config)
    agent = Agent(agent_config(config), env.S, env.A,
                  None if policy is None else policy.actions)
    spent = [0.0]

    def record(t, ag):
        t0 = time.perf_counter()
        mse = float(np.sum(w * (ag.q_table() - q) ** 2))
        errors.append((mse, mse / scale if scale > 0 else float("nan")))
        spent[0] += time.perf_counter() - t0

    start = time.perf_counter()
    res = run_episodeless_loop(env, agent, config.iterations, rng["noise"], rng["agent"],
                               n_windows=config.n_windows, checkpoints=checkpoints,
                               on_checkpoint=record if checkpoints else None)
    elapsed = time.perf_counter() - start - spent[0]
    series = res.mean_reward_windows
    k = config.final_windows
    final = float(series[-k:].mean()) if len(series) >= k and len(series) else float("nan")
    rmse = nrmse = None
    if errors:
        arr = np.array(errors)
        rmse, nrmse = float(math.sqrt(arr[:, 0].mean())), float(math.sqrt(arr[:, 1].mean()))
    us = elapsed / config.iterations * 1e6 if config.iterations else None
    return TrialResult(trial, config.seed, series, final, rmse, nrmse, us,
                       res.repartitions, res.rho_changes)


def _run_trial_args(args):
    return run_trial(*args)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"must be an integer, got {raw!r}") from None
    return max(1, n)


def t_halfwidth(values, level: float = 0.95) -> float:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if len(v) < 2:
        return float("nan")
    return float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    trials: list[TrialResult]

    @property
    def agent(self) -> str:
        return self.config.agent

    def _vals(self, name):
        return [getattr(t, name) for t in self.trials if getattr(t, name) is not None]

    def mean(self, name: str) -> float:
        v = self._vals(name)
        return float(np.mean(v)) if v else float("nan")

    def ci(self, name: str, level: float = 0.95) -> float:
        return t_halfwidth(self._vals(name), level)

    def curve(self) -> np.ndarray:
        """(n_windows, 3): mean reward and 95% interval per window."""
        if not self.trials or not len(self.trials[0].reward_series):
            return np.zeros((0, 3))
        series = np.array([t.reward_series for t in self.trials])
        m = series.mean(axis=0)
        h = np.array([t_halfwidth(col) for col in series.T])
        return np.column_stack([m, m - h, m + h])


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> ExperimentReport:
    config.validate()
    workers = worker_count() if workers is None else workers
    jobs = [(config, i) for i in range(config.trials)]
    if workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial_args, jobs))   # map keeps trial order
    else:
        results = [run_trial(*j) for j in jobs]
    return ExperimentReport(config, results)


def run_mse_experiment(config: ExperimentConfig, workers: int | None = None) -> ExperimentReport:
    if config.S > MAX_ORACLE_STATES:
        raise CapacityError(f"S={config.S} exceeds the dense-oracle limit of {MAX_ORACLE_STATES}")
    return run_experiment(replace(config, fixed_policy=True), workers)


def measure_iteration_cost(config: ExperimentConfig, repeats: int = 3,
                           kinds: tuple[str, ...] = ("fixed", "pasa")) -> dict:
    """Best-of-``repeats`` microseconds per iteration for each agent kind.

    One environment is sampled up front; a short run per kind warms up the
    compiled code first. With ``fixed_policy`` every kind follows the same
    sampled policy, which takes policy quality out of the comparison. Returns ``{kind: us, ..., "overhead": pasa/fixed - 1}``,
    or ``{"overhead": None}`` for a zero-length measurement.
    """
    if config.iterations == 0:
        return {k: None for k in kinds} | {"overhead": None}
    rng = trial_streams(config.seed, 0)
    env = sample_environment(config, rng["environment"])
    actions = None
    if config.fixed_policy:
        eps = config.sarsa.epsilon if config.policy_epsilon is None else config.policy_epsilon
        actions = FixedPolicy.sample(env.S, env.A, eps, rng["policy"]).actions
    for kind in kinds:
        cfg = replace(config, agent=kind)
        warm = Agent(agent_config(cfg), env.S, env.A, actions)
        run_episodeless_loop(env, warm, min(config.iterations, 2 * cfg.pasa.nu), *_fresh(config),
                             n_windows=1)
    # repeats interleave the kinds so slow drift in machine load hits all of them alike
    best = dict.fromkeys(kinds, math.inf)
    for _ in range(repeats):
        for kind in kinds:
            agent = Agent(agent_config(replace(config, agent=kind)), env.S, env.A, actions)
            noise, explore = _fresh(config)
            t0 = time.perf_counter()
            run_episodeless_loop(env, agent, config.iterations, noise, explore, n_windows=1)
            best[kind] = min(best[kind], time.perf_counter() - t0)
    out = {kind: best[kind] / config.iterations * 1e6 for kind in kinds}
    if "fixed" in out and "pasa" in out:
        out["overhead"] = out["pasa"] / out["fixed"] - 1
    return out


def _fresh(config):
    rng = trial_streams(config.seed, 0)
    return rng["noise"], rng["agent"]


# output files --------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def emit_results(report: ExperimentReport, out_dir: str | Path, prefix: str | None = None) -> dict[str, Path]:
    """Write results, curve and timing CSVs plus the resolved config.

    Results and curve files are fully determined by the config; wall-clock
    measurements go to the separate timing file.
    """
    out = Path(out_dir)
    prefix = prefix or report.agent
    paths = {"results": out / f"{prefix}_results.csv", "curve": out / f"{prefix}_curve.csv",
             "timing": out / f"{prefix}_timing.csv", "config": out / f"{prefix}_config.yaml"}
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(paths["results"], "w", newline="") as fh:
            fh.write(RESULTS_HEADER + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            for t in report.trials:
                w.writerow([_fmt(v) for v in ("trial", report.agent, t.trial, t.seed, t.final_reward,
                                               None, t.rmse, None, t.nrmse, None,
                                               t.repartitions, t.rho_changes)])
            w.writerow([_fmt(v) for v in (
                "aggregate", report.agent, len(report.trials), report.config.seed,
                report.mean("final_reward"), report.ci("final_reward"),
                _none_nan(report.mean("rmse")), _none_nan(report.ci("rmse")),
                _none_nan(report.mean("nrmse")), _none_nan(report.ci("nrmse")),
                report.mean("repartitions"), report.mean("rho_changes"))])
        curve = report.curve()
        win = report.trials[0].reward_series.size if report.trials else 0
        size = report.config.iterations // win if win else 0
        with open(paths["curve"], "w", newline="") as fh:
            fh.write(RESULTS_HEADER + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for i, (m, lo, hi) in enumerate(curve):
                w.writerow([i, (i + 1) * size, repr(float(m)), repr(float(lo)), repr(float(hi))])
        with open(paths["timing"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("trial", "us_per_iteration"))
            for t in report.trials:
                w.writerow((t.trial, _fmt(t.us_per_iteration)))
        paths["config"].write_text(dump_config(report.config))
    except OSError as exc:
        raise OSError(f"cannot write results under {out}: {exc.strerror or exc}") from exc
    return paths


def _none_nan(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def read_results(path: str | Path) -> tuple[list[dict], dict]:
    """Parse a results CSV back into (trial rows, aggregate row)."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if header != RESULTS_HEADER:
            raise InvalidArgument(f"{path}: unexpected schema header {header!r}")
        rows = list(csv.DictReader(fh))
    def conv(row):
        out = {}
        for k, v in row.items():
            if k in ("row", "agent"):
                out[k] = v
            elif v == "":
                out[k] = None
            elif k in ("trial", "seed", "repartitions", "rho_changes") and row["row"] == "trial":
                out[k] = int(v)
            else:
                out[k] = float(v)
        return out
    parsed = [conv(r) for r in rows]
    return [r for r in parsed if r["row"] == "trial"], next(r for r in parsed if r["row"] == "aggregate")
