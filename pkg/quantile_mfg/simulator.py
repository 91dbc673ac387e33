from __future__ import annotations

import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, TypeVar

import numpy as np
from tqdm import tqdm

from .core_math import ParameterError, ScalarPath, TimeGrid, leave_one_out_quantiles, trapezoid
from .solver import CoupledSolution, ModelParams, feedback_control, offset_sweep, riccati_sweep

log = logging.getLogger(__name__)

DEFAULT_SEED = 20240601
_T = TypeVar("_T")


class GridMismatchError(ValueError):
    pass


class ResourceBudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    n_agents: int
    grid: TimeGrid
    seed: int = DEFAULT_SEED
    n_trials: int = 1
    substeps: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        # The leave-one-out empirical distribution needs at least one other agent.
        if int(self.n_agents) != self.n_agents or int(self.n_agents) < 2:
            raise ParameterError("n_agents", f"need an integer >= 2, got {self.n_agents!r}")
        if int(self.seed) != self.seed or not (0 <= int(self.seed) < 2**64):
            raise ParameterError("seed", f"need an unsigned 64-bit integer, got {self.seed!r}")
        for name in ("n_trials", "substeps", "workers"):
            v = getattr(self, name)
            if int(v) != v or int(v) < 1:
                raise ParameterError(name, f"need an integer >= 1, got {v!r}")
        for name in ("n_agents", "seed", "n_trials", "substeps", "workers"):
            object.__setattr__(self, name, int(getattr(self, name)))


@dataclass(frozen=True, eq=False)
class PopulationRun:
    """One realization of the n-agent game; agent-major arrays (agent, time node)."""

    states: np.ndarray = field(repr=False)
    controls: np.ndarray = field(repr=False)
    pop_mean: ScalarPath = field(repr=False)
    emp_coeff: np.ndarray = field(repr=False)
    costs: np.ndarray = field(repr=False)
    seed: int
    trial: int = 0
    increments: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    substeps: int = 1

    @property
    def grid(self) -> TimeGrid:
        return self.pop_mean.grid

    @property
    def n_agents(self) -> int:
        return int(self.states.shape[0])


@dataclass(frozen=True)
class GapStudyRow:
    n_agents: int
    mean_cost_mfg: float
    mean_cost_best_response: float
    cost_gap: float
    max_mean_deviation: float
    cost_gap_stderr: float = 0.0
    trials: int = 1


@dataclass(frozen=True)
class AgentCostRow:
    agent: int
    cost_best_response: float
    cost_mfg_frozen: float
    cost_mfg_average: float


def check_memory_budget(n_agents: int, n_steps: int, trials: int, budget: int) -> None:
    cells = int(n_agents) * (int(n_steps) + 1) * int(trials)
    if cells > int(budget):
        raise ResourceBudgetError(
            f"n_agents*(n_steps+1)*trials = {cells} state cells exceeds the budget of {int(budget)}"
        )


def agent_noise(seed: int, trial: int, agent: int, size: int) -> np.ndarray:
    """Standard normals for one agent; a pure function of (seed, trial, agent)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(trial), int(agent)))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal(int(size))


def _population_noise(seed: int, trial: int, n_agents: int, size: int) -> np.ndarray:
    out = np.empty((n_agents, size), dtype=float)
    for i in range(n_agents):
        out[i] = agent_noise(seed, trial, i, size)
    return out


def _euler_maruyama(
    x0: np.ndarray,
    increments: np.ndarray,
    pi_values: np.ndarray,
    s_values: np.ndarray,
    grid: TimeGrid,
    substeps: int,
    params: ModelParams,
) -> tuple[np.ndarray, np.ndarray]:
    """
    x <- x + (a x + b u) h + sigma sqrt(h) xi with u = -(b/r)(Pi x + s).
    Gains are nodal arrays (time first) shared by all agents or one column per agent;
    between nodes they are linearly interpolated. Returns agent-major (states, controls).
    """
    n = int(x0.shape[0])
    h = grid.dt / substeps
    noise_scale = params.sigma * math.sqrt(h)
    inc = np.ascontiguousarray(np.asarray(increments, dtype=float).T)
    states = np.empty((grid.n_nodes, n), dtype=float)
    controls = np.empty((grid.n_steps, n), dtype=float)
    nodes = grid.nodes
    x = np.array(x0, dtype=float)
    states[0] = x
    col = 0
    for k in range(grid.n_steps):
        for j in range(substeps):
            if j == 0:
                pi_t = pi_values[k]
                s_t = s_values[k]
            else:
                t = float(nodes[k]) + j * h
                pi_t = grid.sample(pi_values, t)
                s_t = grid.sample(s_values, t)
            u = feedback_control(pi_t, s_t, x, params)
            if j == 0:
                controls[k] = u
            x = x + (params.a * x + params.b * u) * h + noise_scale * inc[col]
            col += 1
        states[k + 1] = x
    return states.T.copy(), controls.T.copy()


def _tracking_costs(
    states: np.ndarray,
    controls: np.ndarray,
    reference: np.ndarray,
    weight: np.ndarray,
    grid: TimeGrid,
    params: ModelParams,
) -> np.ndarray:
    # Trapezoid on the state term; controls are left-constant on each step.
    dev = states - reference
    state_term = trapezoid(weight * dev * dev, grid, axis=-1)
    control_term = params.r * grid.dt * np.sum(controls * controls, axis=-1)
    return np.asarray(state_term + control_term, dtype=float)


def _coefficient(values: np.ndarray, params: ModelParams) -> np.ndarray:
    if params.q == 0.0:
        return np.zeros_like(values)
    with np.errstate(over="ignore"):
        return params.q * (1.0 + np.exp(values))


def simulate_population(
    params: ModelParams,
    solution: CoupledSolution,
    config: SimulationConfig,
    *,
    trial: int = 0,
) -> PopulationRun:
    grid = config.grid
    if grid != solution.grid:
        raise GridMismatchError(
            f"simulation grid (T={grid.t1}, n_steps={grid.n_steps}) differs from the solver grid "
            f"(T={solution.grid.t1}, n_steps={solution.grid.n_steps})"
        )
    n = config.n_agents
    draws = _population_noise(config.seed, trial, n, 1 + grid.n_steps * config.substeps)
    x0 = params.mu0 + math.sqrt(params.V0) * draws[:, 0]
    increments = draws[:, 1:]
    states, controls = _euler_maruyama(
        x0, increments, solution.pi.values, solution.offset.values, grid, config.substeps, params
    )
    pop_mean = ScalarPath(grid, states.mean(axis=0))
    emp_coeff = _coefficient(leave_one_out_quantiles(states, params.alpha), params)
    costs = _tracking_costs(states, controls, pop_mean.values[None, :], emp_coeff, grid, params)
    return PopulationRun(
        states=states,
        controls=controls,
        pop_mean=pop_mean,
        emp_coeff=emp_coeff,
        costs=costs,
        seed=config.seed,
        trial=int(trial),
        increments=increments,
        substeps=config.substeps,
    )


def _check_agent(run: PopulationRun, agent: int) -> int:
    i = int(agent)
    if not (0 <= i < run.n_agents):
        raise IndexError(f"agent index {agent} out of range for {run.n_agents} agents")
    return i


def _frozen_references(run: PopulationRun) -> np.ndarray:
    # Mean over the other n-1 agents.
    n = run.n_agents
    total = run.states.sum(axis=0)
    return (total[None, :] - run.states) / (n - 1)


def realized_costs(run: PopulationRun, params: ModelParams) -> np.ndarray:
    return _tracking_costs(run.states, run.controls, run.pop_mean.values[None, :], run.emp_coeff, run.grid, params)


def realized_cost(run: PopulationRun, agent: int, params: ModelParams) -> float:
    i = _check_agent(run, agent)
    return float(
        _tracking_costs(
            run.states[i], run.controls[i], run.pop_mean.values, run.emp_coeff[i], run.grid, params
        )
    )


def frozen_reference_costs(run: PopulationRun, params: ModelParams) -> np.ndarray:
    return _tracking_costs(run.states, run.controls, _frozen_references(run), run.emp_coeff, run.grid, params)


def frozen_reference_cost(run: PopulationRun, agent: int, params: ModelParams) -> float:
    i = _check_agent(run, agent)
    return float(frozen_reference_costs(run, params)[i])


def _best_response(run: PopulationRun, params: ModelParams, agents: np.ndarray) -> np.ndarray:
    """
    Each selected agent re-solves LQ tracking of z = mean of the others with weight
    q_t(i,n), both frozen from the run, and replays its own noise (common random numbers).
    """
    if run.increments is None:
        raise ValueError("run carries no noise increments; cannot replay a best response")
    grid = run.grid
    z = _frozen_references(run)[agents]
    qhat = run.emp_coeff[agents]
    pi_hat = riccati_sweep(qhat.T, params, grid)
    s_hat = offset_sweep(pi_hat, qhat.T, z.T, params, grid)
    states, controls = _euler_maruyama(
        run.states[agents, 0], run.increments[agents], pi_hat, s_hat, grid, run.substeps, params
    )
    return _tracking_costs(states, controls, z, qhat, grid, params)


def best_response_costs(run: PopulationRun, params: ModelParams) -> np.ndarray:
    return _best_response(run, params, np.arange(run.n_agents))


def best_response_cost(run: PopulationRun, agent: int, params: ModelParams) -> float:
    i = _check_agent(run, agent)
    return float(_best_response(run, params, np.array([i]))[0])


def _map_ordered(fn: Callable[[int], _T], items: Sequence[int], workers: int) -> Iterator[_T]:
    # Results come back in submission order, whatever the worker count.
    if workers <= 1 or len(items) <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        yield from ex.map(fn, items)


def iter_trials(
    params: ModelParams,
    solution: CoupledSolution,
    config: SimulationConfig,
    *,
    progress: bool = False,
) -> Iterator[PopulationRun]:
    trials = list(range(config.n_trials))
    runs = _map_ordered(lambda j: simulate_population(params, solution, config, trial=j), trials, config.workers)
    yield from tqdm(runs, total=len(trials), desc=f"simulate n={config.n_agents}", disable=not progress, file=sys.stderr)


def _trial_gap(params: ModelParams, solution: CoupledSolution, config: SimulationConfig, trial: int) -> tuple[float, float, float]:
    run = simulate_population(params, solution, config, trial=trial)
    mfg = float(np.mean(frozen_reference_costs(run, params)))
    br = float(np.mean(best_response_costs(run, params)))
    dev = run.pop_mean.sup_distance(solution.mean)
    return mfg, br, dev


def gap_study(
    params: ModelParams,
    solution: CoupledSolution,
    n_list: Sequence[int],
    trials: int,
    seed: int,
    *,
    workers: int = 1,
    substeps: int = 1,
    progress: bool = False,
) -> list[GapStudyRow]:
    """
    Per population size: MFG cost against the frozen reference minus the best-response
    cost (agent average, then trial average), and the trial-averaged sup-node
    deviation of the population mean from the limit mean.
    """
    ns = [int(n) for n in n_list]
    if not ns:
        raise ValueError("n_list must be nonempty")
    if any(n < 2 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError(f"n_list must be strictly increasing with every n >= 2, got {list(n_list)!r}")
    if int(trials) < 1:
        raise ValueError(f"trials must be >= 1, got {trials!r}")

    rows: list[GapStudyRow] = []
    for n in ns:
        config = SimulationConfig(
            n_agents=n, grid=solution.grid, seed=seed, n_trials=int(trials), substeps=substeps, workers=workers
        )
        results = list(
            tqdm(
                _map_ordered(lambda j: _trial_gap(params, solution, config, j), list(range(config.n_trials)), workers),
                total=config.n_trials,
                desc=f"gap study n={n}",
                disable=not progress,
                file=sys.stderr,
            )
        )
        arr = np.asarray(results, dtype=float)
        gaps = arr[:, 0] - arr[:, 1]
        stderr = float(np.std(gaps, ddof=1) / math.sqrt(len(gaps))) if len(gaps) > 1 else 0.0
        row = GapStudyRow(
            n_agents=n,
            mean_cost_mfg=float(np.mean(arr[:, 0])),
            mean_cost_best_response=float(np.mean(arr[:, 1])),
            cost_gap=float(np.mean(gaps)),
            max_mean_deviation=float(np.mean(arr[:, 2])),
            cost_gap_stderr=stderr,
            trials=config.n_trials,
        )
        log.info(
            "gap study n=%d cost_gap=%.6g (se %.2g) max_mean_dev=%.6g",
            n,
            row.cost_gap,
            row.cost_gap_stderr,
            row.max_mean_deviation,
        )
        rows.append(row)
    return rows


def agent_cost_profile(
    params: ModelParams,
    solution: CoupledSolution,
    n_agents: int,
    trials: int,
    seed: int,
    *,
    workers: int = 1,
    substeps: int = 1,
    progress: bool = False,
) -> list[AgentCostRow]:
    """
    Per-agent costs: best response and MFG against the frozen reference on the
    first trial (single realizations), and the realized MFG cost averaged over trials.
    """
    config = SimulationConfig(
        n_agents=n_agents, grid=solution.grid, seed=seed, n_trials=trials, substeps=substeps, workers=workers
    )
    total = np.zeros(config.n_agents)
    br = frozen = None
    for run in iter_trials(params, solution, config, progress=progress):
        total += realized_costs(run, params)
        if run.trial == 0:
            br = best_response_costs(run, params)
            frozen = frozen_reference_costs(run, params)
    avg = total / config.n_trials
    assert br is not None and frozen is not None
    return [
        AgentCostRow(agent=i, cost_best_response=float(br[i]), cost_mfg_frozen=float(frozen[i]), cost_mfg_average=float(avg[i]))
        for i in range(config.n_agents)
    ]
