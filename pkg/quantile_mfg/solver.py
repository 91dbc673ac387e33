from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from .core_math import (
    ParameterError,
    ScalarPath,
    TimeGrid,
    clamp_variance,
    integrate_forward,
    probit,
    rk4_sweep,
)

log = logging.getLogger(__name__)

Coupling = Literal["mean_variance", "variance_only", "constant"]
COUPLINGS: tuple[str, ...] = ("mean_variance", "variance_only", "constant")

DEFAULT_N_STEPS = 2000
DEFAULT_PICARD_TOL = 1e-10
DEFAULT_MAX_ITERS = 200

# H = Pi + P solves -H' = 2aH - (b^2/r)H^2 with H(T) = 0, so it must vanish.
IDENTITY_TOL = 1e-8
_MAX_DAMPING = 0.95


class NonConvergenceError(RuntimeError):
    def __init__(self, solution: CoupledSolution):
        super().__init__(
            f"Picard iteration stopped after {solution.iterations} iterations "
            f"with update norm {solution.final_update_norm:.3e}"
        )
        self.solution = solution


class IdentityViolationError(ArithmeticError):
    pass


def _finite(name: str, v: float) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ParameterError(name, f"must be finite, got {v!r}")
    return x


@dataclass(frozen=True)
class ModelParams:
    a: float
    b: float
    r: float
    sigma: float
    q: float
    alpha: float
    mu0: float
    V0: float
    T: float

    def __post_init__(self) -> None:
        for name in ("a", "b", "r", "sigma", "q", "alpha", "mu0", "V0", "T"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        # Standing assumptions of the model: b != 0, r > 0.
        if self.b == 0.0:
            raise ParameterError("b", "input gain must be nonzero (b != 0)")
        if self.r <= 0.0:
            raise ParameterError("r", f"control weight must be positive (r > 0), got {self.r!r}")
        if self.sigma < 0.0:
            raise ParameterError("sigma", f"noise intensity must be >= 0, got {self.sigma!r}")
        if self.q < 0.0:
            raise ParameterError("q", f"base penalty must be >= 0, got {self.q!r}")
        if not (0.0 < self.alpha < 1.0):
            raise ParameterError("alpha", f"quantile level must lie in (0, 1), got {self.alpha!r}")
        if self.V0 < 0.0:
            raise ParameterError("V0", f"initial variance must be >= 0, got {self.V0!r}")
        if self.T <= 0.0:
            raise ParameterError("T", f"horizon must be positive, got {self.T!r}")

    @property
    def gain(self) -> float:
        """b^2 / r."""
        return self.b * self.b / self.r

    def grid(self, n_steps: int = DEFAULT_N_STEPS) -> TimeGrid:
        return TimeGrid(t1=self.T, n_steps=n_steps)


@dataclass(frozen=True)
class SolverConfig:
    grid: TimeGrid
    picard_tol: float = DEFAULT_PICARD_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    damping: float = 0.0
    adaptive_damping: bool = True
    coupling: str = "mean_variance"

    def __post_init__(self) -> None:
        if not (float(self.picard_tol) > 0.0):
            raise ParameterError("picard_tol", f"must be positive, got {self.picard_tol!r}")
        if int(self.max_iters) != self.max_iters or int(self.max_iters) < 1:
            raise ParameterError("max_iters", f"need an integer >= 1, got {self.max_iters!r}")
        if not (0.0 <= float(self.damping) < 1.0):
            raise ParameterError("damping", f"must lie in [0, 1), got {self.damping!r}")
        if self.coupling not in COUPLINGS:
            raise ParameterError("coupling", f"must be one of {', '.join(COUPLINGS)}, got {self.coupling!r}")

    @classmethod
    def for_params(cls, params: ModelParams, n_steps: int = DEFAULT_N_STEPS, **kwargs) -> SolverConfig:
        return cls(grid=params.grid(n_steps), **kwargs)


@dataclass(frozen=True)
class CoupledSolution:
    pi: ScalarPath
    variance: ScalarPath
    q_alpha: ScalarPath
    offset: ScalarPath
    mean: ScalarPath
    iterations: int
    final_update_norm: float
    converged: bool = True
    coupling: str = "mean_variance"
    damping: float = 0.0

    @property
    def grid(self) -> TimeGrid:
        return self.pi.grid


@dataclass(frozen=True)
class SpecialCaseSolution:
    base: CoupledSolution
    p: ScalarPath
    h: ScalarPath

    @property
    def identity_error(self) -> float:
        return float(np.max(np.abs(self.h.values)))


@dataclass(frozen=True)
class AlphaSweepRow:
    alpha: float
    pi0: float
    variance_T: float
    q_alpha0: float
    converged: bool


def _check_grid(params: ModelParams, grid: TimeGrid) -> None:
    if not math.isclose(grid.t1, params.T, rel_tol=0.0, abs_tol=1e-12):
        raise ParameterError("T", f"solver grid ends at {grid.t1!r} but the horizon is T={params.T!r}")


def _same_grid(*paths: ScalarPath) -> TimeGrid:
    grid = paths[0].grid
    for p in paths[1:]:
        if p.grid != grid:
            raise ValueError("paths must share one time grid")
    return grid


def feedback_control(pi_t, s_t, x, params: ModelParams):
    """u* = -(b/r)(Pi_t x + s_t); works elementwise on arrays."""
    return -(params.b / params.r) * (pi_t * x + s_t)


def special_case_control(pi_t, xbar_t, x, params: ModelParams):
    return -(params.b / params.r) * pi_t * (x - xbar_t)


def mean_path(params: ModelParams, grid: TimeGrid) -> ScalarPath:
    return ScalarPath(grid, params.mu0 * np.exp(params.a * grid.nodes))


def q_path(
    mean: ScalarPath,
    variance: ScalarPath,
    params: ModelParams,
    *,
    include_mean: bool = True,
) -> ScalarPath:
    """q_t = q(1 + exp(xbar + sqrt(V) probit(alpha))); the mean term is dropped when include_mean=False."""
    grid = _same_grid(mean, variance)
    if params.q == 0.0:
        return ScalarPath.constant(grid, 0.0)
    sd = np.sqrt(clamp_variance(variance.values))
    expo = sd * probit(params.alpha)
    if include_mean:
        expo = expo + mean.values
    with np.errstate(over="ignore"):
        vals = params.q * (1.0 + np.exp(expo))
    return ScalarPath(grid, vals)


def riccati_sweep(q_values: np.ndarray, params: ModelParams, grid: TimeGrid) -> np.ndarray:
    """-Pi' = 2a Pi - (b^2/r) Pi^2 + q, Pi(T) = 0, for one or several coefficient columns."""
    a2 = 2.0 * params.a
    k = params.gain
    qv = np.asarray(q_values, dtype=float)

    def rhs(t, p, qa):
        return a2 * p - k * p * p + qa

    return rk4_sweep(rhs, np.zeros(qv.shape[1:]), grid, backward=True, coefficients=(qv,))


def offset_sweep(
    pi_values: np.ndarray,
    q_values: np.ndarray,
    reference: np.ndarray,
    params: ModelParams,
    grid: TimeGrid,
) -> np.ndarray:
    """-s' = (a - (b^2/r) Pi) s - q z, s(T) = 0, tracking the reference z."""
    a = params.a
    k = params.gain
    pv = np.asarray(pi_values, dtype=float)
    qv = np.asarray(q_values, dtype=float)
    zv = np.asarray(reference, dtype=float)

    def rhs(t, s, pi_t, q_t, z_t):
        return (a - k * pi_t) * s - q_t * z_t

    shape = np.broadcast(pv[0], qv[0], zv[0]).shape
    return rk4_sweep(rhs, np.zeros(shape), grid, backward=True, coefficients=(pv, qv, zv))


def riccati_backward(q_alpha: ScalarPath, params: ModelParams) -> ScalarPath:
    if float(np.min(q_alpha.values)) < 0.0:
        raise ValueError("Riccati source q_alpha must be nonnegative")
    return ScalarPath(q_alpha.grid, riccati_sweep(q_alpha.values, params, q_alpha.grid))


def variance_forward(pi: ScalarPath, params: ModelParams) -> ScalarPath:
    grid = pi.grid
    a = params.a
    k = params.gain
    s2 = params.sigma * params.sigma
    pv = pi.values

    def rhs(t, v, pi_t):
        return 2.0 * (a - k * pi_t) * v + s2

    return integrate_forward(rhs, params.V0, grid, coefficients=(pv,))


def offset_backward(pi: ScalarPath, q_alpha: ScalarPath, mean: ScalarPath, params: ModelParams) -> ScalarPath:
    grid = _same_grid(pi, q_alpha, mean)
    return ScalarPath(grid, offset_sweep(pi.values, q_alpha.values, mean.values, params, grid))


def picard_sweep(
    pi: ScalarPath,
    params: ModelParams,
    *,
    include_mean: bool = True,
) -> tuple[ScalarPath, ScalarPath, ScalarPath]:
    """One application of the fixed-point operator: Pi -> V -> q_alpha -> Pi_new."""
    variance = variance_forward(pi, params)
    q_alpha = q_path(mean_path(params, pi.grid), variance, params, include_mean=include_mean)
    return variance, q_alpha, riccati_backward(q_alpha, params)


@dataclass(frozen=True)
class _PicardState:
    pi: ScalarPath
    variance: ScalarPath
    q_alpha: ScalarPath
    iterations: int
    update_norm: float
    converged: bool
    damping: float


def _picard(params: ModelParams, config: SolverConfig, *, include_mean: bool) -> _PicardState:
    _check_grid(params, config.grid)
    grid = config.grid
    mean = mean_path(params, grid)
    pi = ScalarPath.constant(grid, 0.0)
    damping = float(config.damping)
    prev_norm = math.inf
    norm = math.inf
    it = 0
    variance = q_alpha = pi_new = pi
    converged = False
    for it in range(1, int(config.max_iters) + 1):
        variance = variance_forward(pi, params)
        q_alpha = q_path(mean, variance, params, include_mean=include_mean)
        pi_new = riccati_backward(q_alpha, params)
        norm = pi_new.sup_distance(pi)
        log.debug("picard iter=%d update_norm=%.3e damping=%.3f", it, norm, damping)
        if norm <= config.picard_tol:
            converged = True
            break
        if config.adaptive_damping and norm > prev_norm and damping < _MAX_DAMPING:
            damping = min(_MAX_DAMPING, 0.5 * (1.0 + damping))
            log.warning("picard update grew (%.3e > %.3e); damping raised to %.3f", norm, prev_norm, damping)
        prev_norm = norm
        pi = ScalarPath(grid, damping * pi.values + (1.0 - damping) * pi_new.values)

    if converged:
        log.info("picard converged iters=%d update_norm=%.3e", it, norm)
    else:
        log.warning("picard did not converge: iters=%d update_norm=%.3e tol=%.1e", it, norm, config.picard_tol)
    # Keep the last fresh iterate: Pi_new solves the Riccati equation for the stored q_alpha exactly.
    return _PicardState(
        pi=pi_new,
        variance=variance,
        q_alpha=q_alpha,
        iterations=it,
        update_norm=float(norm),
        converged=converged,
        damping=damping,
    )


def _finish(
    state: _PicardState,
    params: ModelParams,
    coupling: str,
    strict: bool,
) -> CoupledSolution:
    mean = mean_path(params, state.pi.grid)
    offset = offset_backward(state.pi, state.q_alpha, mean, params)
    sol = CoupledSolution(
        pi=state.pi,
        variance=state.variance,
        q_alpha=state.q_alpha,
        offset=offset,
        mean=mean,
        iterations=state.iterations,
        final_update_norm=state.update_norm,
        converged=state.converged,
        coupling=coupling,
        damping=state.damping,
    )
    if strict and not sol.converged:
        raise NonConvergenceError(sol)
    return sol


def solve_fixed_point(params: ModelParams, config: SolverConfig, *, strict: bool = False) -> CoupledSolution:
    """
    Equilibrium of the mean-variance coupled system by Picard iteration on Pi,
    starting from Pi = 0. Non-convergence returns the last iterate flagged
    `converged=False` unless `strict`, which raises NonConvergenceError.
    """
    state = _picard(params, config, include_mean=True)
    return _finish(state, params, "mean_variance", strict)


def solve_constant_coefficient(
    params: ModelParams,
    config: SolverConfig,
    *,
    include_mean: bool = True,
) -> CoupledSolution:
    """Comparison case: q_alpha frozen at its V = 0 value, so no fixed point is needed."""
    _check_grid(params, config.grid)
    grid = config.grid
    mean = mean_path(params, grid)
    q_alpha = q_path(mean, ScalarPath.constant(grid, 0.0), params, include_mean=include_mean)
    pi = riccati_backward(q_alpha, params)
    state = _PicardState(
        pi=pi,
        variance=variance_forward(pi, params),
        q_alpha=q_alpha,
        iterations=1,
        update_norm=0.0,
        converged=True,
        damping=0.0,
    )
    return _finish(state, params, "constant", strict=False)


def _joint_riccati_sweep(q_values: np.ndarray, params: ModelParams, grid: TimeGrid) -> np.ndarray:
    # Pi and P share RK4 stages so the stage identity P = -Pi carries through each step.
    a = params.a
    a2 = 2.0 * a
    k = params.gain

    def rhs(t, y, qa):
        pi_t = y[0]
        p_t = y[1]
        return np.array([a2 * pi_t - k * pi_t * pi_t + qa, 2.0 * (a - k * pi_t) * p_t - k * p_t * p_t - qa])

    return rk4_sweep(rhs, np.zeros(2), grid, backward=True, coefficients=(q_values,))


def solve_special_case(params: ModelParams, config: SolverConfig, *, strict: bool = False) -> SpecialCaseSolution:
    """
    Variance-only coefficient q(1 + exp(sqrt(V) probit(alpha))). After the fixed point,
    the decoupling gain P (-P' = 2(a - (b^2/r)Pi)P - (b^2/r)P^2 - q, P(T) = 0) is
    swept backward together with Pi; H = Pi + P must vanish identically.
    """
    state = _picard(params, config, include_mean=False)
    grid = config.grid
    joint = _joint_riccati_sweep(state.q_alpha.values, params, grid)
    pi = ScalarPath(grid, joint[:, 0])
    p = ScalarPath(grid, joint[:, 1])
    base = _finish(replace(state, pi=pi), params, "variance_only", strict)
    h = ScalarPath(grid, pi.values + p.values)
    out = SpecialCaseSolution(base=base, p=p, h=h)
    err = out.identity_error
    if err > IDENTITY_TOL:
        raise IdentityViolationError(f"max |Pi + P| = {err:.3e} exceeds {IDENTITY_TOL:.0e}")
    return out


def solve(params: ModelParams, config: SolverConfig, *, strict: bool = False) -> CoupledSolution | SpecialCaseSolution:
    if config.coupling == "variance_only":
        return solve_special_case(params, config, strict=strict)
    if config.coupling == "constant":
        return solve_constant_coefficient(params, config)
    return solve_fixed_point(params, config, strict=strict)


def mean_ode_consistency(solution: CoupledSolution, params: ModelParams) -> float:
    """Sup deviation between xbar' = (a - (b^2/r)Pi) xbar - (b^2/r) s and the closed form e^{at} mu0."""
    grid = solution.grid
    a = params.a
    k = params.gain
    pv = solution.pi.values
    sv = solution.offset.values

    def rhs(t, x, pi_t, s_t):
        return (a - k * pi_t) * x - k * s_t

    xbar = integrate_forward(rhs, params.mu0, grid, coefficients=(pv, sv))
    return xbar.sup_distance(solution.mean)


def _central_diff(path: ScalarPath) -> np.ndarray:
    # Five-point stencil at nodes 2..n-2, O(dt^4) truncation.
    v = path.values
    return (v[:-4] - 8.0 * v[1:-3] + 8.0 * v[3:-1] - v[4:]) / (12.0 * path.grid.dt)


def ode_residuals(
    solution: CoupledSolution | SpecialCaseSolution,
    params: ModelParams,
) -> dict[str, float]:
    """Sup-norm residuals of each returned path against its ODE, by central differences at interior nodes 2..n-2."""
    special = solution if isinstance(solution, SpecialCaseSolution) else None
    sol = special.base if special is not None else solution
    a = params.a
    k = params.gain
    inner = slice(2, -2)
    pi = sol.pi.values[inner]
    v = sol.variance.values[inner]
    q = sol.q_alpha.values[inner]
    s = sol.offset.values[inner]
    xbar = sol.mean.values[inner]
    out = {
        "pi": float(np.max(np.abs(_central_diff(sol.pi) + (2.0 * a * pi - k * pi * pi + q)))),
        "variance": float(
            np.max(np.abs(_central_diff(sol.variance) - (2.0 * (a - k * pi) * v + params.sigma**2)))
        ),
        "offset": float(np.max(np.abs(_central_diff(sol.offset) + ((a - k * pi) * s - q * xbar)))),
    }
    if special is not None:
        p = special.p.values[inner]
        out["p"] = float(np.max(np.abs(_central_diff(special.p) + (2.0 * (a - k * pi) * p - k * p * p - q))))
    return out


def sweep_alpha(
    params: ModelParams,
    config: SolverConfig,
    alphas: Sequence[float],
) -> list[AlphaSweepRow]:
    rows: list[AlphaSweepRow] = []
    for alpha in alphas:
        p = replace(params, alpha=float(alpha))
        sol = solve_fixed_point(p, config)
        rows.append(
            AlphaSweepRow(
                alpha=p.alpha,
                pi0=sol.pi.initial,
                variance_T=sol.variance.terminal,
                q_alpha0=sol.q_alpha.initial,
                converged=sol.converged,
            )
        )
    return rows
