from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Variance nodes in [-_NEG_VARIANCE_TOL, 0) are roundoff and get clamped to 0.
_NEG_VARIANCE_TOL = 1e-12

# rhs(t, y, *coefficient_values)
Field = Callable[..., Any]


class ParameterError(ValueError):
    """Invalid constructor argument; `field` names the offending attribute."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class FiniteEscapeError(OverflowError):
    pass


@dataclass(frozen=True)
class QuantileLevel:
    alpha: float

    def __post_init__(self) -> None:
        a = float(self.alpha)
        if not (0.0 < a < 1.0):
            raise ParameterError("alpha", f"quantile level must lie in (0, 1), got {self.alpha!r}")
        object.__setattr__(self, "alpha", a)

    def __float__(self) -> float:
        return self.alpha


def _as_alpha(alpha: float | QuantileLevel) -> float:
    if isinstance(alpha, QuantileLevel):
        return alpha.alpha
    return QuantileLevel(alpha).alpha


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt on [t0, t1], k = 0..n_steps."""

    t1: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self) -> None:
        if float(self.t0) != 0.0:
            raise ParameterError("t0", f"grids start at 0, got {self.t0!r}")
        if not (math.isfinite(float(self.t1)) and float(self.t1) > 0.0):
            raise ParameterError("T", f"horizon must be positive and finite, got {self.t1!r}")
        if int(self.n_steps) != self.n_steps or int(self.n_steps) < 2:
            raise ParameterError("n_steps", f"need an integer >= 2, got {self.n_steps!r}")
        object.__setattr__(self, "t0", 0.0)
        object.__setattr__(self, "t1", float(self.t1))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        # linspace pins both endpoints exactly.
        out = np.linspace(self.t0, self.t1, self.n_nodes)
        out.setflags(write=False)
        return out

    def refine(self, factor: int) -> TimeGrid:
        return TimeGrid(t1=self.t1, n_steps=self.n_steps * int(factor))

    def sample(self, values: np.ndarray, t: float) -> Any:
        """
        Linear interpolation of nodal `values` (time along axis 0) at time t.
        Exact at nodes; used for the half-step stages of the RK4 sweeps.
        """
        pos = (t - self.t0) / self.dt
        if pos <= 0.0:
            return values[0]
        if pos >= self.n_steps:
            return values[self.n_steps]
        k = int(pos)
        frac = pos - k
        if frac < 1e-9:
            return values[k]
        if frac > 1.0 - 1e-9:
            return values[k + 1]
        return values[k] + frac * (values[k + 1] - values[k])

    def stage_values(self, values: np.ndarray) -> np.ndarray:
        """Nodal `values` on the half-step lattice: node k at 2k, midpoint average at 2k+1."""
        v = np.asarray(values, dtype=float)
        if v.shape[0] != self.n_nodes:
            raise ValueError(f"expected {self.n_nodes} nodes along axis 0, got {v.shape[0]}")
        out = np.empty((2 * self.n_steps + 1,) + v.shape[1:], dtype=float)
        out[0::2] = v
        out[1::2] = 0.5 * (v[:-1] + v[1:])
        return out


@dataclass(frozen=True, eq=False)
class ScalarPath:
    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.grid.n_nodes,):
            raise ValueError(f"path has shape {vals.shape}, grid needs ({self.grid.n_nodes},)")
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise FiniteEscapeError(f"non-finite path value at node {bad} (t={self.grid.nodes[bad]:.6g})")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> ScalarPath:
        return cls(grid, np.full(grid.n_nodes, float(value)))

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def initial(self) -> float:
        return float(self.values[0])

    @property
    def terminal(self) -> float:
        return float(self.values[-1])

    def sup_distance(self, other: ScalarPath) -> float:
        if other.grid != self.grid:
            raise ValueError("paths live on different grids")
        return float(np.max(np.abs(self.values - other.values)))


def std_normal_cdf(x: float) -> float:
    z = x / _SQRT2
    # erfc keeps full relative precision in the tails.
    if abs(z) < 1.0 / _SQRT2:
        return 0.5 + 0.5 * math.erf(z)
    y = 0.5 * math.erfc(abs(z))
    return 1.0 - y if z > 0 else y


def _std_normal_lower_tail(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def _acklam_lower(p: float) -> float:
    # Rational starting guess (relative error ~1e-9) for p <= 0.5.
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        return (
            ((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q - 2.400758277161838e00) * q
              - 2.549732539343734e00) * q + 4.374664141464968e00) * q + 2.938163982698783e00
        ) / ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q + 2.445134137142996e00) * q
              + 3.754408661907416e00) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (
        (((((-3.969683028665376e01 * r + 2.209460984245205e02) * r - 2.759285104469687e02) * r
           + 1.383577518672690e02) * r - 3.066479806614716e01) * r + 2.506628277459239e00) * q
    ) / (((((-5.447609879822406e01 * r + 1.615858368580409e02) * r - 1.556989798598866e02) * r
           + 6.680131188771972e01) * r - 1.328068155288572e01) * r + 1.0)


def _probit_lower(p: float) -> float:
    """Inverse of the lower tail for p in (0, 0.5]: Newton steps inside a bisection bracket."""
    if p == 0.5:
        return 0.0
    lo, hi = -40.0, 0.0
    x = _acklam_lower(p)
    for _ in range(100):
        f = _std_normal_lower_tail(x) - p
        if f > 0.0:
            hi = x
        else:
            lo = x
        dens = _INV_SQRT_2PI * math.exp(-0.5 * x * x)
        step = f / dens if dens > 0.0 else math.inf
        nxt = x - step
        if abs(nxt - x) <= 1e-15 * max(1.0, abs(x)):
            return nxt
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        x = nxt
    return x


def probit(alpha: float | QuantileLevel) -> float:
    a = _as_alpha(alpha)
    if a <= 0.5:
        return _probit_lower(a)
    # 1 - a is exact for a in [0.5, 1), which keeps probit(1-a) == -probit(a).
    return -_probit_lower(1.0 - a)


def gaussian_quantile(mu: float, sigma: float, alpha: float | QuantileLevel) -> float:
    if sigma < 0.0:
        raise ParameterError("sigma", f"standard deviation must be >= 0, got {sigma!r}")
    z = probit(alpha)
    if sigma == 0.0:
        return float(mu)
    return float(mu) + float(sigma) * z


def _order_rank(alpha: float, m: int) -> int:
    # inf{z : #{x_j <= z} >= alpha*m} is the k-th order statistic, k = ceil(alpha*m).
    # Fraction(alpha) is the exact value of the double, so the ceiling is exact.
    k = math.ceil(Fraction(alpha) * m)
    return min(max(k, 1), m)


def empirical_quantile(samples: Sequence[float] | np.ndarray, alpha: float | QuantileLevel) -> float:
    a = _as_alpha(alpha)
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empirical quantile of an empty sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    k = _order_rank(a, int(x.size))
    return float(np.partition(x, k - 1)[k - 1])


def leave_one_out_quantiles(values: np.ndarray, alpha: float | QuantileLevel) -> np.ndarray:
    """
    For each row i of `values` (agents along axis 0), the empirical alpha-quantile
    of the other rows, column by column. Same convention as `empirical_quantile`.
    """
    a = _as_alpha(alpha)
    x = np.asarray(values, dtype=float)
    m = int(x.shape[0])
    if m < 2:
        raise ValueError("leave-one-out quantile needs at least 2 samples")
    k = _order_rank(a, m - 1)
    order = np.argsort(x, axis=0, kind="stable")
    ranks = np.empty_like(order)
    seq = np.arange(m).reshape((m,) + (1,) * (x.ndim - 1))
    np.put_along_axis(ranks, order, np.broadcast_to(seq, order.shape), axis=0)
    ordered = np.take_along_axis(x, order, axis=0)
    # Removing an agent ranked among the first k shifts the k-th statistic up by one slot.
    return np.where(ranks <= k - 1, ordered[k], ordered[k - 1])


def trapezoid(values: np.ndarray, grid: TimeGrid, axis: int = -1) -> np.ndarray | float:
    v = np.asarray(values, dtype=float)
    if v.shape[axis] != grid.n_nodes:
        raise ValueError(f"expected {grid.n_nodes} nodes along axis {axis}, got {v.shape[axis]}")
    first = np.take(v, 0, axis=axis)
    last = np.take(v, -1, axis=axis)
    out = grid.dt * (np.sum(v, axis=axis) - 0.5 * (first + last))
    return float(out) if np.ndim(out) == 0 else out


def rk4_sweep(
    rhs: Field,
    start: Any,
    grid: TimeGrid,
    *,
    backward: bool = False,
    coefficients: Sequence[np.ndarray] = (),
) -> np.ndarray:
    """
    Classical RK4 on the nodes of `grid`.

    Forward:  y' = rhs(t, y, *c), y(t0) = start.
    Backward: -y' = rhs(t, y, *c), y(t1) = start, marching t1 -> t0.

    `coefficients` are nodal arrays (time along axis 0); each stage receives their
    values at the stage time, linearly interpolated at midpoints. `start` may be an
    array; each component is then an independent scalar equation and `rhs` must act
    elementwise. Returns values with time along axis 0.
    """
    y = np.asarray(start, dtype=float)
    out = np.empty((grid.n_nodes,) + y.shape, dtype=float)
    scalar = y.ndim == 0
    if scalar:
        y = float(y)
    staged = [grid.stage_values(c) for c in coefficients]
    # One tuple per half-step position: index 2k is node k, 2k+1 the midpoint after it.
    columns = [s.tolist() if s.ndim == 1 else list(s) for s in staged]
    stages = list(zip(*columns)) if columns else [()] * (2 * grid.n_steps + 1)
    nodes = grid.nodes.tolist()
    h = grid.dt
    half = 0.5 * h
    if backward:
        out[-1] = y
        steps = range(grid.n_steps, 0, -1)
        sgn = -1
    else:
        out[0] = y
        steps = range(0, grid.n_steps)
        sgn = 1
    with np.errstate(over="ignore", invalid="ignore"):
        for k in steps:
            t = nodes[k]
            tn = nodes[k + sgn]
            tm = t + sgn * half
            c1 = stages[2 * k]
            cm = stages[2 * k + sgn]
            cn = stages[2 * (k + sgn)]
            try:
                k1 = rhs(t, y, *c1)
                k2 = rhs(tm, y + half * k1, *cm)
                k3 = rhs(tm, y + half * k2, *cm)
                k4 = rhs(tn, y + h * k3, *cn)
            except OverflowError as e:
                raise FiniteEscapeError(f"overflow while stepping from t={t:.6g}: {e}") from e
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not (math.isfinite(y) if scalar else np.all(np.isfinite(y))):
                raise FiniteEscapeError(f"finite escape: non-finite state stepping from t={t:.6g} to t={tn:.6g}")
            out[k + sgn] = y
    return out


def integrate_backward(
    rhs: Field, terminal: float, grid: TimeGrid, *, coefficients: Sequence[np.ndarray] = ()
) -> ScalarPath:
    return ScalarPath(grid, rk4_sweep(rhs, float(terminal), grid, backward=True, coefficients=coefficients))


def integrate_forward(
    rhs: Field, initial: float, grid: TimeGrid, *, coefficients: Sequence[np.ndarray] = ()
) -> ScalarPath:
    return ScalarPath(grid, rk4_sweep(rhs, float(initial), grid, backward=False, coefficients=coefficients))


def clamp_variance(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    low = float(np.min(v)) if v.size else 0.0
    if low < -_NEG_VARIANCE_TOL:
        raise ValueError(f"negative variance {low:.3e} below roundoff tolerance")
    return np.maximum(v, 0.0)
