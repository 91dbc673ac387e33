"""
Sufficient conditions for existence (ball radius M) and uniqueness (contraction)
of the fixed point of the Pi-operator, plus the exp-sqrt gap bound used to
derive the contraction constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core_math import probit
from .solver import ModelParams


@dataclass(frozen=True)
class ConditionReport:
    mu_star: float
    m_witness: float
    existence_lhs: float
    existence_holds: bool
    contraction_lhs: float
    contraction_holds: bool

    @property
    def both_hold(self) -> bool:
        return self.existence_holds and self.contraction_holds


def _exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def mu_star(params: ModelParams) -> float:
    # max{mu0, e^{aT} mu0}, also for negative mu0.
    return max(params.mu0, _exp(params.a * params.T) * params.mu0)


def _check_m(m: float) -> float:
    m = float(m)
    if not (m >= 0.0) or math.isinf(m):
        raise ValueError(f"ball radius M must be a finite nonnegative number, got {m!r}")
    return m


def _growth(params: ModelParams, m: float) -> float:
    # T(|a| + (b^2/r) M)
    return params.T * (abs(params.a) + params.gain * m)


def existence_lhs(params: ModelParams, m: float) -> float:
    m = _check_m(m)
    T = params.T
    k = params.gain
    z = abs(probit(params.alpha))
    spread = math.sqrt(params.V0 + params.sigma**2 * T)
    total = 2.0 * abs(params.a) * m + k * m * m + params.q
    if params.q > 0.0:
        inner = z * spread * _exp(_growth(params, m)) if z * spread > 0.0 else 0.0
        total += params.q * _exp(mu_star(params) + inner)
    return T * total


def contraction_lhs(params: ModelParams, m: float) -> float:
    m = _check_m(m)
    T = params.T
    k = params.gain
    z = abs(probit(params.alpha))
    spread = math.sqrt(params.V0 + params.sigma**2 * T)
    g = _growth(params, m)
    total = 2.0 * abs(params.a) + k * m * m
    if params.q > 0.0 and z > 0.0 and spread > 0.0:
        expo = mu_star(params) + 3.0 * g + z * spread * _exp(g)
        total += params.q * z * k * T * spread * _exp(expo)
    return T * total


def check(params: ModelParams, m: float) -> ConditionReport:
    e = existence_lhs(params, m)
    c = contraction_lhs(params, m)
    return ConditionReport(
        mu_star=mu_star(params),
        m_witness=float(m),
        existence_lhs=e,
        existence_holds=bool(e <= m),
        contraction_lhs=c,
        contraction_holds=bool(c < 1.0),
    )


def search_witness(params: ModelParams, m_grid: Sequence[float]) -> float | None:
    """Smallest grid value M satisfying both inequalities, or None."""
    grid = [float(x) for x in m_grid]
    if not grid:
        raise ValueError("m_grid must be nonempty")
    if any(not (x > 0.0) for x in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("m_grid must be positive and strictly increasing")
    for m in grid:
        if check(params, m).both_hold:
            return m
    return None


def m_grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic grid start, start+step, ..., <= stop (indices, not accumulated sums)."""
    if not (start > 0.0 and step > 0.0 and stop >= start):
        raise ValueError(f"bad grid spec start={start!r} stop={stop!r} step={step!r}")
    n = int(math.floor((stop - start) / step + 1e-9))
    return [start + i * step for i in range(n + 1)]


def best_report(params: ModelParams, grid: Sequence[float]) -> tuple[ConditionReport, float | None]:
    """
    Report at the witness when one exists; otherwise at the grid value with the
    smallest existence slack (existence_lhs - M).
    """
    witness = search_witness(params, grid)
    if witness is not None:
        return check(params, witness), witness
    reports = [check(params, m) for m in grid]
    return min(reports, key=lambda r: r.existence_lhs - r.m_witness), None


def _check_positive(**kw: float) -> None:
    for name, v in kw.items():
        if not (float(v) > 0.0) or math.isinf(float(v)):
            raise ValueError(f"{name} must be a finite positive number, got {v!r}")


def exp_sqrt_gap_bound(x: float, y: float, c: float) -> tuple[float, float]:
    """
    lhs = |e^{c sqrt x} - e^{c sqrt y}|,
    rhs = e^{max(c sqrt x, c sqrt y)} / (2 min(c sqrt x, c sqrt y)) * c^2 |x - y|.
    Either side overflows to inf for large arguments; see exp_sqrt_gap_holds.
    """
    _check_positive(x=x, y=y, c=c)
    u = c * math.sqrt(x)
    v = c * math.sqrt(y)
    hi, lo = max(u, v), min(u, v)
    big = _exp(hi)
    lhs = 0.0 if hi == lo else big * -math.expm1(lo - hi)
    rhs = 0.0 if x == y else big / (2.0 * lo) * c * c * abs(x - y)
    return lhs, rhs


def exp_sqrt_gap_holds(x: float, y: float, c: float, rel_tol: float = 1e-12) -> bool:
    """lhs <= rhs evaluated in log space, so it holds up for e^{c sqrt x} beyond double range."""
    _check_positive(x=x, y=y, c=c)
    if x == y:
        return True
    u = c * math.sqrt(x)
    v = c * math.sqrt(y)
    hi, lo = max(u, v), min(u, v)
    log_lhs = hi + math.log(-math.expm1(lo - hi))
    log_rhs = hi - math.log(2.0 * lo) + 2.0 * math.log(c) + math.log(abs(x - y))
    return log_lhs <= log_rhs + rel_tol * max(1.0, abs(log_rhs))
