from __future__ import annotations

import math

import numpy as np
import pytest

from quantile_mfg.conditions import (
    best_report,
    check,
    contraction_lhs,
    existence_lhs,
    exp_sqrt_gap_bound,
    exp_sqrt_gap_holds,
    m_grid,
    mu_star,
    search_witness,
)
from quantile_mfg.core_math import probit
from quantile_mfg.solver import ModelParams


def _params(**kw) -> ModelParams:
    base = dict(a=0.0, b=1.0, r=1.0, sigma=1.0, q=0.0, alpha=0.95, mu0=0.0, V0=1.0, T=0.1)
    base.update(kw)
    return ModelParams(**base)


def test_mu_star():
    assert mu_star(_params(mu0=1.0, a=-0.15, T=0.2)) == 1.0
    assert mu_star(_params(mu0=1.0, a=0.5, T=1.0)) == pytest.approx(math.exp(0.5))
    assert mu_star(_params(mu0=-1.0, a=0.5, T=1.0)) == -1.0
    assert mu_star(_params(mu0=-1.0, a=-0.5, T=1.0)) == pytest.approx(-math.exp(-0.5))


def test_zero_penalty_values():
    p = _params()
    assert existence_lhs(p, 1.0) == pytest.approx(0.1, abs=1e-15)
    assert contraction_lhs(p, 1.0) == pytest.approx(0.1, abs=1e-15)
    report = check(p, 1.0)
    assert report.existence_holds and report.contraction_holds and report.both_hold


def test_mean_variance_holds_at_three(mean_variance_params):
    report = check(mean_variance_params, 3.0)
    assert report.existence_lhs <= 3.0
    assert report.contraction_lhs < 1.0
    assert report.existence_holds and report.contraction_holds
    assert report.m_witness == 3.0
    assert report.mu_star == 1.0


def test_mean_variance_witness_on_coarse_grid(mean_variance_params):
    grid = [0.5 * k for k in range(1, 21)]
    witness = search_witness(mean_variance_params, grid)
    assert witness is not None and witness <= 3.0
    assert check(mean_variance_params, witness).both_hold


def test_quantile_vs_constant_has_no_witness(quantile_vs_constant_params):
    grid = m_grid(0.1, 50.0, 0.1)
    assert len(grid) == 500
    assert grid[-1] == pytest.approx(50.0)
    assert all(existence_lhs(quantile_vs_constant_params, m) > m for m in grid)
    assert search_witness(quantile_vs_constant_params, grid) is None
    report, witness = best_report(quantile_vs_constant_params, grid)
    assert witness is None
    assert not report.existence_holds
    assert report.m_witness in grid


def test_long_horizon_breaks_contraction():
    p = _params(T=10.0, a=1.0, q=1.0, V0=1.0, mu0=0.0)
    assert contraction_lhs(p, 1.0) >= 1.0
    assert not check(p, 1.0).contraction_holds


def test_zero_penalty_witness_is_closed_form_root():
    # Existence: T(2|a| m + m^2) <= m  <=>  m <= 1/T - 2|a|; contraction: T(2|a| + m^2) < 1.
    p = _params(a=0.5, T=0.1)
    grid = [0.5 * k for k in range(1, 41)]
    witness = search_witness(p, grid)
    assert witness == 0.5
    p = _params(a=6.0, T=0.1)
    assert search_witness(p, grid) is None


def test_existence_limit_at_zero_radius(mean_variance_params):
    p = mean_variance_params
    z = abs(probit(p.alpha))
    spread = math.sqrt(p.V0 + p.sigma**2 * p.T)
    expected = p.T * p.q * (1.0 + math.exp(mu_star(p) + z * spread * math.exp(p.T * abs(p.a))))
    assert existence_lhs(p, 0.0) == pytest.approx(expected, rel=1e-12)
    assert existence_lhs(p, 1e-9) == pytest.approx(expected, rel=1e-6)


def test_lhs_monotone_in_radius(quantile_vs_constant_params):
    ms = [0.5, 1.0, 2.0, 4.0]
    e = [existence_lhs(quantile_vs_constant_params, m) for m in ms]
    c = [contraction_lhs(quantile_vs_constant_params, m) for m in ms]
    assert e == sorted(e) and c == sorted(c)


def test_huge_radius_overflows_to_inf(quantile_vs_constant_params):
    assert existence_lhs(quantile_vs_constant_params, 1e6) == math.inf
    assert not check(quantile_vs_constant_params, 1e6).existence_holds


def test_bad_inputs(mean_variance_params):
    with pytest.raises(ValueError):
        existence_lhs(mean_variance_params, -1.0)
    with pytest.raises(ValueError):
        search_witness(mean_variance_params, [])
    with pytest.raises(ValueError):
        search_witness(mean_variance_params, [1.0, 0.5])
    with pytest.raises(ValueError):
        m_grid(1.0, 0.5, 0.1)


def test_exp_sqrt_gap_examples():
    assert exp_sqrt_gap_bound(1.0, 1.0, 1.0) == (0.0, 0.0)
    lhs, rhs = exp_sqrt_gap_bound(4.0, 1.0, 1.0)
    assert lhs == pytest.approx(math.e**2 - math.e, abs=1e-6)
    assert rhs == pytest.approx(1.5 * math.e**2, abs=1e-6)
    assert lhs <= rhs
    with pytest.raises(ValueError):
        exp_sqrt_gap_bound(0.0, 1.0, 1.0)


def test_exp_sqrt_gap_property_sweep():
    rng = np.random.default_rng(20240601)
    triples = rng.uniform(0.01, 100.0, size=(1000, 3))
    violations = 0
    for x, y, c in triples:
        if not exp_sqrt_gap_holds(x, y, c):
            violations += 1
        lhs, rhs = exp_sqrt_gap_bound(x, y, c)
        if math.isfinite(rhs) and lhs > rhs * (1.0 + 1e-12):
            violations += 1
    assert violations == 0


def test_condition_sides_increase_with_horizon():
    horizons = [0.05, 0.1, 0.2, 0.4, 0.8]
    base = dict(a=-0.15, b=0.75, r=3.5, sigma=1.0, q=0.45, alpha=0.975, mu0=1.0, V0=0.5)
    for m in (0.5, 3.0):
        existence = [existence_lhs(ModelParams(**base, T=t), m) for t in horizons]
        contraction = [contraction_lhs(ModelParams(**base, T=t), m) for t in horizons]
        assert all(lo < hi for lo, hi in zip(existence, existence[1:]))
        assert all(lo < hi for lo, hi in zip(contraction, contraction[1:]))
