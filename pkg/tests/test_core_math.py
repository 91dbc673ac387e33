from __future__ import annotations

import math

import numpy as np
import pytest

from quantile_mfg.core_math import (
    FiniteEscapeError,
    ParameterError,
    QuantileLevel,
    ScalarPath,
    TimeGrid,
    clamp_variance,
    empirical_quantile,
    gaussian_quantile,
    integrate_backward,
    integrate_forward,
    leave_one_out_quantiles,
    probit,
    rk4_sweep,
    std_normal_cdf,
    trapezoid,
)


def test_probit_reference_values():
    assert probit(0.5) == 0.0
    assert probit(0.975) == pytest.approx(1.959964, abs=1e-5)
    assert probit(0.841344746) == pytest.approx(1.0, abs=1e-6)
    assert probit(QuantileLevel(0.95)) == pytest.approx(1.644854, abs=1e-5)


@pytest.mark.parametrize("alpha", [0.51, 0.75, 0.9, 0.975, 0.999, 1.0 - 1e-9])
def test_probit_odd_symmetry(alpha):
    assert probit(1.0 - alpha) == -probit(alpha)


@pytest.mark.parametrize("alpha", [1e-12, 1e-6, 0.01, 0.2, 0.5, 0.8, 0.99, 0.999999])
def test_probit_inverts_cdf(alpha):
    x = probit(alpha)
    assert std_normal_cdf(x) == pytest.approx(alpha, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_probit_domain(alpha):
    with pytest.raises(ParameterError) as ei:
        probit(alpha)
    assert ei.value.field == "alpha"


def test_std_normal_cdf_against_erf():
    for x in (-3.0, -0.3, 0.0, 0.2, 1.0, 4.0):
        assert std_normal_cdf(x) == pytest.approx(0.5 * (1.0 + math.erf(x / math.sqrt(2.0))), abs=1e-15)


def test_gaussian_quantile():
    assert gaussian_quantile(0.0, 1.0, 0.5) == 0.0
    assert gaussian_quantile(2.0, 0.0, 0.99) == 2.0
    assert gaussian_quantile(1.0, 2.0, 0.975) == pytest.approx(4.919928, abs=1e-4)
    with pytest.raises(ParameterError):
        gaussian_quantile(0.0, -1.0, 0.5)


def test_empirical_quantile_examples():
    assert empirical_quantile([1, 2, 3, 4], 0.5) == 2
    assert empirical_quantile([7], 0.3) == 7
    assert empirical_quantile([3, 1, 4, 1, 5, 9, 2, 6], 0.95) == 9
    assert empirical_quantile([3, 1, 4, 1, 5, 9, 2, 6], 0.25) == 1


def test_empirical_quantile_is_inf_definition():
    rng = np.random.default_rng(7)
    x = rng.integers(0, 6, size=23).astype(float)
    for alpha in (0.05, 0.3, 0.5, 0.77, 0.95):
        z = empirical_quantile(x, alpha)
        # F(z) >= alpha and no smaller sample value qualifies.
        assert np.mean(x <= z) >= alpha - 1e-12
        smaller = x[x < z]
        assert all(np.mean(x <= s) < alpha for s in smaller)


def test_empirical_quantile_rejects_empty_and_nan():
    with pytest.raises(ValueError):
        empirical_quantile([], 0.5)
    with pytest.raises(ValueError):
        empirical_quantile([1.0, float("nan")], 0.5)


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9, 0.975])
def test_leave_one_out_matches_brute_force(alpha):
    rng = np.random.default_rng(11)
    # Integer-valued samples exercise ties.
    x = rng.integers(-3, 4, size=(9, 5)).astype(float)
    got = leave_one_out_quantiles(x, alpha)
    for i in range(x.shape[0]):
        others = np.delete(x, i, axis=0)
        for k in range(x.shape[1]):
            assert got[i, k] == empirical_quantile(others[:, k], alpha)


def test_leave_one_out_two_samples():
    x = np.array([[1.0, 5.0], [2.0, -1.0]])
    assert np.array_equal(leave_one_out_quantiles(x, 0.3), x[::-1])
    with pytest.raises(ValueError):
        leave_one_out_quantiles(x[:1], 0.5)


def test_time_grid_nodes_and_validation():
    g = TimeGrid(t1=0.2, n_steps=2000)
    assert g.n_nodes == 2001
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 0.2
    assert g.dt == pytest.approx(1e-4)
    assert g.refine(2).n_steps == 4000
    with pytest.raises(ParameterError):
        TimeGrid(t1=1.0, n_steps=1)
    with pytest.raises(ParameterError):
        TimeGrid(t1=0.0, n_steps=10)


def test_time_grid_sample_is_exact_at_nodes_and_linear_between():
    g = TimeGrid(t1=1.0, n_steps=4)
    v = np.array([0.0, 1.0, 4.0, 9.0, 16.0])
    assert g.sample(v, 0.5) == 4.0
    assert g.sample(v, 0.375) == pytest.approx(2.5)
    assert g.sample(v, 1.0) == 16.0


def test_scalar_path_rejects_bad_values():
    g = TimeGrid(t1=1.0, n_steps=4)
    with pytest.raises(ValueError):
        ScalarPath(g, np.zeros(4))
    with pytest.raises(FiniteEscapeError):
        ScalarPath(g, np.array([0.0, 1.0, np.inf, 0.0, 0.0]))
    p = ScalarPath.constant(g, 3.0)
    assert p.initial == p.terminal == 3.0 and len(p) == 5
    with pytest.raises(ValueError):
        p.values[0] = 1.0


def test_trapezoid_constants_and_linear():
    g = TimeGrid(t1=0.7, n_steps=13)
    assert trapezoid(np.full(g.n_nodes, 2.5), g) == pytest.approx(2.5 * 0.7, abs=1e-12)
    assert trapezoid(g.nodes, g) == pytest.approx(0.5 * 0.7**2, abs=1e-12)
    batch = np.vstack([np.ones(g.n_nodes), np.zeros(g.n_nodes)])
    assert np.allclose(trapezoid(batch, g, axis=-1), [0.7, 0.0])


def test_backward_sweep_examples():
    g = TimeGrid(t1=1.0, n_steps=1000)
    zero = integrate_backward(lambda t, y: 0.0 * y, 0.0, g)
    assert np.all(zero.values == 0.0)
    lin = integrate_backward(lambda t, y: 1.0 + 0.0 * y, 0.0, g)
    assert np.max(np.abs(lin.values - (1.0 - g.nodes))) <= 1e-12
    growth = integrate_backward(lambda t, y: 2.0 * y, 1.0, g)
    assert growth.initial == pytest.approx(math.e**2, abs=1e-8)
    assert growth.terminal == 1.0


def test_forward_sweep_examples():
    g = TimeGrid(t1=1.0, n_steps=1000)
    c = integrate_forward(lambda t, y: 0.0 * y, 1.7, g)
    assert np.all(c.values == 1.7)
    e = integrate_forward(lambda t, y: 0.5 * y, 1.0, g)
    assert e.terminal == pytest.approx(math.exp(0.5), abs=1e-8)
    v = integrate_forward(lambda t, y: 0.25 + 0.0 * y, 0.3, g)
    assert np.max(np.abs(v.values - (0.3 + 0.25 * g.nodes))) <= 1e-12


def test_batched_sweep_is_columnwise():
    g = TimeGrid(t1=1.0, n_steps=200)
    rates = np.array([0.1, -0.4, 1.0])
    out = rk4_sweep(lambda t, y: rates * y, np.ones(3), g)
    assert out.shape == (201, 3)
    for j, r in enumerate(rates):
        single = integrate_forward(lambda t, y, r=r: r * y, 1.0, g)
        assert np.array_equal(out[:, j], single.values)


def test_finite_escape_detected():
    g = TimeGrid(t1=2.0, n_steps=2000)
    with pytest.raises(FiniteEscapeError):
        integrate_forward(lambda t, y: y * y, 1.0, g)


def test_clamp_variance():
    assert np.array_equal(clamp_variance(np.array([1.0, -1e-14, 0.0])), [1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        clamp_variance(np.array([1.0, -1e-9]))


@pytest.mark.parametrize("lam", [-2.0, 0.5])
def test_forward_sweep_is_fourth_order(lam):
    errors = []
    for n in (20, 40, 80):
        path = integrate_forward(lambda t, y: lam * y, 1.0, TimeGrid(t1=1.0, n_steps=n))
        errors.append(abs(path.terminal - math.exp(lam)))
    assert errors[0] / errors[1] >= 14.0
    assert errors[1] / errors[2] >= 14.0


def test_backward_then_forward_round_trip():
    g = TimeGrid(t1=1.0, n_steps=1000)
    forcing = np.sin(3.0 * g.nodes)
    back = integrate_backward(lambda t, y, c: 0.7 * y - c, 2.0, g, coefficients=(forcing,))
    fwd = integrate_forward(lambda t, y, c: -0.7 * y + c, back.initial, g, coefficients=(forcing,))
    assert abs(fwd.terminal - 2.0) <= 1e-8
    assert np.max(np.abs(fwd.values - back.values)) <= 1e-8


def test_staged_coefficients_match_interpolation():
    g = TimeGrid(t1=1.0, n_steps=4)
    v = np.array([0.0, 1.0, 4.0, 9.0, 16.0])
    staged = g.stage_values(v)
    assert staged.shape == (9,)
    assert np.array_equal(staged[0::2], v)
    assert np.allclose(staged[1::2], [g.sample(v, t) for t in (0.125, 0.375, 0.625, 0.875)], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        g.stage_values(v[:-1])


def test_staged_sweep_matches_closed_form():
    # -y' = y - t, y(1) = 0 has the solution y = t - 1.
    g = TimeGrid(t1=1.0, n_steps=500)
    path = integrate_backward(lambda t, y, c: y - c, 0.0, g, coefficients=(g.nodes,))
    assert np.max(np.abs(path.values - (g.nodes - 1.0))) <= 1e-12


def test_cdf_then_probit_round_trip():
    for x in np.linspace(-6.0, 6.0, 121):
        assert abs(probit(std_normal_cdf(float(x))) - x) <= 1e-8


def test_empirical_quantile_at_rank_boundaries():
    x = [1.0, 2.0, 3.0, 4.0]
    for k in (1, 2, 3):
        level = k / 4
        assert empirical_quantile(x, math.nextafter(level, 0.0)) == k
        assert empirical_quantile(x, level) == k
        assert empirical_quantile(x, math.nextafter(level, 1.0)) == k + 1
    y = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
    # Each agent sees four others; alpha just above 1/2 needs the third of them.
    got = leave_one_out_quantiles(y, math.nextafter(0.5, 1.0))
    assert got[:, 0].tolist() == [4.0, 4.0, 4.0, 3.0, 3.0]


def test_empirical_quantile_properties():
    rng = np.random.default_rng(19)
    x = rng.normal(size=37)
    levels = np.linspace(0.01, 0.99, 50)
    values = [empirical_quantile(x, a) for a in levels]
    assert all(v in x for v in values)
    assert all(lo <= hi for lo, hi in zip(values, values[1:]))
    shuffled = rng.permutation(x)
    assert [empirical_quantile(shuffled, a) for a in levels] == values
