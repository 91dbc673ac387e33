from __future__ import annotations

import pytest

from quantile_mfg.solver import ModelParams, SolverConfig, solve_fixed_point

MEAN_VARIANCE = dict(a=-0.15, b=0.75, r=3.5, sigma=1.0, q=0.45, alpha=0.975, mu0=1.0, V0=0.5, T=0.2)
QUANTILE_VS_CONSTANT = dict(a=0.5, b=1.0, r=1.0, sigma=1.0, q=1.0, alpha=0.95, mu0=0.0, V0=1.0, T=1.0)


@pytest.fixture(scope="session")
def mean_variance_params() -> ModelParams:
    return ModelParams(**MEAN_VARIANCE)


@pytest.fixture(scope="session")
def quantile_vs_constant_params() -> ModelParams:
    return ModelParams(**QUANTILE_VS_CONSTANT)


@pytest.fixture(scope="session")
def mean_variance_solution(mean_variance_params):
    return solve_fixed_point(mean_variance_params, SolverConfig.for_params(mean_variance_params, 2000))


@pytest.fixture(scope="session")
def quantile_vs_constant_solution(quantile_vs_constant_params):
    return solve_fixed_point(quantile_vs_constant_params, SolverConfig.for_params(quantile_vs_constant_params, 2000))


@pytest.fixture(autouse=True)
def _quiet_progress(monkeypatch):
    monkeypatch.setenv("QMFG_PROGRESS", "0")
