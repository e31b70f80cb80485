"""Shared models, preferences and configs for the test suite."""

import json
from pathlib import Path

import numpy as np
import pytest

from periodic_portfolio.engine.constraints import ConstraintSet
from periodic_portfolio.engine.market import (
    ConstantCoefficients,
    FactorModel,
    OUFactor,
)
from periodic_portfolio.engine.settings import SolverSettings
from periodic_portfolio.engine.utility import ConstantLevel, UtilitySpec

RATE = 0.02
DRIFT = 0.08
VOL = 0.2
FLAT_LEVEL = 0.8


def constant_model(
    r: float = RATE,
    mu=(DRIFT,),
    sigma=((VOL,),),
    m: float = 1.0,
    kappa: float = 1.0,
    beta: float = 0.3,
    **bounds,
) -> FactorModel:
    coefficients = ConstantCoefficients(r, np.asarray(mu), np.asarray(sigma))
    factor = OUFactor(kappa=kappa, mean=0.0, beta=beta, y0=0.0)
    return FactorModel.from_families(
        coefficients, factor, np.zeros(coefficients.n), m=m, **bounds
    )


def flat_closed_form(spec: UtilitySpec, r: float, m: float) -> float:
    """A* when theta = 0: m e^{(r alpha - rho) tau} / (1 - e^{-(rho - r alpha (1 - gamma)) tau})."""
    alpha, gamma, rho, tau = spec.alpha, spec.gamma, spec.rho, spec.tau
    return (
        m
        * np.exp((r * alpha - rho) * tau)
        / (1.0 - np.exp(-(rho - r * alpha * (1.0 - gamma)) * tau))
    )


def merton_gamma1_A(model: FactorModel, spec: UtilitySpec) -> float:
    """A* of the unconstrained gamma = 1 investor with constant coefficients."""
    theta_sq = model.M0
    growth = RATE * spec.alpha + spec.alpha * theta_sq / (2.0 * (1.0 - spec.alpha))
    return np.exp((growth - spec.rho) * spec.tau) / (
        1.0 - np.exp(-spec.rho * spec.tau)
    )


@pytest.fixture
def merton_model() -> FactorModel:
    """r = 0.02, mu - r = 0.06, sigma = 0.2: theta = 0.3, Merton pi = 3 at alpha = 1/2."""
    return constant_model()


@pytest.fixture
def flat_model() -> FactorModel:
    """Zero excess return, so every state-price density is deterministic."""
    return constant_model(mu=(RATE,), m=FLAT_LEVEL)


@pytest.fixture
def flat_spec() -> UtilitySpec:
    return UtilitySpec(0.5, 0.5, 0.2, 1.0, ConstantLevel(FLAT_LEVEL))


@pytest.fixture
def gamma1_spec() -> UtilitySpec:
    return UtilitySpec(0.5, 1.0, 0.2, 1.0, ConstantLevel(1.0))


@pytest.fixture
def unconstrained() -> ConstraintSet:
    return ConstraintSet.unconstrained(1)


@pytest.fixture
def small_settings() -> SolverSettings:
    return SolverSettings(
        seed=20240611,
        paths=256,
        steps_per_period=8,
        grid_nodes=3,
        policy_bins=1,
        tol=1e-10,
        dual_sweeps=0,
        certify=False,
        periods=3,
    )


@pytest.fixture
def exact_settings() -> SolverSettings:
    """One log-Euler step per period is exact for constant coefficients."""
    return SolverSettings(
        seed=7,
        paths=2**14,
        steps_per_period=1,
        grid_nodes=3,
        policy_bins=1,
        dual_sweeps=0,
        certify=False,
        periods=3,
    )


# --- Experiment configs ---
@pytest.fixture
def flat_config() -> dict:
    return {
        "model": {
            "coefficients": {
                "family": "constant",
                "r": RATE,
                "mu": [RATE],
                "sigma": [[VOL]],
            },
        },
        "constraints": {"kind": "unconstrained"},
        "utility": {
            "mode": "power",
            "alpha": 0.5,
            "gamma": 0.5,
            "rho": 0.2,
            "tau": 1.0,
            "h": {"family": "constant", "value": FLAT_LEVEL},
        },
        "numerics": {
            "seed": 5,
            "paths": 256,
            "steps_per_period": 8,
            "grid_nodes": 3,
            "policy_bins": 1,
            "dual_sweeps": 0,
            "tol": 1e-10,
            "periods": 2,
        },
    }


@pytest.fixture
def merton_config() -> dict:
    return {
        "model": {
            "coefficients": {
                "family": "constant",
                "r": RATE,
                "mu": [DRIFT],
                "sigma": [[VOL]],
            },
        },
        "constraints": {"kind": "unconstrained"},
        "utility": {"mode": "power", "alpha": 0.5, "gamma": 1.0, "rho": 0.2},
        "numerics": {
            "seed": 3,
            "paths": 4096,
            "steps_per_period": 1,
            "grid_nodes": 3,
            "policy_bins": 1,
            "certify": False,
            "periods": 2,
        },
    }


@pytest.fixture
def write_config(tmp_path):
    def _write(data: dict, name: str = "experiment.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return _write
