import numpy as np
import pytest

from periodic_portfolio.engine.constraints import ConstraintSet
from periodic_portfolio.engine.dual import (
    DualControl,
    DualEvaluation,
    closed_form_nu,
    dual_objective,
    kkt_check,
    minimize_dual,
    multiplier_for_deflator,
    solve_lambda,
    theta_nu,
    weak_duality_holds,
)
from periodic_portfolio.engine.errors import ModelDomainError
from periodic_portfolio.engine.grid import ValueGrid
from periodic_portfolio.engine.market import SimConfig, simulate_factor, simulate_wealth_density
from periodic_portfolio.engine.montecarlo import MeanEstimate, estimate_mean
from periodic_portfolio.engine.utility import (
    ConstantLevel,
    ModifiedUtility,
    UtilitySpec,
    h_A,
)

from .conftest import RATE, constant_model

# E[X^alpha] of the unconstrained Merton investor: r alpha + alpha theta^2 / (2 (1 - alpha))
MERTON_GROWTH = 0.055


def _reward(alpha=0.5, gamma=1.0, A=0.0, mode="power") -> ModifiedUtility:
    spec = UtilitySpec(alpha, gamma, 0.2, 1.0, ConstantLevel(1.0), mode=mode)
    return ModifiedUtility(spec, ValueGrid.constant([0.0], A))


def _paths(model, count=64, seed=1, dt=0.25):
    return simulate_factor(model, 0.0, SimConfig(1.0, count, seed=seed, dt=dt))


@pytest.fixture
def merton_paths(merton_model):
    # one step per period is exact with constant coefficients
    return _paths(merton_model, count=2**14, seed=7, dt=1.0)


class TestControls:
    def test_theta_nu_shifts_the_excess_return(self, merton_model):
        np.testing.assert_allclose(theta_nu(merton_model, 0.0, [0.02]), [0.4])

    def test_from_nodes_evaluates_support(self):
        K = ConstraintSet.no_short_borrow_cap(1, 2.0)
        ctrl = DualControl.from_nodes(K, [-1.0, 1.0], [[-0.1], [0.3]], lam=1.5)
        np.testing.assert_allclose(ctrl.delta_values, [0.2, 0.0])
        np.testing.assert_allclose(ctrl.delta(np.array([-2.0, 2.0])), [0.2, 0.0])
        np.testing.assert_allclose(ctrl.nu(0.9), [0.3])
        assert ctrl.lam == 1.5
        assert ctrl.bins == 2

    def test_with_cell_recomputes_support(self):
        K = ConstraintSet.no_short_borrow_cap(1, 2.0)
        ctrl = DualControl.from_nodes(K, [0.0], [[0.0]])
        changed = ctrl.with_cell(K, 0, [-0.5], 0.3)
        assert changed.delta_values[0] == pytest.approx(1.0)
        assert changed.eta_values[0] == 0.3
        assert ctrl.delta_values[0] == 0.0

    def test_rejects_nu_outside_barrier_cone(self):
        with pytest.raises(ModelDomainError):
            DualControl.from_nodes(ConstraintSet.no_short(1), [0.0], [[-0.1]])

    def test_rejects_non_positive_lambda(self):
        with pytest.raises(ModelDomainError):
            DualControl.zero(1, lam=0.0)

    def test_closed_form_nu_matches_the_cap(self, merton_model):
        K = ConstraintSet.no_short_borrow_cap(1, 1.0)
        np.testing.assert_allclose(
            closed_form_nu(merton_model, _reward(), K, 0.0), [-0.04], atol=1e-8
        )


class TestDegenerateMarket:
    """Without a risk premium the deflator is the deterministic e^{-r tau}."""

    def test_multiplier_closed_form(self, flat_model):
        paths = _paths(flat_model)
        lam = solve_lambda(flat_model, _reward(), DualControl.zero(1), paths)
        assert lam == pytest.approx(np.exp(RATE * 0.5), rel=1e-10)

    def test_budget_target_scales_the_multiplier(self, flat_model):
        paths = _paths(flat_model)
        lam = solve_lambda(flat_model, _reward(), DualControl.zero(1), paths, budget_target=2.0)
        assert lam == pytest.approx(np.exp(RATE * 0.5) * 2.0**-0.5, rel=1e-10)

    def test_dual_value_equals_primal(self, flat_model):
        paths = _paths(flat_model)
        lam = np.exp(RATE * 0.5)
        evaluation = dual_objective(flat_model, _reward(), DualControl.zero(1, lam), paths)
        primal = h_A(_reward(), np.exp(RATE), 0.0)
        assert evaluation.value == pytest.approx(primal, rel=1e-12)
        assert evaluation.value == pytest.approx(2.0 * np.exp(0.01), rel=1e-12)
        assert evaluation.budget == pytest.approx(1.0, rel=1e-12)
        assert evaluation.std_err == pytest.approx(0.0, abs=1e-12)
        assert evaluation.paths_used == 64

    def test_multiplier_minimises_the_dual(self, flat_model):
        paths = _paths(flat_model)
        lam = np.exp(RATE * 0.5)

        def value(scale):
            ctrl = DualControl.zero(1, lam * scale)
            return dual_objective(flat_model, _reward(), ctrl, paths).value

        assert value(0.9) > value(1.0) < value(1.1)

    def test_rejects_non_positive_budget(self, flat_model):
        with pytest.raises(ModelDomainError):
            multiplier_for_deflator(_reward(), np.zeros(4), np.zeros(4), budget_target=0.0)


class TestMertonDual:
    def test_dual_value_at_the_optimal_multiplier(self, merton_model, merton_paths):
        lam = np.exp(MERTON_GROWTH)
        evaluation = dual_objective(
            merton_model, _reward(), DualControl.zero(1, lam), merton_paths
        )
        expected = 2.0 * np.exp(MERTON_GROWTH)
        assert abs(evaluation.value - expected) <= 4.0 * evaluation.std_err

    def test_multiplier_is_near_the_closed_form(self, merton_model, merton_paths):
        lam = solve_lambda(merton_model, _reward(), DualControl.zero(1), merton_paths)
        assert lam == pytest.approx(np.exp(MERTON_GROWTH), rel=0.01)

    def test_closed_form_search_for_gamma_one(self, merton_model, merton_paths, small_settings):
        result = minimize_dual(
            merton_model, _reward(), ConstraintSet.unconstrained(1), merton_paths, small_settings
        )
        assert result.sweeps == 0
        assert result.converged
        np.testing.assert_array_equal(result.control.nu_values, [[0.0]])
        assert result.evaluation.budget == pytest.approx(1.0, abs=1e-9)

    def test_merton_wealth_respects_weak_duality(self, merton_model, merton_paths, small_settings):
        result = minimize_dual(
            merton_model, _reward(), ConstraintSet.unconstrained(1), merton_paths, small_settings
        )
        merton = lambda y: np.full((*np.shape(y), 1), 3.0)
        wealth = simulate_wealth_density(merton_model, merton_paths, merton)
        primal_samples = np.asarray(h_A(_reward(), wealth.x, wealth.y_end))
        primal = estimate_mean(primal_samples, antithetic=True)
        gap = estimate_mean(result.evaluation.samples - primal_samples, antithetic=True)
        # pathwise gap is lambda (1 - X D) up to the scale of the sample budget
        assert abs(gap.mean) <= 0.01
        assert weak_duality_holds(primal, result.evaluation, gap.std_err, n_se=4.0)


class TestLogDual:
    def test_growth_optimal_value(self, merton_model, small_settings):
        paths = _paths(merton_model, count=256, seed=3, dt=0.5)
        mu = _reward(alpha=None, mode="log")
        result = minimize_dual(
            merton_model, mu, ConstraintSet.unconstrained(1), paths, small_settings
        )
        assert result.control.lam == 1.0
        assert result.evaluation.budget == pytest.approx(1.0, rel=1e-12)
        # antithetic pairs cancel the Brownian part of -log D exactly
        assert result.evaluation.value == pytest.approx(RATE + 0.5 * 0.09, rel=1e-10)

    def test_no_short_with_negative_premium_earns_the_rate(self, small_settings):
        model = constant_model(mu=(RATE - 0.01,))
        paths = _paths(model, count=256, seed=3, dt=0.5)
        mu = _reward(alpha=None, mode="log")
        result = minimize_dual(model, mu, ConstraintSet.no_short(1), paths, small_settings)
        np.testing.assert_allclose(result.control.nu_values, [[0.01]], atol=1e-9)
        assert result.evaluation.value == pytest.approx(RATE, rel=1e-8)


class TestRefinedSearch:
    def test_refinement_improves_and_keeps_the_budget(self, merton_model, small_settings):
        settings = small_settings.with_overrides(dual_sweeps=3, paths=512)
        paths = _paths(merton_model, count=512, seed=13, dt=0.25)
        mu = _reward(gamma=0.5, A=1.0)
        result = minimize_dual(merton_model, mu, ConstraintSet.unconstrained(1), paths, settings)
        assert 1 <= result.sweeps <= 3
        assert len(result.history) == result.sweeps + 1
        assert np.all(np.diff(result.history) <= 1e-12)
        assert result.evaluation.budget == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_array_equal(result.control.nu_values, [[0.0]])

    def test_sample_dual_is_convex_in_eta(self, merton_model):
        paths = _paths(merton_model, count=256, seed=21)
        mu = _reward(alpha=0.5, A=0.0)

        def value(eta):
            ctrl = DualControl([0.0], [[0.0]], [eta], [0.0], lam=1.0)
            return dual_objective(merton_model, mu, ctrl, paths).value

        etas = np.linspace(-0.4, 0.4, 9)
        values = np.array([value(e) for e in etas])
        assert np.all(np.diff(values, 2) >= -1e-12)


class TestKKT:
    def test_capped_policy_is_complementary(self, merton_model):
        K = ConstraintSet.no_short_borrow_cap(1, 1.0)
        nu = closed_form_nu(merton_model, _reward(), K, 0.0)
        ctrl = DualControl.from_nodes(K, [0.0], [nu])
        report = kkt_check(merton_model, K, ctrl, lambda y: np.array([1.0]), tol=1e-7)
        assert report.passed

    def test_interior_policy_breaks_complementarity(self, merton_model):
        K = ConstraintSet.no_short_borrow_cap(1, 1.0)
        ctrl = DualControl.from_nodes(K, [0.0], [[-0.04]])
        report = kkt_check(merton_model, K, ctrl, lambda y: np.array([0.5]))
        assert not report.passed
        assert report.in_K.all()
        assert report.complementarity[0] == pytest.approx(0.02)

    def test_infeasible_policy(self, merton_model):
        K = ConstraintSet.no_short_borrow_cap(1, 1.0)
        ctrl = DualControl.from_nodes(K, [0.0], [[0.0]])
        report = kkt_check(merton_model, K, ctrl, lambda y: np.array([2.0]))
        assert not report.in_K[0]
        assert report.distance[0] == pytest.approx(1.0)

    def test_rejects_dimension_mismatch(self, merton_model):
        K = ConstraintSet.no_short(2)
        ctrl = DualControl.from_nodes(K, [0.0], [[0.0, 0.0]])
        with pytest.raises(ModelDomainError):
            kkt_check(merton_model, K, ctrl, lambda y: np.zeros(2))


class TestWeakDuality:
    @pytest.mark.parametrize(
        "dual_value, expected",
        [(1.2, True), (0.99, True), (0.9, False)],
    )
    def test_noise_band(self, dual_value, expected):
        primal = MeanEstimate(1.0, 0.01, 100)
        dual = DualEvaluation(dual_value, 0.01, 1.0, 100)
        assert weak_duality_holds(primal, dual) is expected

    def test_pathwise_error_overrides(self):
        primal = MeanEstimate(1.0, 0.5, 100)
        dual = DualEvaluation(0.9, 0.5, 1.0, 100)
        assert weak_duality_holds(primal, dual)
        assert not weak_duality_holds(primal, dual, gap_std_err=0.001)
