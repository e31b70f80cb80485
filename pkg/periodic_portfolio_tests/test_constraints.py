import numpy as np
import pytest

from periodic_portfolio.engine.constraints import (
    ConstraintKind,
    ConstraintSet,
    contains,
    distance_to_K,
    in_barrier_cone,
    nu_star_log,
    nu_star_power_gamma1,
    project_barrier_cone,
    project_K,
    support_delta,
)
from periodic_portfolio.engine.errors import ModelDomainError, SingularVolatilityError

BOX_LO = [-1.0, -0.5]
BOX_HI = [2.0, 1.0]
BOX_NORMALS = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
BOX_OFFSETS = [2.0, 1.0, 1.0, 0.5]


@pytest.fixture
def box() -> ConstraintSet:
    return ConstraintSet.box(BOX_LO, BOX_HI)


@pytest.fixture
def box_halfspaces() -> ConstraintSet:
    return ConstraintSet.halfspaces(BOX_NORMALS, BOX_OFFSETS)


class TestSupportFunction:
    def test_zero_has_zero_support_for_every_kind(self, box, box_halfspaces):
        sets = [
            ConstraintSet.unconstrained(2),
            ConstraintSet.no_short(2),
            ConstraintSet.borrow_cap(2, 1.0),
            ConstraintSet.no_short_borrow_cap(2, 1.0),
            box,
            box_halfspaces,
        ]
        for K in sets:
            assert support_delta(K, np.zeros(2)) == (0.0, True), K.kind
            assert K.delta0 == 0.0

    def test_unconstrained_cone_is_origin(self):
        K = ConstraintSet.unconstrained(2)
        assert not in_barrier_cone(K, [0.1, 0.0])

    def test_no_short(self):
        K = ConstraintSet.no_short(2)
        assert support_delta(K, [0.3, 0.0]) == (0.0, True)
        assert not support_delta(K, [0.3, -0.1]).finite

    def test_borrow_cap_lives_on_the_negative_ray(self):
        K = ConstraintSet.borrow_cap(2, 1.5)
        value, finite = support_delta(K, [-0.5, -0.5])
        assert finite
        assert value == pytest.approx(0.75)
        assert not in_barrier_cone(K, [1.0, 0.0])
        assert not in_barrier_cone(K, [-0.5, -0.2])

    def test_no_short_borrow_cap(self):
        K = ConstraintSet.no_short_borrow_cap(2, 2.0)
        assert support_delta(K, [-0.3, 0.2]).value == pytest.approx(0.6)
        assert support_delta(K, [0.3, 0.2]).value == 0.0

    def test_box(self, box):
        # attained at pi = (-1, 1)
        assert support_delta(box, [1.0, -2.0]).value == pytest.approx(3.0)

    @pytest.mark.parametrize(
        "x", [[1.0, -2.0], [-0.4, 0.7], [0.0, 3.0], [-1.0, -1.0]]
    )
    def test_halfspace_box_matches_closed_form(self, box, box_halfspaces, x):
        lp = support_delta(box_halfspaces, x)
        closed = support_delta(box, x)
        assert lp.finite
        assert lp.value == pytest.approx(closed.value, abs=1e-7)

    def test_unbounded_halfspace_direction_is_infinite(self):
        K = ConstraintSet.halfspaces([[1.0, 0.0]], [1.0])
        assert support_delta(K, [-1.0, 0.0]).value == pytest.approx(1.0)
        assert not in_barrier_cone(K, [1.0, 0.0])
        assert not in_barrier_cone(K, [0.0, 1.0])

    def test_rejects_wrong_length(self):
        with pytest.raises(ModelDomainError):
            support_delta(ConstraintSet.no_short(2), [1.0, 2.0, 3.0])


class TestProjection:
    @pytest.mark.parametrize(
        "K, pi, expected",
        [
            (ConstraintSet.no_short(2), [-1.0, 0.5], [0.0, 0.5]),
            (ConstraintSet.borrow_cap(2, 1.0), [2.0, 1.0], [1.0, 0.0]),
            (ConstraintSet.no_short_borrow_cap(2, 1.0), [2.0, 0.5], [1.0, 0.0]),
            (ConstraintSet.no_short_borrow_cap(2, 0.0), [2.0, 0.5], [0.0, 0.0]),
            (ConstraintSet.box(BOX_LO, BOX_HI), [3.0, -2.0], [2.0, -0.5]),
        ],
    )
    def test_closed_forms(self, K, pi, expected):
        np.testing.assert_allclose(project_K(K, pi), expected, atol=1e-12)

    def test_halfspace_projection_matches_box_clip(self, box, box_halfspaces):
        for pi in ([3.0, -2.0], [-4.0, 0.3], [0.5, 5.0]):
            np.testing.assert_allclose(
                project_K(box_halfspaces, pi), project_K(box, pi), atol=1e-7
            )

    def test_projection_is_idempotent(self, box_halfspaces):
        sets = [
            ConstraintSet.no_short(3),
            ConstraintSet.borrow_cap(3, 0.5),
            ConstraintSet.no_short_borrow_cap(3, 1.2),
            ConstraintSet.box([-1.0] * 3, [1.0] * 3),
        ]
        rng = np.random.default_rng(4)
        for K in sets:
            for pi in rng.normal(scale=2.0, size=(10, 3)):
                projected = project_K(K, pi)
                assert contains(K, projected), K.kind
                np.testing.assert_allclose(project_K(K, projected), projected)

    def test_distance(self):
        K = ConstraintSet.no_short(2)
        assert distance_to_K(K, [-3.0, -4.0]) == pytest.approx(5.0)
        assert not contains(K, [-1e-6, 0.0])
        assert contains(K, [-1e-9, 0.0])

    def test_barrier_cone_projection(self, box_halfspaces):
        assert project_barrier_cone(ConstraintSet.unconstrained(2), [1.0, 2.0]).tolist() == [0.0, 0.0]
        np.testing.assert_allclose(
            project_barrier_cone(ConstraintSet.borrow_cap(2, 1.0), [0.2, -1.0]),
            [-0.4, -0.4],
        )
        # Every direction is in the barrier cone of a bounded polytope
        np.testing.assert_allclose(
            project_barrier_cone(box_halfspaces, [0.4, -0.7]), [0.4, -0.7], atol=1e-10
        )


class TestValidation:
    def test_kind_is_coerced_from_string(self):
        K = ConstraintSet("no_short", 2)
        assert K.kind is ConstraintKind.NO_SHORT

    @pytest.mark.parametrize(
        "build",
        [
            lambda: ConstraintSet.unconstrained(0),
            lambda: ConstraintSet.borrow_cap(2, -1.0),
            lambda: ConstraintSet(ConstraintKind.NO_SHORT_BORROW_CAP, 2),
            lambda: ConstraintSet.box([0.1, -1.0], [1.0, 1.0]),
            lambda: ConstraintSet.box([-1.0, -1.0], [1.0, -0.1]),
            lambda: ConstraintSet.halfspaces([[1.0, 0.0]], [-0.5]),
            lambda: ConstraintSet.halfspaces([[0.0, 0.0]], [1.0]),
            lambda: ConstraintSet(
                ConstraintKind.HALFSPACES, 3, normals=[[1.0, 0.0]], offsets=[1.0]
            ),
        ],
    )
    def test_rejects_sets_without_origin_or_malformed(self, build):
        with pytest.raises(ModelDomainError):
            build()


class TestNuStar:
    THETA = 0.3
    SIGMA = [[0.2]]

    @pytest.mark.parametrize(
        "alpha, expected_delta",
        [(0.5, 0.04), (0.0, 0.02), (-0.25, 0.01), (-1.0, 0.0)],
    )
    def test_power_gamma1_borrow_cap(self, alpha, expected_delta):
        K = ConstraintSet.no_short_borrow_cap(1, 1.0)
        nu = nu_star_power_gamma1(K, [self.THETA], self.SIGMA, alpha)
        assert support_delta(K, nu).value == pytest.approx(expected_delta, abs=1e-8)

    def test_power_gamma1_policy_hits_the_cap(self):
        K = ConstraintSet.no_short_borrow_cap(1, 1.0)
        nu = nu_star_power_gamma1(K, [self.THETA], self.SIGMA, 0.5)
        pi = (self.THETA + nu[0] / 0.2) / (0.2 * 0.5)
        assert pi == pytest.approx(1.0, abs=1e-7)

    def test_unconstrained_is_zero(self):
        nu = nu_star_log(ConstraintSet.unconstrained(2), [0.3, -0.1], np.eye(2) * 0.2)
        assert nu.tolist() == [0.0, 0.0]

    def test_log_no_short_removes_negative_premium(self):
        K = ConstraintSet.no_short(2)
        sigma = np.eye(2) * 0.2
        theta = np.array([0.3, -0.1])
        nu = nu_star_log(K, theta, sigma)
        np.testing.assert_allclose(nu, [0.0, 0.02], atol=1e-9)
        pi = np.linalg.solve(sigma.T, theta + np.linalg.solve(sigma, nu))
        np.testing.assert_allclose(pi, [1.5, 0.0], atol=1e-7)

    def test_rejects_alpha_one_and_singular_sigma(self):
        K = ConstraintSet.no_short(1)
        with pytest.raises(ModelDomainError):
            nu_star_power_gamma1(K, [0.3], self.SIGMA, 1.0)
        with pytest.raises(SingularVolatilityError):
            nu_star_log(ConstraintSet.no_short(2), [0.3, 0.1], [[1.0, 1.0], [1.0, 1.0]])
