import numpy as np
import pytest

from periodic_portfolio.engine.errors import ModelDomainError
from periodic_portfolio.engine.montecarlo import (
    MeanEstimate,
    combined_std_err,
    derive_seed,
    estimate_mean,
    standard_normals,
)


class TestStandardNormals:
    def test_antithetic_rows_are_negated_pairs(self):
        draws = standard_normals(11, 64, (5, 2), antithetic=True, block_size=16)
        np.testing.assert_array_equal(draws[1::2], -draws[0::2])

    def test_odd_antithetic_count_ends_with_a_plain_draw(self):
        even = standard_normals(11, 8, (3,), antithetic=True, block_size=16)
        odd = standard_normals(11, 7, (3,), antithetic=True, block_size=16)
        assert odd.shape == (7, 3)
        np.testing.assert_array_equal(odd, even[:7])
        single = standard_normals(11, 1, (3,), antithetic=True)
        assert single.shape == (1, 3)
        assert np.all(single != 0.0)

    def test_output_does_not_depend_on_worker_count(self):
        serial = standard_normals(3, 1000, (4, 2), workers=1, block_size=64)
        threaded = standard_normals(3, 1000, (4, 2), workers=4, block_size=64)
        np.testing.assert_array_equal(serial, threaded)

    def test_paths_keep_their_draws_when_count_grows(self):
        short = standard_normals(3, 100, (3,), block_size=64)
        long = standard_normals(3, 300, (3,), block_size=64)
        np.testing.assert_array_equal(short, long[:100])

    def test_seeds_give_distinct_streams(self):
        a = standard_normals(1, 8, (2,))
        b = standard_normals(2, 8, (2,))
        assert not np.allclose(a, b)

    def test_moments(self):
        draws = standard_normals(5, 2**15, (1,), antithetic=False)
        assert abs(draws.mean()) < 0.03
        assert abs(draws.var() - 1.0) < 0.03

    @pytest.mark.parametrize(
        "count, block_size",
        [(0, 64), (8, 7)],
    )
    def test_rejects_invalid_sizes(self, count, block_size):
        with pytest.raises(ModelDomainError):
            standard_normals(1, count, (1,), antithetic=True, block_size=block_size)


class TestEstimates:
    def test_plain_standard_error(self):
        estimate = estimate_mean(np.array([1.0, 2.0, 3.0, 4.0]))
        assert estimate.mean == pytest.approx(2.5)
        assert estimate.std_err == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)
        assert estimate.count == 4

    def test_antithetic_error_uses_pair_means(self):
        estimate = estimate_mean(np.array([1.0, -1.0, 2.0, -2.0]), antithetic=True)
        assert estimate == MeanEstimate(0.0, 0.0, 4)

    def test_single_sample_has_zero_error(self):
        assert estimate_mean(np.array([3.0])).std_err == 0.0

    def test_within_and_at_most(self):
        estimate = MeanEstimate(1.0, 0.1, 100)
        assert estimate.within(1.25)
        assert not estimate.within(1.35)
        assert estimate.at_most(0.75)
        assert not estimate.at_most(0.65)

    def test_combined_std_err_skips_missing(self):
        assert combined_std_err(3.0, 4.0, None) == pytest.approx(5.0)
        assert combined_std_err() == 0.0


class TestDeriveSeed:
    def test_is_deterministic(self):
        assert derive_seed(42, 1, 2) == derive_seed(42, 1, 2)

    def test_keys_separate_streams(self):
        seeds = {derive_seed(42, 1, k) for k in range(50)}
        assert len(seeds) == 50
        assert derive_seed(42, 1) != derive_seed(42, 2)
