import math

import numpy as np
import pytest

from extvae import metrics as mx
from extvae.distributions import GevParams, gev_sample
from extvae.seeds import substream


def two_site_coords():
    return np.array([[0.0, 0.0], [1.0, 0.0]])


class TestChiCurve:
    def test_comonotone_pair_is_one(self):
        rng = substream(1)
        series = rng.standard_normal(500)
        fields = np.column_stack([series, series])
        chi = mx.chi_curve(fields, two_site_coords(), 1.0,
                           np.array([0.5, 0.9, 0.95]), n_boot=10, seed=0)
        np.testing.assert_allclose(chi.estimate, 1.0)

    def test_u_zero_is_one(self):
        rng = substream(2)
        fields = rng.standard_normal((300, 2))
        chi = mx.chi_curve(fields, two_site_coords(), 1.0, np.array([0.0]),
                           n_boot=5, seed=0)
        assert chi.estimate[0] == 1.0

    def test_independent_pairs_slope(self):
        rng = substream(3)
        fields = rng.random((10**4, 2))
        chi = mx.chi_curve(fields, two_site_coords(), 1.0, np.array([0.9]),
                           n_boot=0, seed=0)
        den = math.floor(0.1 * 10**4)
        se = math.sqrt(0.1 * 0.9 / den)
        assert abs(chi.estimate[0] - 0.1) < 3 * se

    def test_rank_invariance_under_exp(self):
        rng = substream(4)
        fields = rng.standard_normal((400, 4))
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        u = np.array([0.8, 0.9])
        a = mx.chi_curve(fields, coords, 1.0, u, n_boot=0, seed=5)
        b = mx.chi_curve(np.exp(fields), coords, 1.0, u, n_boot=0, seed=5)
        np.testing.assert_array_equal(a.estimate, b.estimate)

    def test_band_contains_point(self):
        rng = substream(5)
        fields = rng.standard_normal((200, 2)) + 0.8 * rng.standard_normal((200, 1))
        chi = mx.chi_curve(fields, two_site_coords(), 1.0,
                           np.array([0.5, 0.8, 0.9]), n_boot=50, seed=2)
        ok = chi.defined
        assert np.all(chi.lo95[ok] <= chi.estimate[ok])
        assert np.all(chi.estimate[ok] <= chi.hi95[ok])

    def test_band_width_shrinks_with_replicates(self):
        rng = substream(6)
        common = rng.standard_normal((600, 1))
        fields = 0.7 * common + 0.3 * rng.standard_normal((600, 2))
        u = np.array([0.8])
        small = mx.chi_curve(fields[:50], two_site_coords(), 1.0, u,
                             n_boot=100, seed=3)
        big = mx.chi_curve(fields[:500], two_site_coords(), 1.0, u,
                           n_boot=100, seed=3)
        assert (big.hi95 - big.lo95)[0] < (small.hi95 - small.lo95)[0]

    def test_empty_distance_bin_errors(self):
        rng = substream(7)
        with pytest.raises(ValueError, match="no site pairs"):
            mx.chi_curve(rng.random((50, 2)), two_site_coords(), 10.0,
                         np.array([0.5]), tol=0.1, n_boot=0, seed=0)

    def test_infeasible_u_flagged(self):
        # U = ranks/n can equal 1, so exceedance fails only at u >= 1
        rng = substream(8)
        fields = rng.random((20, 2))
        chi = mx.chi_curve(fields, two_site_coords(), 1.0,
                           np.array([0.5, 1.0]), n_boot=0, seed=0)
        assert chi.defined[0]
        assert not chi.defined[1]
        assert np.isnan(chi.estimate[1])

    def test_pair_subsampling_cap(self):
        rng = substream(9)
        coords = np.column_stack([np.arange(30.0), np.zeros(30)])
        fields = rng.random((40, 30))
        chi = mx.chi_curve(fields, coords, 1.0, np.array([0.5]), tol=0.01,
                           n_boot=0, seed=1, max_pairs=10)
        assert chi.n_pairs == 10


class TestAreCurve:
    def test_all_cells_exceed_hand_value(self):
        # one replicate, four cells, everything above u: sqrt(4/pi)
        fields = np.ones((1, 4))
        are = mx.are_curve(fields, psi=1.0, ref_index=0, u=np.array([0.5]),
                           n_boot=0, seed=0)
        assert are.estimate[0] == pytest.approx(math.sqrt(4.0 / math.pi), rel=1e-12)

    def test_only_reference_exceeds(self):
        fields = np.array([[5.0, 1.0, 1.0, 1.0],
                           [1.0, 5.0, 5.0, 5.0]])
        are = mx.are_curve(fields, psi=1.0, ref_index=0, u=np.array([0.6]),
                           n_boot=0, seed=0)
        assert are.estimate[0] == pytest.approx(1.0 / math.sqrt(math.pi), rel=1e-12)

    def test_u_zero_full_disk(self):
        rng = substream(10)
        n_g = 9
        fields = rng.random((7, n_g))
        are = mx.are_curve(fields, psi=2.0, ref_index=4, u=np.array([0.0]),
                           n_boot=0, seed=0)
        assert are.estimate[0] == pytest.approx(2.0 * math.sqrt(n_g / math.pi),
                                                rel=1e-12)

    def test_reference_never_exceeds_flagged(self):
        fields = np.array([[0.0, 5.0], [0.0, 6.0], [0.0, 7.0]])
        are = mx.are_curve(fields, psi=1.0, ref_index=0,
                           u=np.array([0.5, 1.0]), n_boot=0, seed=0)
        assert not are.defined[1]

    def test_rank_invariance(self):
        rng = substream(11)
        fields = rng.standard_normal((100, 9))
        u = np.array([0.3, 0.7])
        a = mx.are_curve(fields, 1.0, 4, u, n_boot=0, seed=0)
        b = mx.are_curve(np.exp(fields), 1.0, 4, u, n_boot=0, seed=0)
        np.testing.assert_array_equal(a.estimate, b.estimate)

    def test_monotone_decreasing_for_smooth_fields(self):
        rng = substream(12)
        common = rng.standard_normal((500, 1))
        fields = common + 0.1 * rng.standard_normal((500, 16))
        are = mx.are_curve(fields, 1.0, 5, np.array([0.2, 0.5, 0.8, 0.95]),
                           n_boot=0, seed=0)
        assert np.all(np.diff(are.estimate) < 0)


class TestTwcrps:
    def test_point_mass_at_observation(self):
        assert mx.twcrps(np.full(10, 3.0), 3.0) == 0.0

    def test_hand_value_above_threshold(self):
        # ensemble at 5, obs 7, threshold 5: integrand 1 on [5, 7)
        assert mx.twcrps(np.full(4, 5.0), 7.0, threshold=5.0) == pytest.approx(2.0)

    def test_unweighted_two_member_case(self):
        assert mx.twcrps(np.array([1.0, 3.0]), 3.0,
                         threshold=-np.inf) == pytest.approx(0.5)

    def test_nearest_rank_threshold(self):
        ens = np.arange(1.0, 11.0)
        assert mx.nearest_rank_quantile(ens, 0.9) == 9.0
        assert mx.nearest_rank_quantile(np.array([1.0, 3.0]), 0.9) == 3.0

    def test_nonnegative_and_zero_iff_point_mass(self):
        rng = substream(13)
        for _ in range(20):
            ens = rng.random(8) * 4
            obs = rng.random() * 4
            assert mx.twcrps(ens, obs, threshold=-np.inf) >= 0.0
        assert mx.twcrps(np.full(5, 2.0), 2.0, threshold=-np.inf) == 0.0

    def test_matches_brute_force_grid(self):
        rng = substream(14)
        ens = np.sort(rng.random(16) * 5)
        obs = 3.3
        thr = 2.0
        exact = mx.twcrps(ens, obs, threshold=thr)
        zs = np.linspace(thr, 10.0, 400001)
        f = np.searchsorted(ens, zs, side="right") / ens.size
        ind = (zs >= obs).astype(float)
        brute = np.trapezoid((f - ind) ** 2, zs)
        assert exact == pytest.approx(brute, abs=1e-3)

    def test_singleton_ensemble_is_point_mass(self):
        assert mx.twcrps(np.array([2.0]), 5.0, threshold=-np.inf) == pytest.approx(3.0)

    def test_field_wrapper_shapes(self):
        rng = substream(15)
        samples = rng.random((3, 4, 50)) + 0.5
        obs = rng.random((3, 4)) + 0.5
        res = mx.twcrps_field(samples, obs)
        assert res.scores.shape == (3, 4)
        assert res.thresholds.shape == (3, 4)
        assert np.all(res.scores >= 0)


class TestQQ:
    def test_identical_inputs_on_diagonal(self):
        rng = substream(16)
        x = rng.standard_normal(500)
        q = np.linspace(0.05, 0.95, 19)
        qo, qe = mx.qq_data(x, x, q)
        np.testing.assert_allclose(qo, qe, rtol=1e-12)

    def test_doubling_scales_quantiles(self):
        rng = substream(17)
        x = np.abs(rng.standard_normal(1000)) + 0.1
        q = np.linspace(0.1, 0.9, 9)
        qo, qe = mx.qq_data(x, 2.0 * x, q)
        np.testing.assert_allclose(qe, 2.0 * qo, rtol=1e-12)

    def test_gev_sample_against_itself(self):
        p = GevParams(0.0, 1.0, 0.2)
        obs = gev_sample(p, 10**5, seed=3)
        ens = gev_sample(p, 10**5, seed=4)
        q = np.linspace(0.05, 0.95, 19)
        qo, qe = mx.qq_data(obs, ens, q)
        assert np.max(np.abs(qo - qe)) < 0.05

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mx.qq_data(np.array([]), np.array([1.0]), np.array([0.5]))
