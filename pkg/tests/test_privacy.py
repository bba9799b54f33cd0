import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from oracles import AMPLIFY_SPOTS, STRONG_SPOTS, mp_closed_form, mp_strong

from fedperm.privacy import (
    BudgetSplit,
    ClipSpec,
    DataError,
    DomainError,
    PrivacyBudget,
    amplify,
    amplify_full,
    amplify_multi,
    amplify_validity_bound,
    amplify_window,
    calibrate,
    clip_normalize,
    compose_naive,
    compose_strong,
    denormalize,
    full_validity_bound,
    gaussian_epsilon,
    gaussian_sigma,
    invert_strong,
    laplace_randomize,
    laplace_scale,
    multi_validity_bound,
    norm_bound,
    superwindow_epsilon,
    window_validity_bound,
)

FUNCS = {"full": amplify_full, "window": amplify_window, "multi": amplify_multi}


class TestClipNormalize:
    def test_examples(self):
        assert np.all(clip_normalize(np.zeros(5), 0.3) == 0.5)
        assert clip_normalize([3.0, -0.5, -9.0], 1.0).tolist() == [1.0, 0.25, 0.0]

    def test_rejects_nonfinite_and_bad_clip(self):
        with pytest.raises(DataError):
            clip_normalize([0.0, math.nan], 1.0)
        with pytest.raises(ValueError):
            clip_normalize([0.0], 0.0)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0.01, 5))
    def test_denormalize_inverts_inside_the_box(self, xs, clip):
        x = np.clip(np.array(xs), -clip, clip)
        assert np.allclose(denormalize(clip_normalize(x, clip), clip), x, atol=1e-12 * clip)

    def test_clip_spec_validation(self):
        ClipSpec(1.0)
        with pytest.raises(ValueError):
            ClipSpec(0.0)
        with pytest.raises(ValueError):
            ClipSpec(1.0, -1.0)


class TestLaplace:
    def test_infinite_budget_is_identity(self):
        x = np.linspace(0, 1, 7)
        assert np.array_equal(laplace_randomize(x, math.inf, 7, np.random.default_rng(0)), x)

    def test_scale(self):
        assert laplace_scale(4.0, 100) == 25.0
        with pytest.raises(ValueError):
            laplace_scale(0.0, 10)

    def test_seeded(self):
        x = np.full(50, 0.5)
        a = laplace_randomize(x, 10.0, 50, np.random.default_rng(3))
        b = laplace_randomize(x, 10.0, 50, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_clamped_output_lies_in_unit_box(self):
        y = laplace_randomize(np.full(1000, 0.5), 1.0, 1000, np.random.default_rng(0))
        assert y.min() >= 0.0 and y.max() <= 1.0 and 0 < np.mean(y) < 1

    def test_median_and_mad(self):
        b = laplace_scale(20.0, 200)
        noise = laplace_randomize(np.zeros(100_000), 20.0, 200, np.random.default_rng(11), clamp=False)
        assert abs(np.median(noise)) < 0.01 * b
        assert abs(np.mean(np.abs(noise)) - b) < 0.05 * b


class TestGaussian:
    def test_sigma_epsilon_inverse(self):
        s = gaussian_sigma(0.5, 1e-5, 2.0)
        assert s == pytest.approx(2.0 * math.sqrt(2 * math.log(1.25e5)) / 0.5, rel=1e-15)
        assert gaussian_epsilon(s, 1e-5, 2.0) == pytest.approx(0.5, rel=1e-14)
        assert gaussian_sigma(math.inf, 1e-5, 1.0) == 0.0
        assert gaussian_epsilon(0.0, 1e-5, 1.0) == math.inf


class TestNormBound:
    def test_halves_when_norm_is_twice_bound(self):
        y = np.array([6.0, 8.0])  # norm 10
        assert norm_bound(y, 5.0).tolist() == [3.0, 4.0]

    def test_unchanged_inside(self):
        y = np.array([0.1, 0.2])
        assert np.array_equal(norm_bound(y, 1.0), y)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=10), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_norm_idempotent_lipschitz(self, ys, m1, m2):
        y = np.array(ys)
        out = norm_bound(y, m1)
        assert np.linalg.norm(out) == pytest.approx(min(np.linalg.norm(y), m1), rel=1e-12, abs=1e-300)
        assert np.allclose(norm_bound(out, m1), out, rtol=1e-12, atol=0)
        assert np.linalg.norm(norm_bound(y, m1) - norm_bound(y, m2)) <= abs(m1 - m2) * (1 + 1e-9) + 1e-12


class TestAmplification:
    @pytest.mark.parametrize("kind,args,value", AMPLIFY_SPOTS)
    def test_spot_values(self, kind, args, value):
        assert FUNCS[kind](*args) == pytest.approx(value, rel=1e-12)

    @pytest.mark.parametrize("kind,args,value", AMPLIFY_SPOTS)
    def test_frozen_table_matches_live_mpmath(self, kind, args, value):
        assert mp_closed_form(kind, args) == pytest.approx(value, rel=1e-15)

    def test_full_quarter_d_halves(self):
        a = amplify_full(0.1, 1e-5, 400)
        assert amplify_full(0.1, 1e-5, 1600) == pytest.approx(a / 2, rel=1e-15)

    def test_window_with_k1_equal_d_matches_full(self):
        assert amplify_window(0.3, 1e-6, 5000) == amplify_full(0.3, 1e-6, 5000)

    def test_multi_k2_one_substitution(self):
        eps, delta, k1 = 0.2, 1e-6, 500
        base = min(1, eps) * math.exp(eps) / math.sqrt(k1)
        assert amplify_multi(eps, delta, k1, 1) == pytest.approx(base * math.log(1 / delta), rel=1e-14)

    def test_zero_epsilon(self):
        assert amplify_full(0.0, 1e-5, 400) == 0.0

    @pytest.mark.parametrize(
        "fn,args,bound",
        [
            (amplify_full, (3.0, 1e-5, 100), full_validity_bound(1e-5, 100)),
            (amplify_window, (3.0, 1e-5, 100), window_validity_bound(1e-5, 100)),
            (amplify_multi, (3.0, 1e-5, 100, 4), multi_validity_bound(1e-5, 100, 4)),
        ],
    )
    def test_validity_violation_carries_bound(self, fn, args, bound):
        with pytest.raises(DomainError) as info:
            fn(*args)
        assert info.value.bound == bound

    @settings(max_examples=200)
    @given(st.floats(1e-4, 3.0), st.floats(1e-4, 3.0), st.integers(200, 20000), st.sampled_from([1e-4, 1e-6, 1e-9]))
    def test_monotone_in_eps_and_size(self, e1, e2, k1, delta):
        lo, hi = sorted((e1, e2))
        assume(hi - lo > 1e-9)
        assume(hi <= window_validity_bound(delta, k1))
        assert 0 < amplify_window(lo, delta, k1) < amplify_window(hi, delta, k1)
        assert amplify_window(lo, delta, 2 * k1) < amplify_window(lo, delta, k1)

    def test_dispatch(self):
        assert amplify(400.0, 1e-6, 800, 1) == amplify_window(0.5, 1e-6, 800)
        assert amplify(800.0, 1e-6, 800, 10) == amplify_multi(0.1, 1e-6, 800, 10)
        assert amplify_validity_bound(1e-6, 800, 1) == window_validity_bound(1e-6, 800) * 800

    @given(st.floats(1e-3, 1e4), st.integers(1, 1000), st.integers(1, 50))
    def test_budget_identities(self, eps_d, k1, k2):
        eps_w = superwindow_epsilon(eps_d, k1, k2)
        assert eps_w * k1 * k2 == pytest.approx(eps_d, rel=4e-16)
        b = PrivacyBudget(eps_d, k1 * k2 * 3, k1, k2, 1e-7, 1e-6)
        assert b.eps_wd * b.d == pytest.approx(eps_d, rel=4e-16)


class TestComposition:
    def test_naive(self):
        assert compose_naive(0.2, 10) == pytest.approx(2.0)
        assert compose_naive(0.7, 1) == 0.7
        assert compose_naive(0.0, 9) == 0.0

    @pytest.mark.parametrize("eps,delta,t,dp,value", STRONG_SPOTS)
    def test_spot_values(self, eps, delta, t, dp, value):
        total, dtotal = compose_strong(eps, delta, t, dp)
        assert total == pytest.approx(value, rel=1e-12)
        assert mp_strong(eps, delta, t, dp)[0] == pytest.approx(value, rel=1e-15)
        assert dtotal == t * delta + dp

    def test_single_round(self):
        eps = 0.3
        total, _ = compose_strong(eps, 0.0, 1, 1e-6)
        assert total == pytest.approx(math.sqrt(2 * math.log(1e6)) * eps + eps * math.expm1(eps), rel=1e-15)

    @given(st.floats(0.001, 2.0), st.integers(1, 500), st.floats(1e-9, 1e-3))
    def test_invert_strong(self, target, t, dp):
        e = invert_strong(target, t, dp)
        assert compose_strong(e, 0.0, t, dp)[0] <= target * (1 + 1e-12)
        assert compose_strong(e, 0.0, t, dp)[0] == pytest.approx(target, rel=1e-9)


class TestCalibrate:
    D = 650

    def test_round_trip(self):
        split = BudgetSplit.default(1e-5, 50)
        eps_d = calibrate(4.0, 1e-5, 50, self.D, 650, 1)
        eps_round = amplify(eps_d, split.delta_round, 650, 1)
        total, delta = compose_strong(eps_round, split.delta_round, 50, split.delta_prime)
        assert total <= 4.0 and total == pytest.approx(4.0, rel=1e-6)
        assert delta == pytest.approx(1e-5, rel=1e-15)

    def test_monotone_in_target(self):
        a = calibrate(2.0, 1e-5, 50, self.D, 325, 2)
        b = calibrate(4.0, 1e-5, 50, self.D, 325, 2)
        assert b > a

    def test_heavy_config_admits_less_noise(self):
        light = calibrate(4.0, 1e-5, 50, self.D, 65, 10)
        heavy = calibrate(4.0, 1e-5, 50, self.D, 650, 1)
        assert heavy > light
        assert laplace_scale(heavy, self.D) < laplace_scale(light, self.D)

    def test_returns_validity_cap_when_target_is_loose(self):
        split = BudgetSplit.default(1e-5, 1)
        cap = amplify_validity_bound(split.delta_round, 650, 1)
        assert calibrate(1e6, 1e-5, 1, self.D, 650, 1) == cap

    def test_empty_region(self):
        with pytest.raises(DomainError):
            calibrate(4.0, 1e-5, 50, 10, 5, 2)

    def test_bad_geometry(self):
        with pytest.raises(ValueError):
            calibrate(4.0, 1e-5, 50, 651, 650, 1)


class TestPrivacyBudget:
    def test_spent_matches_composition(self):
        b = PrivacyBudget(100.0, 650, 650, 1, 1e-7, 5e-6, rounds=50)
        for t in (1, 10, 50):
            assert b.spent(t) == compose_strong(b.eps_round, 1e-7, t, 5e-6)
        assert b.spent(0) == (0.0, 0.0)
        assert b.total() == b.spent(50)

    def test_falls_back_to_naive_outside_validity(self):
        b = PrivacyBudget(50.0, 10, 5, 2, 1e-7, 5e-6)
        assert b.spent(3) == (150.0, 0.0)

    def test_no_noise(self):
        b = PrivacyBudget(math.inf, 10, 5, 2, 1e-7, 5e-6)
        assert b.spent(2) == (math.inf, 0.0)
