import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedvae.nn import NonFiniteError, ParameterSet, global_l2_norm
from fedvae.privacy import (DEFAULT_ORDERS, PrivacyBudget, RdpAccountant, accumulate, add_gaussian,
                            basic_composition, clip_and_sum, clip_l2, epsilon_after, rdp_step,
                            steps_until_exceeded, to_epsilon)
from oracles import gaussian_epsilon, subsampled_gaussian_rdp


def _vec(v):
    return ParameterSet({"x": np.asarray(v, dtype=np.float64)})


class TestBudget:
    @pytest.mark.parametrize("eps,delta", [(0, 1e-5), (-1, 1e-5), (1, 0), (1, 1)])
    def test_invalid(self, eps, delta):
        with pytest.raises(ValueError):
            PrivacyBudget(eps, delta)


class TestClip:
    def test_below_threshold_unchanged(self):
        v = _vec([0.3, 0.4])
        out = clip_l2(v, 1.0)
        assert out.flatten().tobytes() == v.flatten().tobytes()

    def test_scaled_to_bound(self):
        out = clip_l2(_vec([1.2, 1.6]), 1.0)
        assert global_l2_norm(out) == pytest.approx(1.0, abs=1e-15)
        assert global_l2_norm(out) <= 1.0
        np.testing.assert_allclose(out.flatten(), [0.6, 0.8])

    def test_errors(self):
        with pytest.raises(ValueError):
            clip_l2(_vec([1.0]), 0.0)
        with pytest.raises(NonFiniteError):
            clip_l2(_vec([np.inf]), 1.0)

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)),
           st.floats(1e-3, 1e3))
    @settings(max_examples=300, deadline=None)
    def test_properties(self, v, s):
        p = _vec(v)
        once = clip_l2(p, s)
        assert global_l2_norm(once) <= s
        assert clip_l2(once, s).flatten().tobytes() == once.flatten().tobytes()
        if global_l2_norm(p) <= s:
            assert once.flatten().tobytes() == p.flatten().tobytes()
        elif global_l2_norm(p) > 0:
            cos = once.flatten() @ p.flatten() / (global_l2_norm(once) * global_l2_norm(p))
            assert cos == pytest.approx(1.0)

    def test_clip_and_sum(self):
        per = ParameterSet({"x": np.array([[3.0, 4.0], [0.3, 0.4]])})
        summed, norms = clip_and_sum(per, 1.0)
        np.testing.assert_allclose(norms, [5.0, 0.5])
        np.testing.assert_allclose(summed["x"], [0.6 + 0.3, 0.8 + 0.4])


class TestNoise:
    def test_zero_sigma_identity(self):
        v = _vec(np.random.default_rng(0).standard_normal(10))
        assert add_gaussian(v, 0.0, np.random.default_rng(1)).flatten().tobytes() == v.flatten().tobytes()

    def test_empirical_std(self):
        out = add_gaussian(_vec(np.zeros(1_000_000)), 1.0, np.random.default_rng(0))
        assert abs(out["x"].std() - 1.0) < 0.01

    def test_small_sigma(self):
        out = add_gaussian(_vec(np.zeros(100_000)), 0.05, np.random.default_rng(0))
        assert out["x"].std() == pytest.approx(0.05, rel=0.02)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            add_gaussian(_vec([0.0]), -1.0, np.random.default_rng(0))


class TestRdpStep:
    def test_unsampled_closed_form(self):
        assert rdp_step(1.0, 1.0, 2) == 1.0
        assert rdp_step(1.0, 2.0, 8) == 1.0

    def test_oracle_at_reference_point(self):
        assert rdp_step(0.2, 1.0, 4) == pytest.approx(subsampled_gaussian_rdp(0.2, 1.0, 4), abs=1e-6)

    @pytest.mark.parametrize("alpha", [1.25, 1.5, 1.75, 2.5, 7.3])
    def test_fractional_orders_against_oracle(self, alpha):
        for q, z in [(0.01, 1.0), (0.2, 0.7), (0.5, 2.0)]:
            assert rdp_step(q, z, alpha) == pytest.approx(subsampled_gaussian_rdp(q, z, alpha), abs=1e-8)

    def test_errors(self):
        for args in [(0.1, 1.0, 1.0), (0.1, 0.0, 2), (0.0, 1.0, 2), (1.5, 1.0, 2)]:
            with pytest.raises(ValueError):
                rdp_step(*args)

    def test_monotonicity(self):
        for q, z in [(0.01, 0.7), (0.2, 1.0), (0.05, 2.0)]:
            vals = [rdp_step(q, z, a) for a in DEFAULT_ORDERS[:40]]
            assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
        for a in (2, 8, 32):
            by_z = [rdp_step(0.1, z, a) for z in (0.5, 0.7, 1.0, 2.0)]
            assert all(b <= x for x, b in zip(by_z, by_z[1:]))
            by_q = [rdp_step(q, 1.0, a) for q in (0.01, 0.05, 0.2, 1.0)]
            assert all(b >= x for x, b in zip(by_q, by_q[1:]))
            assert rdp_step(0.01, 1.0, a) >= 0


class TestAccountant:
    def test_accumulate_zero_and_additivity(self):
        a = RdpAccountant(0.2, 1.0)
        assert accumulate(a, 0) is a
        np.testing.assert_allclose(accumulate(a, 3).rdp, accumulate(accumulate(a, 1), 2).rdp, rtol=1e-15)
        with pytest.raises(ValueError):
            a.accumulate(-1)

    def test_linearity_at_q1(self):
        a = RdpAccountant(1.0, 1.0, (2.0,)).accumulate(100)
        assert a.rdp[0] == pytest.approx(100.0)

    def test_delta_floor(self):
        eps, order = to_epsilon(RdpAccountant(0.1, 1.0), 1e-5)
        assert eps == pytest.approx(math.log(1e5) / 255.0) and order == 256.0

    def test_single_order_conversion(self):
        acct = RdpAccountant(1.0, math.sqrt(1.0), (2.0,)).accumulate(1)
        assert acct.epsilon(1e-5) == pytest.approx(12.5129, abs=1e-4)

    def test_bad_orders_and_delta(self):
        with pytest.raises(ValueError):
            RdpAccountant(0.1, 1.0, ())
        with pytest.raises(ValueError):
            RdpAccountant(0.1, 1.0, (2.0, 1.0))
        with pytest.raises(ValueError):
            RdpAccountant(0.1, 1.0).epsilon(0.0)

    def test_epsilon_monotone_in_steps(self):
        eps = [epsilon_after(0.05, 1.0, t, 1e-5) for t in (0, 1, 5, 50, 500)]
        assert all(b >= a for a, b in zip(eps, eps[1:]))

    def test_analytic_q1(self):
        for z in (0.5, 1.0, 2.0):
            for t in (1, 100):
                assert epsilon_after(1.0, z, t, 1e-5) == pytest.approx(
                    gaussian_epsilon(t, z, 1e-5, DEFAULT_ORDERS), abs=1e-9)

    def test_snapshot_round_trip(self):
        a = RdpAccountant(0.2, 1.3).accumulate(7)
        text = a.snapshot(1e-5)
        assert "epsilon=" in text and "best_order=" in text
        b = RdpAccountant.from_snapshot(text)
        assert (b.q, b.z, b.steps, b.orders) == (a.q, a.z, a.steps, a.orders)
        np.testing.assert_array_equal(a.rdp, b.rdp)

    def test_steps_until_exceeded_matches_scan(self):
        budget = PrivacyBudget(10.0, 1e-5)
        t = steps_until_exceeded(0.2, 1.0, budget)
        assert epsilon_after(0.2, 1.0, t, 1e-5) > 10.0
        assert epsilon_after(0.2, 1.0, t - 1, 1e-5) <= 10.0


class TestComposition:
    def test_examples(self):
        assert basic_composition([(1, 1e-5), (1, 1e-5)]) == (2, 2e-5)
        assert basic_composition([]) == (0, 0)
        eps, delta = basic_composition([(0.3, 1e-6)] * 7)
        assert eps == pytest.approx(2.1) and delta == pytest.approx(7e-6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            basic_composition([(-1, 1e-5)])

    def test_rdp_never_worse(self):
        for q, z in [(0.01, 0.7), (0.2, 1.0), (0.2, 2.0)]:
            for t in (1, 10, 100):
                per = epsilon_after(q, z, 1, 1e-5 / t)
                bound, _ = basic_composition([(per, 1e-5 / t)] * t)
                assert epsilon_after(q, z, t, 1e-5) <= bound + 1e-12
