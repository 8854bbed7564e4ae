"""Loss terms: divergence oracle, weighting, annealing, normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorcast import autodiff as ad
from factorcast.autodiff import Node, NonFiniteError
from factorcast.objective import (
    LONG_HORIZON_AUX_SCALE,
    BatchStats,
    BetaSchedule,
    LossParts,
    ObjectiveWeights,
    batch_denormalize,
    batch_normalize,
    batch_stats,
    kl_gaussian,
    mse,
    total_objective,
)


def closed_form_kl(mu_q, sig_q, mu_p, sig_p):
    return (np.log(sig_p / sig_q)
            + (sig_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sig_p ** 2) - 0.5)


# ---------------------------------------------------------------------------
# divergence
# ---------------------------------------------------------------------------

class TestKlGaussian:
    def test_standard_vs_wide(self):
        # KL(N(0,1) || N(0,2)): log 2 - 0.5 + 1/8 = 0.5 * (log 4 - 3/4)
        out = kl_gaussian(np.array([0.0]), np.array([1.0]),
                          np.array([0.0]), np.array([2.0]))
        assert float(out.value) == pytest.approx(np.log(2.0) - 0.375, abs=1e-12)

    def test_unit_scales_mean_shift(self):
        # KL(N(1,1) || N(0,1)) = 0.5
        out = kl_gaussian(np.array([1.0]), np.array([1.0]),
                          np.array([0.0]), np.array([1.0]))
        assert float(out.value) == pytest.approx(0.5, abs=1e-12)

    def test_scale_two_vs_unit(self):
        # KL(N(0,2) || N(0,1)) = -log 2 + 2 - 0.5 = 0.80685...
        out = kl_gaussian(np.array([0.0]), np.array([2.0]),
                          np.array([0.0]), np.array([1.0]))
        assert float(out.value) == pytest.approx(1.5 - np.log(2.0), abs=1e-12)

    def test_identical_distributions_zero(self):
        mu = np.array([0.3, -1.2, 4.0])
        sig = np.array([0.7, 1.1, 2.0])
        out = kl_gaussian(mu, sig, mu, sig)
        assert float(out.value) == pytest.approx(0.0, abs=1e-12)

    def test_sums_over_entries(self):
        mu_q = np.array([[1.0, 0.0], [0.0, 1.0]])
        sig_q = np.ones((2, 2))
        out = kl_gaussian(mu_q, sig_q, np.zeros((2, 2)), np.ones((2, 2)))
        assert float(out.value) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_nonpositive_scales(self):
        one = np.array([1.0])
        with pytest.raises(ValueError):
            kl_gaussian(one, np.array([0.0]), one, one)
        with pytest.raises(ValueError):
            kl_gaussian(one, one, one, np.array([-1.0]))

    def test_monte_carlo_oracle_single_pair(self):
        # E_q[log q - log p] estimated with 1e5 common-random draws
        mu_q, sig_q, mu_p, sig_p = 0.4, 1.3, -0.2, 0.8
        rng = np.random.default_rng(123)
        h = mu_q + sig_q * rng.standard_normal(100_000)
        log_q = -0.5 * ((h - mu_q) / sig_q) ** 2 - np.log(sig_q)
        log_p = -0.5 * ((h - mu_p) / sig_p) ** 2 - np.log(sig_p)
        mc = float(np.mean(log_q - log_p))
        exact = float(kl_gaussian(np.array([mu_q]), np.array([sig_q]),
                                  np.array([mu_p]), np.array([sig_p])).value)
        assert abs(mc - exact) / exact < 0.01

    def test_gradients_match_closed_form(self):
        # d/dmu_q KL = (mu_q - mu_p) / sig_p^2
        # d/dsig_q KL = sig_q / sig_p^2 - 1 / sig_q
        mu_q = Node(np.array([0.7]))
        sig_q = Node(np.array([1.4]))
        out = kl_gaussian(mu_q, sig_q, np.array([-0.3]), np.array([0.9]))
        ad.backward(out)
        np.testing.assert_allclose(mu_q.grad, [(0.7 + 0.3) / 0.81], atol=1e-12)
        np.testing.assert_allclose(sig_q.grad, [1.4 / 0.81 - 1 / 1.4], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.2, 3), st.floats(-3, 3), st.floats(0.2, 3))
    def test_nonnegative(self, mu_q, sig_q, mu_p, sig_p):
        out = kl_gaussian(np.array([mu_q]), np.array([sig_q]),
                          np.array([mu_p]), np.array([sig_p]))
        assert float(out.value) >= -1e-12


class TestMse:
    def test_worked_value(self):
        out = mse(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 0.0]))
        assert float(out.value) == pytest.approx((0 + 4 + 9) / 3)

    def test_zero_on_match(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert float(mse(x, x.copy()).value) == 0.0


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

def parts_from(pred, rec, predy, kl):
    return LossParts(Node(np.asarray(pred)), Node(np.asarray(rec)),
                     Node(np.asarray(predy)), Node(np.asarray(kl)))


class TestTotalObjective:
    def test_stock_weighting_worked_value(self):
        # 1*1 + 1*(1*1 + 1*1 + 1*0.5*1) = 3.5 at beta 1 with kl weight 0.5
        parts = parts_from(1.0, 1.0, 1.0, 1.0)
        w = ObjectiveWeights.for_task("stock_trend")
        assert float(total_objective(parts, w, beta=1.0).value) == pytest.approx(3.5)

    def test_long_horizon_weighting_worked_value(self):
        # aux terms shrink by 1e-3: 1 + 1e-3 * 2.5 = 1.0025
        parts = parts_from(1.0, 1.0, 1.0, 1.0)
        w = ObjectiveWeights.for_task("long_horizon")
        assert w.aux_scale == LONG_HORIZON_AUX_SCALE
        assert float(total_objective(parts, w, beta=1.0).value) == pytest.approx(1.0025)

    def test_beta_scales_only_kl(self):
        parts = parts_from(0.0, 0.0, 0.0, 2.0)
        w = ObjectiveWeights.for_task("stock_trend")
        assert float(total_objective(parts, w, beta=0.1).value) == pytest.approx(0.1)
        assert float(total_objective(parts, w, beta=1.0).value) == pytest.approx(1.0)

    def test_unknown_task_kind(self):
        with pytest.raises(ValueError):
            ObjectiveWeights.for_task("classification")

    def test_non_finite_part_named(self):
        parts = LossParts(Node(np.array(1.0)), float("inf"),
                          Node(np.array(0.0)), Node(np.array(0.0)))
        w = ObjectiveWeights.for_task("stock_trend")
        with pytest.raises(NonFiniteError, match="reconstruction"):
            total_objective(parts, w, beta=1.0)

    def test_zero_weight_removes_gradient_exactly(self):
        # with w_rec = 0 the reconstruction term contributes exactly 0 to
        # every adjoint, bit for bit
        rng = np.random.default_rng(5)
        x = Node(rng.standard_normal(4))
        pred = ad.reduce_sum(ad.square(x))
        rec = ad.reduce_sum(ad.tanh(x))
        predy = ad.reduce_sum(x * 2.0)
        kl = ad.reduce_sum(ad.square(x - 1.0))

        w0 = ObjectiveWeights(reconstruction=0.0)
        total_objective(LossParts(pred, rec, predy, kl), w0, 1.0)
        full = total_objective(LossParts(pred, rec, predy, kl), w0, 1.0)
        ad.backward(full)
        got = x.grad.copy()

        ad.zero_grads([x])
        without = (ad.reduce_sum(ad.square(x))
                   + ad.reduce_sum(x * 2.0)
                   + 0.5 * ad.reduce_sum(ad.square(x - 1.0)))
        ad.backward(without)
        np.testing.assert_array_equal(got, x.grad)


class TestBetaSchedule:
    def test_stages(self):
        sched = BetaSchedule()
        assert sched.beta_at(5) == 0.1
        assert sched.beta_at(19) == 0.1
        assert sched.beta_at(20) == 0.5
        assert sched.beta_at(25) == 0.5
        assert sched.beta_at(30) == 1.0
        assert sched.beta_at(40) == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            BetaSchedule(boundaries=(10,), values=(0.1,))
        with pytest.raises(ValueError):
            BetaSchedule(boundaries=(30, 20), values=(0.1, 0.5, 1.0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 200))
    def test_nondecreasing(self, epoch):
        sched = BetaSchedule()
        assert sched.beta_at(epoch) <= sched.beta_at(epoch + 1)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class TestBatchNorm:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3, 10)) * 7 + 3
        stats = batch_stats(x)
        back = batch_denormalize(batch_normalize(x, stats), stats)
        np.testing.assert_allclose(back, x, atol=1e-10)

    def test_constant_batch(self):
        x = np.full((2, 3), 5.0)
        stats = batch_stats(x)
        normed = batch_normalize(x, stats)
        np.testing.assert_array_equal(normed, np.zeros((2, 3)))
        np.testing.assert_allclose(batch_denormalize(normed, stats), x)

    def test_two_point_batch(self):
        stats = batch_stats(np.array([0.0, 2.0]))
        assert stats.mean == 1.0
        assert stats.std == pytest.approx(1.0)
        np.testing.assert_allclose(batch_normalize(np.array([0.0, 2.0]), stats),
                                   [-1.0, 1.0])

    def test_scalar_statistics_across_channels(self):
        # one mean/std for the whole block, not per channel
        x = np.array([[0.0, 0.0], [10.0, 10.0]])
        stats = batch_stats(x)
        assert stats.mean == 5.0
        normed = batch_normalize(x, stats)
        assert normed[0, 0] == normed[0, 1]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            batch_stats(np.array([]))

    def test_denormalize_node(self):
        stats = BatchStats(mean=2.0, std=3.0)
        node = Node(np.array([0.0, 1.0]))
        out = batch_denormalize(node, stats)
        assert isinstance(out, Node)
        np.testing.assert_allclose(out.value, [2.0, 5.0])
