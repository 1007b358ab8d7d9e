import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from prosody_priors.core import (
    GaussianSeq,
    RngStream,
    ShapeError,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_sample,
    kl_mc_estimate,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
log_stds = st.floats(-2.0, 1.5, allow_nan=False)


def _quad_kl(mq, sq, mp, sp):
    """KL(q||p) for 1-D Gaussians by numerical integration."""
    q, p = stats.norm(mq, sq), stats.norm(mp, sp)
    f = lambda z: q.pdf(z) * (q.logpdf(z) - p.logpdf(z))
    return integrate.quad(f, mq - 12 * sq, mq + 12 * sq, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


class TestGaussianKl:
    @pytest.mark.parametrize("mq,sq,mp,sp", [(0.0, 1.0, 0.0, 1.0), (0.3, 0.5, -1.0, 2.0),
                                             (2.0, 0.1, 1.5, 0.3), (-1.0, 3.0, 0.0, 0.7)])
    def test_matches_numerical_integration(self, mq, sq, mp, sp):
        q = GaussianSeq([[mq]], [[math.log(sq)]])
        p = GaussianSeq([[mp]], [[math.log(sp)]])
        _, total = gaussian_kl(q, p)
        assert total == pytest.approx(_quad_kl(mq, sq, mp, sp), abs=1e-9)

    def test_hand_value(self):
        # KL(N(0,1) || N(1,2^2)) = log 2 + (1 + 1) / 8 - 1/2
        q = GaussianSeq([[0.0]], [[0.0]])
        p = GaussianSeq([[1.0]], [[math.log(2.0)]])
        assert gaussian_kl(q, p)[1] == pytest.approx(math.log(2.0) - 0.25, abs=1e-15)

    def test_self_divergence_is_zero(self, rng):
        g = GaussianSeq(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
        per_step, total = gaussian_kl(g, g)
        assert total == 0.0
        assert np.all(per_step == 0.0)

    @given(finite, log_stds, finite, log_stds)
    def test_non_negative(self, mq, lq, mp, lp):
        q, p = GaussianSeq([[mq]], [[lq]]), GaussianSeq([[mp]], [[lp]])
        assert gaussian_kl(q, p)[1] >= -1e-12

    def test_per_step_sums_to_total(self, rng):
        q = GaussianSeq(rng.normal(size=(7, 4)), 0.3 * rng.normal(size=(7, 4)))
        p = GaussianSeq(rng.normal(size=(7, 4)), 0.3 * rng.normal(size=(7, 4)))
        per_step, total = gaussian_kl(q, p)
        assert per_step.shape == (7,)
        assert per_step.sum() == pytest.approx(total, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gaussian_kl(GaussianSeq.standard(3, 2), GaussianSeq.standard(4, 2))

    def test_monte_carlo_agrees(self, rng):
        q = GaussianSeq(rng.normal(size=(2, 2)), 0.2 * rng.normal(size=(2, 2)))
        p = GaussianSeq(rng.normal(size=(2, 2)), 0.2 * rng.normal(size=(2, 2)))
        est = kl_mc_estimate(q, p, 200_000, RngStream(5))
        assert abs(est.value - gaussian_kl(q, p)[1]) < 4 * est.stderr

    def test_mc_single_sample_has_no_stderr(self):
        g = GaussianSeq.standard(1, 1)
        assert kl_mc_estimate(g, g, 1, RngStream(0)).stderr is None


class TestLogProb:
    def test_matches_scipy(self, rng):
        mean, log_std = rng.normal(size=(4, 3)), 0.5 * rng.normal(size=(4, 3))
        x = rng.normal(size=(4, 3))
        per_step, total = gaussian_log_prob(x, GaussianSeq(mean, log_std))
        ref = stats.norm(mean, np.exp(log_std)).logpdf(x).sum(axis=1)
        np.testing.assert_allclose(per_step, ref, rtol=1e-13)
        assert total == pytest.approx(ref.sum(), rel=1e-13)

    def test_integrates_to_one(self):
        mu, sigma = 0.7, 1.3
        g = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 10_000)
        dens = [math.exp(gaussian_log_prob([[v]], GaussianSeq([[mu]], [[math.log(sigma)]]))[1])
                for v in g]
        assert np.trapezoid(dens, g) == pytest.approx(1.0, abs=1e-4)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            gaussian_log_prob([[np.nan]], GaussianSeq.standard(1, 1))


class TestSampling:
    def test_zero_temperature_is_mean(self):
        g = GaussianSeq([[1.0, 2.0]], [[0.1, 0.2]])
        a = gaussian_sample(g, 0.0, RngStream(1))
        b = gaussian_sample(g, 0.0, RngStream(2))
        np.testing.assert_array_equal(a, g.mean)
        np.testing.assert_array_equal(a, b)

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            gaussian_sample(GaussianSeq.standard(1, 1), -0.1, RngStream(0))

    def test_std_scales_with_temperature(self):
        g = GaussianSeq(np.zeros((20_000, 1)), np.full((20_000, 1), math.log(2.0)))
        for t in (0.33, 0.5, 0.8):
            s = gaussian_sample(g, t, RngStream(9)).std()
            assert s == pytest.approx(2.0 * t, rel=0.03)

    def test_same_seed_same_draws(self):
        g = GaussianSeq.standard(5, 3)
        np.testing.assert_array_equal(gaussian_sample(g, 1.0, RngStream(4)),
                                      gaussian_sample(g, 1.0, RngStream(4)))


class TestRngStream:
    def test_substream_equivalence(self):
        a = RngStream(3).substream(1, 2).normal(5)
        b = RngStream(3, (1, 2)).normal(5)
        np.testing.assert_array_equal(a, b)

    def test_substreams_independent_of_draw_order(self):
        master = RngStream(11)
        master.normal(100)
        a = master.substream(4).normal(3)
        b = RngStream(11).substream(4).normal(3)
        np.testing.assert_array_equal(a, b)

    def test_distinct_keys_differ(self):
        assert not np.array_equal(RngStream(0).substream(1).normal(4),
                                  RngStream(0).substream(2).normal(4))

    def test_state_round_trip(self):
        r = RngStream(8)
        r.normal(7)
        clone = RngStream.from_state(r.get_state())
        np.testing.assert_array_equal(r.normal(4), clone.normal(4))


def test_gaussian_seq_is_read_only():
    g = GaussianSeq.standard(2, 2)
    with pytest.raises(ValueError):
        g.mean[0, 0] = 1.0


def test_gaussian_seq_shape_mismatch():
    with pytest.raises(ShapeError):
        GaussianSeq(np.zeros((2, 2)), np.zeros((2, 3)))


class TestWorkedValues:
    def test_unit_vs_std_two(self):
        q = GaussianSeq([[0.0]], [[0.0]])
        p = GaussianSeq([[0.0]], [[math.log(2.0)]])
        assert gaussian_kl(q, p)[1] == pytest.approx(0.318147, abs=1e-6)
        est = kl_mc_estimate(q, p, 1_000_000, RngStream(0))
        assert abs(est.value - 0.318147180559945) < 3 * est.stderr

    def test_unit_shift(self):
        q = GaussianSeq([[1.0]], [[0.0]])
        p = GaussianSeq.standard(1, 1)
        assert gaussian_kl(q, p)[1] == pytest.approx(0.5, abs=1e-15)

    def test_identical_standard_is_zero_per_step(self):
        per_step, _ = gaussian_kl(GaussianSeq.standard(4, 3), GaussianSeq.standard(4, 3))
        np.testing.assert_array_equal(per_step, np.zeros(4))

    def test_log_prob_hand_values(self):
        g = GaussianSeq.standard(1, 1)
        assert gaussian_log_prob([[0.0]], g)[1] == pytest.approx(-0.918939, abs=1e-6)
        assert gaussian_log_prob([[1.0]], g)[1] == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5,
                                                                 abs=1e-15)
        s = GaussianSeq([[2.0]], [[math.log(3.0)]])
        assert gaussian_log_prob([[2.0]], s)[1] == pytest.approx(
            -0.5 * math.log(2 * math.pi) - math.log(3.0), abs=1e-15)

    def test_half_temperature_std(self):
        g = GaussianSeq(np.zeros((100_000, 1)), np.zeros((100_000, 1)))
        assert gaussian_sample(g, 0.5, RngStream(21)).std() == pytest.approx(0.5, abs=0.01)

    def test_mc_of_identical_is_near_zero(self):
        g = GaussianSeq([[0.3, -1.0]], [[0.2, -0.4]])
        est = kl_mc_estimate(g, g, 1000, RngStream(0))
        assert abs(est.value) <= 3 * est.stderr + 1e-12
