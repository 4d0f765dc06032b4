import logging
from dataclasses import replace
from unittest import TestCase

import numpy as np
import pytest

from uavloc.em_learn import (ClassificationState, DegenerateSegmentError, EmConfig, apply_gain_fit,
                             canonicalize, classification_error, e_step, fit_toa_params, hard_classify,
                             initial_gain_params, m_step_gain, run_em_gain, surrogate)
from uavloc.radio_model import ChannelParams, SegmentParams
from uavloc.utils.modes import Segment

TEXTBOOK = EmConfig(denominator="responsibility")


def _mixture(rng, channel, n=2000, pi_los=0.5):
    distance = 10 ** rng.uniform(np.log10(20.0), np.log10(600.0), n)
    los = rng.random(n) < pi_los
    seg_alpha = channel.select("alpha", los)
    seg_beta = channel.select("beta", los)
    seg_sigma = channel.select("sigma", los)
    gains = seg_beta + seg_alpha * np.log10(distance) + rng.standard_normal(n) * seg_sigma
    return gains, np.log10(distance), los


def _random_channel(rng):
    def segment(beta):
        return SegmentParams(alpha=rng.uniform(-40, -15), beta=beta, sigma=rng.uniform(0.5, 4.0))
    return ChannelParams(los=segment(rng.uniform(-35, -25)), nlos=segment(rng.uniform(-60, -40)),
                         pi_los=rng.uniform(0.2, 0.8))


def test_m_step_matches_weighted_least_squares(rng):
    for _ in range(50):
        n = int(rng.integers(20, 200))
        phi = rng.uniform(1.0, 3.0, n)
        gains = -30.0 - 25.0 * phi + rng.standard_normal(n) * 3.0
        omega = rng.random(n)
        fits = m_step_gain(omega, gains, phi, TEXTBOOK)
        for segment, weights in ((Segment.LOS, omega), (Segment.NLOS, 1.0 - omega)):
            alpha, beta = np.polyfit(phi, gains, 1, w=np.sqrt(weights))
            residual = gains - beta - alpha * phi
            sigma = np.sqrt(np.sum(weights * residual ** 2) / np.sum(weights))
            fit = fits[segment]
            assert fit.alpha == pytest.approx(alpha, rel=1e-6)
            assert fit.beta == pytest.approx(beta, rel=1e-6)
            assert fit.sigma == pytest.approx(sigma, rel=1e-6)
            assert fit.pi == pytest.approx(np.mean(weights), rel=1e-6)


def test_m_step_maximizes_the_bound(channel, rng):
    gains, phi, _ = _mixture(rng, channel, n=500)
    omega = e_step(channel, 10 ** phi, gains)
    best = apply_gain_fit(channel, m_step_gain(omega, gains, phi, TEXTBOOK))
    value = surrogate(best, omega, gains, phi)
    for field in ("alpha", "beta", "sigma"):
        for segment in (Segment.LOS, Segment.NLOS):
            seg = best.segment(segment)
            for delta in (-1e-3, 1e-3):
                moved = best.with_segment(segment, replace(seg, **{field: getattr(seg, field) + delta}))
                assert surrogate(moved, omega, gains, phi) <= value
    for delta in (-1e-3, 1e-3):
        assert surrogate(replace(best, pi_los=best.pi_los + delta), omega, gains, phi) <= value


def test_total_denominator_scales_sigma_and_keeps_line(rng):
    phi = rng.uniform(1.0, 3.0, 100)
    gains = -30.0 - 25.0 * phi + rng.standard_normal(100)
    omega = np.full(100, 0.5)
    total = m_step_gain(omega, gains, phi, EmConfig())[Segment.LOS]
    textbook = m_step_gain(omega, gains, phi, TEXTBOOK)[Segment.LOS]
    assert total.alpha == pytest.approx(textbook.alpha)
    assert total.sigma == pytest.approx(textbook.sigma * np.sqrt(0.5))


def test_m_step_degenerate_segment():
    phi = np.full(10, 2.0)
    gains = np.linspace(-80.0, -70.0, 10)
    with pytest.raises(DegenerateSegmentError):
        m_step_gain(np.full(10, 0.5), gains, phi)
    fits = m_step_gain(np.full(10, 0.5), gains, phi, EmConfig(allow_degenerate=True))
    assert fits[Segment.LOS].alpha == 0.0
    assert fits[Segment.LOS].beta == pytest.approx(-75.0)


def test_e_step_is_bayes_posterior(channel):
    distance = np.array([50.0, 150.0])
    gains = np.array([-70.0, -100.0])
    phi = np.log10(distance)
    los = np.exp(-0.5 * ((gains + 32 + 22 * phi) / channel.los.sigma) ** 2) / channel.los.sigma
    nlos = np.exp(-0.5 * ((gains + 35 + 32 * phi) / channel.nlos.sigma) ** 2) / channel.nlos.sigma
    expected = los / (los + nlos)
    np.testing.assert_allclose(e_step(channel, distance, gains), expected, rtol=1e-9, atol=1e-300)


def test_e_step_rejects_non_positive_distance(channel):
    with pytest.raises(ValueError):
        e_step(channel, np.array([0.0]), np.array([-70.0]))


def test_canonicalize_swaps_weaker_los(channel):
    omega = np.array([0.9, 0.2])
    params, flipped = canonicalize(channel.swapped(), omega, np.array([1.5, 2.5]))
    assert params.los == channel.los
    np.testing.assert_allclose(flipped, 1.0 - omega)
    params, same = canonicalize(channel, omega, np.array([1.5, 2.5]))
    assert params == channel and same is omega


def test_fit_toa_clamps_los_bias(channel):
    distance = np.array([100.0, 100.0, 200.0, 200.0])
    toa = distance + np.array([1.0, 3.0, 45.0, 55.0])
    omega = np.array([1.0, 1.0, 0.0, 0.0])
    params = fit_toa_params(omega, toa, distance, channel, TEXTBOOK)
    assert params.los.mu_tau == 0.0
    assert params.los.sigma_tau == pytest.approx(1.0)
    assert params.nlos.mu_tau == pytest.approx(50.0)
    assert params.nlos.sigma_tau == pytest.approx(5.0)


def test_fit_toa_on_exact_ranges_hits_the_sigma_floor(channel):
    distance = np.array([80.0, 150.0, 260.0])
    params = fit_toa_params(np.ones(3), distance, distance, channel)
    assert params.los.mu_tau == 0.0
    assert params.los.sigma_tau == EmConfig().min_sigma


def test_fit_toa_keeps_prior_without_mass(channel, caplog):
    distance = np.array([100.0, 200.0])
    with caplog.at_level(logging.WARNING):
        params = fit_toa_params(np.ones(2), distance + 1.0, distance, channel, TEXTBOOK)
    assert params.nlos == channel.nlos
    assert "no responsibility mass" in caplog.text


def test_hard_classify_tie_goes_to_nlos():
    shapes = {"uav_ue": (1, 2), "bs_uav": (1, 1), "bs_ue": (1, 2)}
    soft = ClassificationState.from_pooled(np.array([0.5, 0.51, 0.0, 1.0, 0.49]), shapes)
    labels = hard_classify(soft).pooled_labels()
    np.testing.assert_array_equal(labels, [False, True, False, True, False])


def test_classification_frame():
    shapes = {"uav_ue": (1, 2), "bs_uav": (1, 1), "bs_ue": (1, 2)}
    frame = hard_classify(ClassificationState.from_pooled(np.array([0.9, 0.1, 0.6, 0.0, 1.0]), shapes)).to_frame()
    assert list(frame["family"]) == ["uav_ue", "uav_ue", "bs_uav", "bs_ue", "bs_ue"]
    assert list(frame["los"]) == [True, False, True, False, True]
    np.testing.assert_array_equal(frame["col"], [0, 1, 0, 0, 1])


def test_from_pooled_rejects_wrong_length():
    shapes = {"uav_ue": (1, 2), "bs_uav": (1, 1), "bs_ue": (1, 2)}
    with pytest.raises(ValueError):
        ClassificationState.from_pooled(np.zeros(4), shapes)


def test_classification_error():
    assert classification_error([True, False, True, True], [True, True, True, False]) == 0.5
    assert classification_error([], []) == 0.0
    with pytest.raises(ValueError):
        classification_error([True], [True, False])


def test_single_line_data_is_all_los(prior_channel):
    phi = np.log10(np.linspace(30.0, 500.0, 40))
    gains = -32.0 - 22.0 * phi
    start = initial_gain_params(prior_channel, gains, phi)
    assert start.los.alpha == pytest.approx(-22.0)
    assert start.nlos == prior_channel.nlos
    result = run_em_gain(EmConfig(), start, gains, phi)
    assert np.all(result.omega > 0.5)
    assert result.params.los.alpha == pytest.approx(-22.0, rel=1e-6)
    assert result.params.los.beta == pytest.approx(-32.0, rel=1e-6)


def test_initial_split_balances_the_halves(channel, rng):
    gains, phi, _ = _mixture(rng, channel, n=301)
    start = initial_gain_params(channel, gains, phi, TEXTBOOK)
    omega = e_step(start, 10 ** phi, gains)
    assert 0.2 < np.mean(omega > 0.5) < 0.8


def test_seed_from_one_distance_falls_back_to_the_template(prior_channel):
    # the upper half by residual is the pair at phi = 2
    phi = np.array([1.0, 3.0, 2.0, 2.0])
    gains = np.array([-50.0, -90.0, -60.0, -61.0])
    start = initial_gain_params(prior_channel, gains, phi)
    assert start.pi_los == 0.5
    assert (start.los.alpha, start.los.beta) == (prior_channel.los.alpha, prior_channel.los.beta)
    assert start.nlos.alpha == pytest.approx(-20.0)
    assert start.nlos.beta == pytest.approx(-30.0)


@pytest.mark.parametrize("seed", range(5))
def test_em_ignores_link_order(seed, channel):
    rng = np.random.default_rng(seed)
    gains, phi, _ = _mixture(rng, channel, n=400)
    order = rng.permutation(len(gains))
    config = EmConfig(max_iters=30)
    result = run_em_gain(config, channel, gains, phi)
    shuffled = run_em_gain(config, channel, gains[order], phi[order])
    for segment in (Segment.LOS, Segment.NLOS):
        for name in ("alpha", "beta", "sigma"):
            assert getattr(shuffled.params.segment(segment), name) == pytest.approx(
                getattr(result.params.segment(segment), name), rel=1e-9)
    assert shuffled.params.pi_los == pytest.approx(result.params.pi_los, rel=1e-9)
    np.testing.assert_allclose(shuffled.omega, result.omega[order], rtol=1e-9, atol=1e-12)


class TestRunEm(TestCase):
    logging.basicConfig(level=logging.DEBUG)
    logger = logging.getLogger(__name__)

    def test_bound_never_decreases(self):
        rng = np.random.default_rng(21)
        config = replace(TEXTBOOK, check_monotone=True, max_iters=40)
        for _ in range(100):
            truth = _random_channel(rng)
            gains, phi, _ = _mixture(rng, truth, n=300, pi_los=truth.pi_los)
            start = initial_gain_params(truth, gains, phi, config)
            result = run_em_gain(config, start, gains, phi)
            trace = np.array(result.surrogate)
            self.assertTrue(np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1])))

    def test_recovers_channel(self):
        rng = np.random.default_rng(5)
        truth = ChannelParams(los=SegmentParams(-22.0, -32.0, np.sqrt(2.0)),
                              nlos=SegmentParams(-32.0, -35.0, np.sqrt(5.0)), pi_los=0.5)
        gains, phi, los = _mixture(rng, truth, n=4000)
        start = initial_gain_params(truth, gains, phi, TEXTBOOK)
        result = run_em_gain(TEXTBOOK, start, gains, phi)
        self.assertAlmostEqual(-22.0, result.params.los.alpha, delta=0.5)
        self.assertAlmostEqual(-32.0, result.params.los.beta, delta=1.0)
        self.assertAlmostEqual(-32.0, result.params.nlos.alpha, delta=0.5)
        self.assertAlmostEqual(0.5, result.params.pi_los, delta=0.05)
        self.assertLess(classification_error(result.omega > 0.5, los), 0.01)

    def test_single_segment_collapses(self):
        rng = np.random.default_rng(9)
        truth = ChannelParams(los=SegmentParams(-22.0, -32.0, np.sqrt(2.0)),
                              nlos=SegmentParams(-32.0, -35.0, np.sqrt(5.0)), pi_los=1.0)
        gains, phi, _ = _mixture(rng, truth, n=1000, pi_los=1.0)
        start = ChannelParams(los=SegmentParams(-20.0, -30.0, 2.0), nlos=SegmentParams(-30.0, -120.0, 2.0))
        result = run_em_gain(TEXTBOOK, start, gains, phi)
        self.assertLess(1.0 - result.params.pi_los, 1e-3)
        self.assertAlmostEqual(-22.0, result.params.los.alpha, delta=0.5)

    def test_rejects_zero_sigma_start(self):
        start = ChannelParams(los=SegmentParams(-22.0, -32.0, 0.0), nlos=SegmentParams(-32.0, -35.0, 1.0))
        with self.assertRaises(ValueError):
            run_em_gain(TEXTBOOK, start, np.array([-70.0, -80.0]), np.array([1.5, 2.0]))
