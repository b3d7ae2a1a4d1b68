import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddml import privacy
from ddml.errors import DeltaOutOfRange


def test_channel_listener_is_identity():
    assert privacy.adv1_epsilon(math.log(32)) == math.log(32)
    assert privacy.adv1_epsilon(1.0) == 1.0
    assert privacy.adv1_epsilon(0.0) == 0.0


def test_internal_threat_expected_loss():
    eps = 1.7
    assert privacy.adv2_expected_loss(2, eps) == 0.25 * eps
    assert privacy.adv2_expected_loss(20, math.log(32)) == pytest.approx(19 / 40 * math.log(32))
    assert privacy.adv2_expected_loss(10**9, eps) == pytest.approx(eps / 2)
    with pytest.raises(ValueError):
        privacy.adv2_expected_loss(1, eps)


def test_internal_threat_ratio():
    assert privacy.adv2_ratio(0.3, -0.2, 0.5, 0.5, 0.1, 1.0) == pytest.approx(1.0)
    assert privacy.adv2_ratio(0.4, 0.4, 0.0, -1.0, 0.1, 2.0) == pytest.approx(math.exp(1.0))
    # swapping the two observed instances changes nothing
    assert privacy.adv2_ratio(0.1, 0.3, 1.0, -1.0, 0.2, 1.0) == pytest.approx(
        privacy.adv2_ratio(0.3, 0.1, 1.0, -1.0, 0.2, 1.0))


@pytest.mark.parametrize("eps", [math.log(3), 1.0, math.log(16), 7.0])
def test_internal_threat_grid_maximum(eps):
    assert abs(privacy.adv2_grid_max(eps, gamma=0.01) - math.exp(eps / 2)) <= 1e-9


def test_discard_chain_closed_form():
    assert privacy.discard_markov_exact(1)[0] == 0.0
    assert privacy.discard_markov_exact(20)[0] == pytest.approx(0.95)
    for k in (2, 3, 7, 20, 60, 100):
        closed, q = privacy.discard_markov_exact(k)
        np.testing.assert_allclose(q, 1 - np.arange(k + 1) / k, rtol=0, atol=1e-12)
        assert q[1] == pytest.approx(closed, abs=1e-12)


def test_discard_transition_probabilities():
    np.testing.assert_allclose(privacy.discard_transition_probs(4), [0, 3 / 16, 4 / 16, 3 / 16, 0])


@pytest.mark.parametrize("k", [2, 10])
def test_discard_simulation_matches_chain(k):
    est, se = privacy.discard_simulate(k, 200_000, np.random.default_rng(k))
    assert abs(est - (1 - 1 / k)) <= max(3 * se, 0.002)
    assert privacy.discard_simulate(1, 10, np.random.default_rng(0)) == (0.0, 0.0)


def test_accumulation_matches_quadratic_solve():
    # eps_T solves the Gaussian calibration with sigma equal to the CLT scale
    eps, gamma, T, delta = 1.3, 0.01, 5000, 1e-6
    exact, approx = privacy.eps_after_T(eps, gamma, T, delta)
    w = math.sqrt(2) * gamma
    sigma = 2 * math.sqrt(2 * T) * gamma / eps
    L = math.log(1 / (2 * delta))
    roots = np.roots([sigma**2, -2 * w**2, -2 * w**2 * L])
    assert exact == pytest.approx(roots.max(), rel=1e-12)
    assert exact >= approx


def test_accumulation_reference_values():
    exact, approx = privacy.eps_after_T(1.0, 1.0, 10**6, 1e-8)
    assert abs(exact - approx) / approx < 0.01
    assert approx * math.sqrt(10**6) == pytest.approx(2.975, abs=0.01)
    assert privacy.eps_after_T(1.0, 1.0, 400, 1e-8)[1] == pytest.approx(privacy.eps_after_T(1.0, 1.0, 100, 1e-8)[1] / 2)
    for bad in (0.0, 0.5, 0.7):
        with pytest.raises(DeltaOutOfRange):
            privacy.eps_after_T(1.0, 1.0, 10, bad)


@settings(max_examples=100, deadline=None)
@given(
    eps=st.floats(0.05, 10),
    T=st.integers(1, 10**7),
    delta=st.floats(1e-12, 0.4),
)
def test_accumulation_monotone(eps, T, delta):
    e1 = privacy.eps_after_T(eps, 1.0, T, delta)[0]
    assert privacy.eps_after_T(eps, 1.0, T + 1, delta)[0] < e1
    assert privacy.eps_after_T(eps * 1.1, 1.0, T, delta)[0] > e1
    exact, approx = privacy.eps_after_T(eps, 1.0, T, delta)
    assert exact >= approx * (1 - 1e-12)


def test_gaussian_sigma_round_trip_and_shape():
    eps, gamma, T, delta = 1.0, 0.01, 10_000, 1e-8
    exact, _ = privacy.eps_after_T(eps, gamma, T, delta)
    sigma = privacy.gaussian_sigma(math.sqrt(2) * gamma, exact, delta)
    assert sigma <= 2 * math.sqrt(2 * T) * gamma / eps * (1 + 1e-12)
    assert privacy.gaussian_sigma(2.0, 0.5, delta) == pytest.approx(2 * privacy.gaussian_sigma(1.0, 0.5, delta))
    values = [privacy.gaussian_sigma(1.0, e, delta) for e in (0.1, 1.0, 10.0, 100.0, 1e6)]
    assert all(a > b > 0 for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        privacy.gaussian_sigma(1.0, 0.0, delta)


def test_preimage_ratio_examples():
    assert privacy.preimage_ratio(0.3, 0.3, 0.3, 0.1, 2.0) == pytest.approx(1.0)
    gamma, eps = 0.1, 3.0
    for i in range(1, 10):
        t = i / 10
        R = privacy.preimage_ratio(0.0, -t * gamma, t * gamma, gamma, eps)
        assert max(R, 1 / R) <= math.exp(eps * t) * (1 + 1e-12)


def test_single_preimage_bounded_by_eps():
    gamma, eps = 1.0, 2.0
    b1 = np.linspace(-3, 3, 601)
    R = privacy.preimage_ratio(0.0, b1, b1, gamma, eps)
    assert np.max(np.maximum(R, 1 / R)) <= math.exp(eps) * (1 + 1e-12)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_no_preimage_violations(t):
    assert privacy.preimage_violations(t, 7.0, 0.01, 20_000, np.random.default_rng(int(t * 10))) == 0


def test_preimage_probability_limits():
    rng = np.random.default_rng(0)
    assert privacy.empirical_preimage_amplification(5, 1.0, 1.0, 1e6, 2000, rng)[0] == 1.0
    small = privacy.empirical_preimage_amplification(2, 1.0, 7.0, 0.2, 20_000, rng)[0]
    large = privacy.empirical_preimage_amplification(20, 1.0, 7.0, 0.2, 20_000, rng)[0]
    assert small < large
    assert small < 0.3


def test_summary_table_and_reports():
    k, eps, T = 20, math.log(32), 10_000
    table = privacy.summary_table(k, eps, T)
    assert table == {"I": eps, "II": (k - 1) / (2 * k) * eps, "III": eps / (k * math.sqrt(T))}
    reports = privacy.analyze(k, eps, 0.01, T, 1e-8)
    assert [r.adversary for r in reports] == ["I", "II", "III"]
    assert [r.epsilon_effective for r in reports] == list(table.values())
    assert all(r.epsilon_effective >= 0 for r in reports)
