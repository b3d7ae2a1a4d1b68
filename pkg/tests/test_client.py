import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ddml.client import PrivacyParams, client_update, clip, laplace_from_uniform, laplace_sample, noise_vector
from ddml.errors import EmptyBatch
from ddml.glm import ModelSpec
from ddml.privacy import gaussian_sigma


def test_clip_examples():
    assert clip(1.5, -1, 1) == 1.0
    assert clip(-0.3, -1, 1) == -0.3
    np.testing.assert_array_equal(clip(np.array([-2.0, 0.0, 2.0]), -0.1, 0.1), [-0.1, 0.0, 0.1])
    with pytest.raises(ValueError):
        clip(0.0, 1, 1)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
    st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
    st.floats(1e-4, 1.0),
)
def test_clipping_bounds_sensitivity(g1, g2, gamma):
    diff = gamma * clip(np.array(g1)) - gamma * clip(np.array(g2))
    assert np.max(np.abs(diff)) <= 2 * gamma * (1 + 1e-12)


def test_scale_formula():
    params = PrivacyParams(epsilon=1.0, gamma=0.001)
    assert params.sensitivity == pytest.approx(0.002)
    assert params.scale() == pytest.approx(0.002)
    assert params.variance() == pytest.approx(8e-6)
    model = PrivacyParams(epsilon=1.0, gamma=0.001, level="model")
    assert model.scale(33) == pytest.approx(33 * 0.002)
    narrow = PrivacyParams(epsilon=2.0, gamma=0.01, clip_lo=-0.1, clip_hi=0.1)
    assert narrow.scale() == pytest.approx(0.01 * 0.2 / 2.0)


def test_gaussian_scale_uses_calibration():
    params = PrivacyParams(epsilon=1.0, gamma=0.01, noise="gaussian", delta=1e-5)
    assert params.scale() == pytest.approx(gaussian_sigma(0.02, 1.0, 1e-5))
    assert params.variance() == pytest.approx(params.scale() ** 2)
    with pytest.raises(ValueError):
        PrivacyParams(epsilon=1.0, gamma=0.01, noise="gaussian")


def test_params_validation_and_round_trip():
    for bad in ({"epsilon": 0.0, "gamma": 1.0}, {"epsilon": 1.0, "gamma": -1.0},
                {"epsilon": 1.0, "gamma": 1.0, "clip_lo": 1.0, "clip_hi": 1.0},
                {"epsilon": 1.0, "gamma": 1.0, "level": "user"}):
        with pytest.raises(ValueError):
            PrivacyParams(**bad)
    params = PrivacyParams(epsilon=math.log(16), gamma=0.001, level="model")
    assert PrivacyParams.from_dict(params.to_dict()) == params
    noiseless = PrivacyParams(epsilon=math.inf, gamma=0.001)
    assert noiseless.to_dict()["epsilon"] is None
    assert PrivacyParams.from_dict(noiseless.to_dict()).noiseless


def test_laplace_median_and_limits():
    assert laplace_from_uniform(0.0, 1.0) == 0.0
    assert laplace_from_uniform(1e-12, 1.0) == pytest.approx(-2e-12)
    # inverse CDF: P(X <= x) = 1/2 + u for x >= 0
    u = 0.3
    x = -laplace_from_uniform(u, 2.0)
    assert 0.5 + 0.5 * (1 - math.exp(-x / 2.0)) == pytest.approx(0.5 + u)
    with pytest.raises(ValueError):
        laplace_sample(0.0, np.random.default_rng(0))


def test_laplace_variance():
    b = 0.37
    draws = laplace_sample(b, np.random.default_rng(11), size=1_000_000)
    assert abs(draws.var() / (2 * b * b) - 1) <= 0.03
    assert abs(draws.mean()) < 5 * math.sqrt(2) * b / 1000


def test_laplace_is_reproducible():
    a = laplace_sample(1.0, np.random.default_rng(5), size=10)
    b = laplace_sample(1.0, np.random.default_rng(5), size=10)
    np.testing.assert_array_equal(a, b)


def _perfect_linear(p=3, n=10, seed=0):
    spec = ModelSpec.dense("linear", p)
    rng = np.random.default_rng(seed)
    w = rng.normal(size=spec.weight_shape)
    X = rng.random((n, p))
    return spec, w, X, X @ w[0, 1:] + w[0, 0]


def test_update_identity_without_gradient_or_noise():
    spec, w, X, y = _perfect_linear()
    out = client_update(w, X, y, PrivacyParams(math.inf, 0.001), spec, np.random.default_rng(0))
    np.testing.assert_allclose(out, w, atol=1e-15)


def test_update_with_saturated_gradient():
    spec = ModelSpec.dense("linear", 4)
    X = np.ones((3, 4))
    y = np.full(3, -5.0)
    out = client_update(spec.zeros(), X, y, PrivacyParams(math.inf, 0.001), spec, np.random.default_rng(0))
    np.testing.assert_allclose(out, np.full(spec.weight_shape, -0.001))


def test_update_rejects_empty_batch():
    spec = ModelSpec.dense("linear", 2)
    with pytest.raises(EmptyBatch):
        client_update(spec.zeros(), np.zeros((0, 2)), [], PrivacyParams(1.0, 0.01), spec, np.random.default_rng(0))


def test_update_noise_matches_laplace_by_ks():
    gamma, eps = 0.01, 1.0
    spec = ModelSpec.dense("linear", 1)
    w = np.array([[0.2, -0.4]])
    X = np.array([[0.5]])
    y = X @ w[0, 1:] + w[0, 0]  # exact fit, zero gradient
    rng = np.random.default_rng(12)
    params = PrivacyParams(eps, gamma)
    diffs = np.array([client_update(w, X, y, params, spec, rng)[0, 0] - w[0, 0] for _ in range(100_000)])
    res = stats.kstest(diffs, stats.laplace(scale=2 * gamma / eps).cdf)
    assert res.pvalue > 0.01


def test_update_noise_variance():
    gamma, eps = 0.001, 1.0
    params = PrivacyParams(eps, gamma)
    noise = noise_vector(params, (100_000, 5), 5, np.random.default_rng(13))
    assert abs(noise.var() / (8 * gamma**2 / eps**2) - 1) <= 0.05


def test_update_is_deterministic_under_seed():
    spec, w, X, y = _perfect_linear(seed=3)
    params = PrivacyParams(1.0, 0.01)
    a = client_update(w, X, y + 0.3, params, spec, np.random.default_rng(9))
    b = client_update(w, X, y + 0.3, params, spec, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_channel_listener_ratio_bounded_by_exp_eps():
    # worst-case pair of clipped scalar gradients a = -1 and a' = +1
    gamma, eps = 1.0, 1.0
    rng = np.random.default_rng(14)
    n = 1_000_000
    b = 2 * gamma / eps
    out_a = gamma + laplace_sample(b, rng, size=n)
    out_b = -gamma + laplace_sample(b, rng, size=n)
    edges = np.linspace(-8, 8, 33)
    ha, _ = np.histogram(out_a, edges)
    hb, _ = np.histogram(out_b, edges)
    ok = (ha >= 5000) & (hb >= 5000)
    ratio = np.maximum(ha[ok] / hb[ok], hb[ok] / ha[ok])
    assert ratio.max() <= math.exp(eps) * 1.1
    # the bound is tight in the tails
    assert ratio.max() >= math.exp(eps) * 0.9
