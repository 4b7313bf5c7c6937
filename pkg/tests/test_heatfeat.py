import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import convolve, shift

from kpdiscovery.heatfeat import (confidence, covariance, default_region, extract_agents, extract_multi_peak,
                                  heatmap_features, low_confidence_keypoints, normalize, soft_argmax)

from oracles import brute_moments


def gaussian_grid(u, v, std, n=64, amp=1.0):
    xs = (np.arange(n) + 0.5) / n
    return amp * np.exp(-((xs[None] - u) ** 2 + (xs[:, None] - v) ** 2) / (2 * std**2))


def random_maps(rng, n, size=16):
    return normalize(rng.normal(0, 3, (n, size, size)))


def test_confidence_examples():
    one = np.zeros((8, 8))
    one[3, 4] = 1
    assert confidence(one) == 1.0
    assert confidence(np.full((8, 6), 1 / 48)) == pytest.approx(1 / 48)
    g = gaussian_grid(0.4, 0.6, 0.05)
    p = g / g.sum()
    assert confidence(p) == p.max()


def test_unnormalized_input_rejected():
    with pytest.raises(ValueError):
        confidence(np.ones((4, 4)))
    with pytest.raises(ValueError):
        covariance(np.full((4, 4), -1 / 16))


def test_covariance_examples():
    one = np.zeros((8, 8))
    one[2, 5] = 1
    np.testing.assert_array_equal(covariance(one), [0, 0, 0])
    row = np.array([[0.5, 0.5]])
    np.testing.assert_allclose(covariance(row, align_corners=True), [0.25, 0.0, 0.0])


def test_covariance_of_rendered_gaussian():
    s = 0.05
    g = gaussian_grid(0.5, 0.5, s)
    sxx, syy, sxy = covariance(g / g.sum())
    assert sxx == pytest.approx(s**2, rel=0.02)
    assert syy == pytest.approx(s**2, rel=0.02)
    assert abs(sxy) < 1e-12


def test_features_match_brute_force():
    rng = np.random.default_rng(0)
    maps = random_maps(rng, 20, 12)
    feats = heatmap_features(np.log(maps))
    for h, c, kp, cov in zip(maps, feats["confidence"], feats["keypoints"], feats["covariance"]):
        bc, bkp, bcov = brute_moments(h)
        assert abs(c - bc) < 1e-9
        np.testing.assert_allclose(kp, bkp, atol=1e-9)
        np.testing.assert_allclose(cov, bcov, atol=1e-9)


@given(arrays(np.float64, (10, 10), elements=st.floats(-20, 20)))
@settings(max_examples=100, deadline=None)
def test_cauchy_schwarz(raw):
    h, uv = soft_argmax(raw)
    sxx, syy, sxy = covariance(h, uv)
    assert sxx >= 0 and syy >= 0
    assert abs(sxy) <= np.sqrt(sxx * syy) + 1e-9


@given(arrays(np.float64, (12, 12), elements=st.floats(-5, 5)))
@settings(max_examples=50, deadline=None)
def test_confidence_antitone_under_blur(raw):
    h = normalize(raw)
    kernel = np.ones((3, 3)) / 9
    blurred = convolve(h, kernel, mode="wrap")
    assert confidence(blurred) <= confidence(h) + 1e-15


def test_covariance_translation_covariant():
    g = gaussian_grid(0.4, 0.45, 0.04)
    h = g / g.sum()
    moved = shift(h, (5, 7), order=0)
    c1 = covariance(h)
    c2 = covariance(moved / moved.sum())
    np.testing.assert_allclose(c1, c2, atol=1e-12)


def test_multi_peak_recovers_two_gaussians():
    raw = np.log(gaussian_grid(0.3, 0.7, 0.03) + gaussian_grid(0.75, 0.25, 0.03) + 1e-8)
    peaks = extract_multi_peak(raw, 2, sigma=0.03)
    half_cell = 0.5 / 64
    np.testing.assert_allclose(peaks.keypoints[0], [0.75, 0.25], atol=half_cell)   # smaller v first
    np.testing.assert_allclose(peaks.keypoints[1], [0.3, 0.7], atol=half_cell)
    assert not peaks.duplicate.any()


def test_multi_peak_single_agent_is_global_soft_argmax():
    raw = np.random.default_rng(1).normal(size=(16, 16))
    peaks = extract_multi_peak(raw, 1)
    h, uv = soft_argmax(raw)
    np.testing.assert_array_equal(peaks.keypoints[0], uv)
    assert peaks.confidence[0] == h.max()


def test_multi_peak_merged_peaks_flagged():
    raw = np.log(gaussian_grid(0.5, 0.5, 0.05) + 1e-8)
    peaks = extract_multi_peak(raw, 2, sigma=0.05)
    assert peaks.duplicate.sum() == 1
    np.testing.assert_allclose(peaks.keypoints[0], peaks.keypoints[1])
    with pytest.raises(ValueError):
        extract_multi_peak(raw, 0)


def test_default_region():
    assert default_region(0.05, 64) == 13


def test_extract_agents_groups_channels():
    maps = []
    for du in (0.0, 0.05, -0.05):
        maps.append(np.log(gaussian_grid(0.25 + du, 0.2, 0.03) + gaussian_grid(0.7 + du, 0.8, 0.03) + 1e-8))
    res = extract_agents(np.stack(maps), 2, sigma=0.03)
    assert res.keypoints.shape == (2, 3, 2)
    assert np.all(res.keypoints[0, :, 1] < 0.5) and np.all(res.keypoints[1, :, 1] > 0.5)


def test_low_confidence_mask():
    conf = np.array([[0.5, 0.01, 0.4], [0.6, 0.02, 0.5]])
    np.testing.assert_array_equal(low_confidence_keypoints(conf, threshold=0.1), [False, True, False])
    assert low_confidence_keypoints(conf, quantile=0.3).sum() == 1
