"""Downstream evaluation: keypoint regression, PCK, pulse spectrograms and the wind-speed fit."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


# --------------------------------------------------------------------------- keypoint regression

def percent_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean Euclidean error of normalized (u, v) points, in percent of the image side."""
    pred = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1, 2)
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1, 2)
    return float(np.linalg.norm(pred - target, axis=-1).mean() * 100.0)


class LinearKeypointRegressor(RegressorMixin, BaseEstimator):
    """Least-squares linear map from discovered to annotated coordinates, without intercept.

    Rank-deficient designs fall back to a ridge solve with ``ridge`` and warn.
    ``X`` is ``(N, 2K)`` and ``y`` is ``(N, 2M)`` in normalized coordinates.
    """

    def __init__(self, ridge: float = 1e-6):
        self.ridge = ridge

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            warnings.warn(f"design matrix is rank deficient ({rank} < {X.shape[1]}); using a ridge solve")
            self.coef_ = np.linalg.solve(X.T @ X + self.ridge * np.eye(X.shape[1]), X.T @ y)
        else:
            self.coef_ = np.linalg.lstsq(X, y, rcond=None)[0]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_

    def score(self, X, y, sample_weight=None):
        """Negative %-MSE so that larger is better, as sklearn expects."""
        return -percent_error(self.predict(X), y)


@dataclass
class RegressionResult:
    coef: np.ndarray
    train_error: float
    test_error: float | None = None
    per_group: dict = field(default_factory=dict)


def fit_keypoint_regression(discovered_train, annotated_train, discovered_test=None, annotated_test=None,
                            groups_test: Sequence | None = None) -> RegressionResult:
    """Fit the no-intercept linear regressor on train images and report %-MSE.

    Inputs are ``(N, K, 2)`` / ``(N, M, 2)`` normalized coordinates. When
    ``groups_test`` (e.g. activity names) is given, errors are also broken
    down per group.
    """
    Xtr = np.asarray(discovered_train, dtype=np.float64).reshape(len(discovered_train), -1)
    ytr = np.asarray(annotated_train, dtype=np.float64).reshape(len(annotated_train), -1)
    if len(Xtr) < Xtr.shape[1]:
        warnings.warn(f"only {len(Xtr)} training images for {Xtr.shape[1]} regression inputs")
    reg = LinearKeypointRegressor().fit(Xtr, ytr)
    result = RegressionResult(reg.coef_, percent_error(reg.predict(Xtr), ytr))
    if discovered_test is not None:
        Xte = np.asarray(discovered_test, dtype=np.float64).reshape(len(discovered_test), -1)
        yte = np.asarray(annotated_test, dtype=np.float64).reshape(len(annotated_test), -1)
        pred = reg.predict(Xte)
        result.test_error = percent_error(pred, yte)
        if groups_test is not None:
            groups = np.asarray(groups_test)
            for g in np.unique(groups):
                m = groups == g
                result.per_group[str(g)] = percent_error(pred[m], yte[m])
    return result


def pck(predicted: np.ndarray, annotated: np.ndarray, threshold: float) -> float:
    """Fraction of predicted points within ``threshold`` (inclusive) of their annotation."""
    d = np.linalg.norm(np.asarray(predicted, dtype=np.float64) - np.asarray(annotated, dtype=np.float64), axis=-1)
    return float(np.mean(d <= threshold))


# --------------------------------------------------------------------------- pulse spectrogram

@dataclass
class Spectrogram:
    frequencies: np.ndarray     # (F,)
    times: np.ndarray           # (W,) window centres in seconds
    magnitude: np.ndarray       # (F, W)
    dominant: np.ndarray        # (W,) dominant frequency per window, NaN when below the floor
    series: np.ndarray          # the analysed distance series

    @property
    def overall_dominant(self) -> float:
        mean = self.magnitude[1:].mean(axis=1)
        if not np.isfinite(self.dominant).any():
            return float("nan")
        return float(self.frequencies[1:][np.argmax(mean)])

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])


def mean_pairwise_distance(keypoints: np.ndarray) -> np.ndarray:
    """Per-frame mean distance over all keypoint pairs; ``keypoints`` is ``(T, K, 2)``."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.shape[1] < 2:
        raise ValueError("need at least two keypoints")
    pairs = np.array(list(itertools.combinations(range(kp.shape[1]), 2)))
    return np.linalg.norm(kp[:, pairs[:, 0]] - kp[:, pairs[:, 1]], axis=-1).mean(axis=1)


def select_confident(confidence: np.ndarray, n: int | None = None, threshold: float | None = None) -> np.ndarray:
    """Indices of keypoints chosen by mean confidence: the top ``n`` or those above ``threshold``."""
    mean = np.asarray(confidence, dtype=np.float64).mean(axis=0)
    if threshold is not None:
        return np.nonzero(mean >= threshold)[0]
    order = np.argsort(-mean, kind="stable")
    return np.sort(order[: n or len(order)])


def pulse_spectrogram(series_or_keypoints: np.ndarray, fps: float, window_s: float = 4.0, overlap: float = 0.5,
                      floor: float = 1e-9) -> Spectrogram:
    """Short-time magnitude spectrum of the mean inter-keypoint distance.

    Accepts either the distance series ``(T,)`` or keypoints ``(T, K, 2)``.
    Each window is mean-removed; the dominant band is the non-DC bin of
    largest magnitude, or NaN when that magnitude is below ``floor``.
    """
    x = np.asarray(series_or_keypoints, dtype=np.float64)
    if x.ndim == 3:
        x = mean_pairwise_distance(x)
    nper = int(round(window_s * fps))
    if nper < 2 or len(x) < nper:
        raise ValueError(f"series of {len(x)} samples is shorter than one {window_s}s window")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    noverlap = int(round(nper * overlap))
    f, t, sxx = signal.spectrogram(x, fs=fps, window="hann", nperseg=nper, noverlap=noverlap,
                                   detrend="constant", scaling="spectrum", mode="magnitude")
    band = sxx[1:]
    peak = band.argmax(axis=0)
    dominant = np.where(band.max(axis=0) > floor, f[1:][peak], np.nan)
    return Spectrogram(f, t, sxx, dominant, x)


# --------------------------------------------------------------------------- wind model

@dataclass
class WindSample:
    phi_bar: float
    U_bar: float
    I_u: float | None = None

    def __post_init__(self):
        if self.phi_bar < 0 or self.U_bar < 0:
            raise ValueError("phi_bar and U_bar must be nonnegative")


def hull_area(points: np.ndarray) -> float:
    """Area of the convex hull of 2-D points (monotone chain + shoelace)."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64))))
    if len(pts) < 3:
        return 0.0

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    x, y = hull[:, 0], hull[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def sway_amplitude(keypoints: np.ndarray) -> float:
    """Population standard deviation over a clip of the per-frame convex-hull area."""
    areas = np.array([hull_area(f) for f in np.asarray(keypoints)])
    return float(areas.std())


def clip_samples(keypoints: np.ndarray, fps: float, wind_speed: np.ndarray, clip_s: float = 600.0,
                 turbulence: np.ndarray | None = None) -> list[WindSample]:
    """Split a track into clips of ``clip_s`` seconds and pair each clip's sway with its mean wind speed.

    ``wind_speed`` (and optional ``turbulence``) are per-frame series aligned with ``keypoints``.
    """
    n = int(round(clip_s * fps))
    out = []
    for start in range(0, len(keypoints) - n + 1, n):
        sl = slice(start, start + n)
        iu = None if turbulence is None else float(np.mean(turbulence[sl]))
        out.append(WindSample(sway_amplitude(keypoints[sl]), float(np.mean(wind_speed[sl])), iu))
    return out


class WindSpeedModel(RegressorMixin, BaseEstimator):
    """Proportional fit ``U_bar ~ C0 * phi_bar ** exponent`` through the origin."""

    def __init__(self, exponent: float = 0.5):
        self.exponent = exponent

    def fit(self, X, y):
        phi = np.asarray(X, dtype=np.float64).reshape(-1)
        u = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(phi) != len(u) or len(phi) < 2:
            raise ValueError("need at least two (phi_bar, U_bar) samples of equal length")
        if np.any(phi < 0) or np.any(u < 0):
            raise ValueError("phi_bar and U_bar must be nonnegative")
        g = phi**self.exponent
        if not np.any(g > 0):
            raise ValueError("all sway amplitudes are zero")
        self.coef_ = float(g @ u / (g @ g))
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self.coef_ * np.asarray(X, dtype=np.float64).reshape(-1) ** self.exponent

    def score(self, X, y, sample_weight=None):
        """Coefficient of determination about the mean of ``y``."""
        u = np.asarray(y, dtype=np.float64).reshape(-1)
        resid = u - self.predict(X)
        ss_tot = np.sum((u - u.mean()) ** 2)
        return float(1.0 - resid @ resid / ss_tot) if ss_tot > 0 else float(resid @ resid == 0)


def fit_wind_model(samples: Sequence[WindSample], exponent: float = 0.5) -> tuple[float, float]:
    """Return ``(C0, R^2)`` for the proportionality fit over the samples."""
    phi = np.array([s.phi_bar for s in samples])
    u = np.array([s.U_bar for s in samples])
    model = WindSpeedModel(exponent).fit(phi, u)
    return model.coef_, model.score(phi, u)


# --------------------------------------------------------------------------- synthetic tracking error

def body_frame_tracking_error(keypoints: np.ndarray, poses: np.ndarray, n_calibration: int) -> np.ndarray:
    """Error of each keypoint against each agent after fitting a fixed body-frame offset.

    ``keypoints`` is ``(T, K, 2)`` and ``poses`` ``(T, A, 3)`` as ``(x, y, theta)``
    in the same pixel units. For every (keypoint, agent) the mean body-frame
    offset is estimated on the first ``n_calibration`` frames; the returned
    ``(K, A)`` array is the mean Euclidean error on the remaining frames of
    the prediction ``centre + R(theta) @ offset``.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.float64)
    if not 0 < n_calibration < len(kp):
        raise ValueError("n_calibration must leave frames for evaluation")
    x, y, th = poses[..., 0], poses[..., 1], poses[..., 2]            # (T, A)
    c, s = np.cos(th), np.sin(th)
    dx = kp[:, :, None, 0] - x[:, None]                               # (T, K, A)
    dy = kp[:, :, None, 1] - y[:, None]
    bx = c[:, None] * dx + s[:, None] * dy
    by = -s[:, None] * dx + c[:, None] * dy
    ox, oy = bx[:n_calibration].mean(0), by[:n_calibration].mean(0)   # (K, A)
    px = x[:, None] + c[:, None] * ox - s[:, None] * oy
    py = y[:, None] + s[:, None] * ox + c[:, None] * oy
    err = np.hypot(kp[:, :, None, 0] - px, kp[:, :, None, 1] - py)[n_calibration:]
    return err.mean(axis=0)
