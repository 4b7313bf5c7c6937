"""Spatiotemporal difference targets computed from a pair of frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .data import FramePair

TARGET_KINDS = ("ssim", "abs_diff", "raw_diff", "image")
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class DifferenceTarget:
    map: np.ndarray
    kind: str
    value_range: tuple[float, float]


def _frames(pair):
    if isinstance(pair, FramePair):
        return pair.reference.pixels, pair.future.pixels
    ref, fut = pair
    ref, fut = np.asarray(ref), np.asarray(fut)
    if ref.shape != fut.shape:
        raise ValueError(f"frame shapes differ: {ref.shape} vs {fut.shape}")
    return ref, fut


def ssim_map(x: np.ndarray, y: np.ndarray, window: int = 11, c1: float = SSIM_C1, c2: float = SSIM_C2) -> np.ndarray:
    """Local SSIM per pixel and channel with a uniform ``window`` x ``window`` patch.

    Borders use symmetric (half-sample) reflection so the output has the input
    shape. Variances are population (1/N) moments of each patch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"frame shapes differ: {x.shape} vs {y.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("SSIM window must be odd and >= 3")
    if window > min(x.shape[0], x.shape[1]):
        raise ValueError(f"SSIM window {window} larger than frame {x.shape[:2]}")
    size = (window, window) + (1,) * (x.ndim - 2)

    def mean(a):
        return uniform_filter(a, size=size, mode="reflect")

    mx, my = mean(x), mean(y)
    vx = mean(x * x) - mx * mx
    vy = mean(y * y) - my * my
    cxy = mean(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim_dissimilarity(pair, window: int = 11, c1: float = SSIM_C1, c2: float = SSIM_C2,
                       negation: str = "affine") -> DifferenceTarget:
    """Dissimilarity ``(1 - SSIM) / 2`` in [0, 1]; ``negation="sign"`` returns ``-SSIM`` in [-1, 1]."""
    ref, fut = _frames(pair)
    s = ssim_map(ref, fut, window, c1, c2)
    if negation == "sign":
        return DifferenceTarget(-s, "ssim", (-1.0, 1.0))
    if negation != "affine":
        raise ValueError(f"unknown negation {negation!r}")
    return DifferenceTarget(np.clip((1.0 - s) / 2.0, 0.0, 1.0), "ssim", (0.0, 1.0))


def abs_difference(pair) -> DifferenceTarget:
    ref, fut = _frames(pair)
    return DifferenceTarget(np.abs(fut.astype(np.float64) - ref), "abs_diff", (0.0, 1.0))


def raw_difference(pair) -> DifferenceTarget:
    """Signed ``future - reference`` stored shifted to [0, 1] as ``(d + 1) / 2``."""
    ref, fut = _frames(pair)
    d = fut.astype(np.float64) - ref
    return DifferenceTarget((d + 1.0) / 2.0, "raw_diff", (0.0, 1.0))


def image_target(pair) -> DifferenceTarget:
    """Plain future-frame reconstruction, kept for ablations against the difference targets."""
    _, fut = _frames(pair)
    return DifferenceTarget(fut.astype(np.float64), "image", (0.0, 1.0))


def compute_target(pair, kind: str = "ssim", window: int = 11, c1: float = SSIM_C1, c2: float = SSIM_C2,
                   negation: str = "affine") -> DifferenceTarget:
    if kind == "ssim":
        return ssim_dissimilarity(pair, window, c1, c2, negation)
    if kind == "abs_diff":
        return abs_difference(pair)
    if kind == "raw_diff":
        return raw_difference(pair)
    if kind == "image":
        return image_target(pair)
    raise ValueError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
