"""Per-keypoint heatmap features: confidence, covariance and multi-peak extraction."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax


def grid_coords(n: int, align_corners: bool = False) -> np.ndarray:
    if align_corners:
        return np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
    return (np.arange(n) + 0.5) / n


def _check_normalized(h: np.ndarray, atol: float = 1e-5) -> None:
    sums = h.sum(axis=(-2, -1))
    if np.any(h < 0) or not np.allclose(sums, 1.0, atol=atol):
        raise ValueError("heatmap is not normalized (nonnegative, summing to 1)")


def normalize(raw: np.ndarray) -> np.ndarray:
    """Spatial softmax over the last two axes."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("heatmap contains non-finite values")
    flat = raw.reshape(*raw.shape[:-2], -1)
    return softmax(flat, axis=-1).reshape(raw.shape)


def expected_location(h: np.ndarray, align_corners: bool = False) -> np.ndarray:
    """``(u, v)`` expectation of a normalized map; ``u`` is horizontal."""
    hh, ww = h.shape[-2:]
    xs, ys = grid_coords(ww, align_corners), grid_coords(hh, align_corners)
    u = (h.sum(axis=-2) * xs).sum(axis=-1)
    v = (h.sum(axis=-1) * ys).sum(axis=-1)
    return np.stack([u, v], axis=-1)


def soft_argmax(raw: np.ndarray, align_corners: bool = False) -> tuple[np.ndarray, np.ndarray]:
    h = normalize(raw)
    return h, expected_location(h, align_corners)


def confidence(heatmap: np.ndarray) -> np.ndarray:
    """Peak value of a normalized heatmap (vectorised over leading axes)."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    _check_normalized(heatmap)
    return heatmap.max(axis=(-2, -1))


def covariance(heatmap: np.ndarray, keypoint: np.ndarray | None = None, align_corners: bool = False) -> np.ndarray:
    """Second moments ``(s2_x, s2_y, s2_xy)`` of a normalized heatmap about its keypoint.

    ``keypoint`` defaults to the map's own expectation; results are in
    normalized-coordinate units squared, with a trailing axis of size 3.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    _check_normalized(heatmap)
    if keypoint is None:
        keypoint = expected_location(heatmap, align_corners)
    keypoint = np.asarray(keypoint, dtype=np.float64)
    hh, ww = heatmap.shape[-2:]
    dx = grid_coords(ww, align_corners) - keypoint[..., 0:1]     # (..., W)
    dy = grid_coords(hh, align_corners) - keypoint[..., 1:2]     # (..., H)
    px = heatmap.sum(axis=-2)
    py = heatmap.sum(axis=-1)
    sxx = (px * dx**2).sum(-1)
    syy = (py * dy**2).sum(-1)
    sxy = np.einsum("...ij,...i,...j->...", heatmap, dy, dx)
    return np.stack([sxx, syy, sxy], axis=-1)


def heatmap_features(raw: np.ndarray, align_corners: bool = False) -> dict[str, np.ndarray]:
    """Keypoints, confidence and covariance for raw maps of shape ``(..., K, H, W)``."""
    h, uv = soft_argmax(raw, align_corners)
    return {
        "keypoints": uv,
        "confidence": h.max(axis=(-2, -1)),
        "covariance": covariance(h, uv, align_corners),
    }


# --------------------------------------------------------------------------- multiple identical agents

@dataclass
class PeakSet:
    keypoints: np.ndarray     # (n_agents, 2)
    confidence: np.ndarray    # (n_agents,)
    covariance: np.ndarray    # (n_agents, 3)
    duplicate: np.ndarray     # (n_agents,) bool, True where a peak had to be repeated


def default_region(sigma: float, size: int) -> int:
    """Suppression radius in cells: four rendering standard deviations."""
    return max(1, int(round(4 * sigma * size)))


def _local_maxima(raw: np.ndarray) -> np.ndarray:
    from scipy.ndimage import maximum_filter

    return raw >= maximum_filter(raw, size=3, mode="nearest")


def extract_multi_peak(raw: np.ndarray, n_agents: int, region: int | None = None, sigma: float = 0.05,
                       min_ratio: float = 0.1, align_corners: bool = False) -> PeakSet:
    """Locate ``n_agents`` peaks of one raw heatmap with a softmax restricted to each peak's region.

    Peaks are picked greedily by raw value with suppression radius ``region``
    (cells, Chebyshev); a candidate must be a local maximum whose softmax
    weight is at least ``min_ratio`` of the global peak. Missing peaks repeat
    the strongest one and are flagged. Results are ordered by ``v`` (top first).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if not np.all(np.isfinite(raw)):
        raise ValueError("heatmap contains non-finite values")
    hh, ww = raw.shape
    if n_agents == 1:
        h, uv = soft_argmax(raw, align_corners)
        return PeakSet(uv[None], np.array([h.max()]), covariance(h, uv, align_corners)[None], np.array([False]))
    if region is None:
        region = default_region(sigma, max(hh, ww))

    order = np.argsort(raw, axis=None)[::-1]
    is_max = _local_maxima(raw)
    top = raw.max()
    peaks: list[tuple[int, int]] = []
    for flat in order:
        r, c = divmod(int(flat), ww)
        if np.exp(raw[r, c] - top) < min_ratio:
            break
        if not is_max[r, c]:
            continue
        if all(max(abs(r - pr), abs(c - pc)) > region for pr, pc in peaks):
            peaks.append((r, c))
            if len(peaks) == n_agents:
                break
    duplicate = [False] * len(peaks)
    while len(peaks) < n_agents:
        peaks.append(peaks[0])
        duplicate.append(True)

    xs, ys = grid_coords(ww, align_corners), grid_coords(hh, align_corners)
    kps, confs, covs = [], [], []
    for r, c in peaks:
        r0, r1 = max(r - region, 0), min(r + region + 1, hh)
        c0, c1 = max(c - region, 0), min(c + region + 1, ww)
        local = normalize(raw[r0:r1, c0:c1])
        u = (local.sum(0) * xs[c0:c1]).sum()
        v = (local.sum(1) * ys[r0:r1]).sum()
        dx, dy = xs[c0:c1] - u, ys[r0:r1] - v
        covs.append([(local.sum(0) * dx**2).sum(), (local.sum(1) * dy**2).sum(), (local * np.outer(dy, dx)).sum()])
        kps.append([u, v])
        confs.append(local.max())
    kps, confs, covs, dup = np.array(kps), np.array(confs), np.array(covs), np.array(duplicate)
    idx = np.argsort(kps[:, 1], kind="stable")
    return PeakSet(kps[idx], confs[idx], covs[idx], dup[idx])


def extract_agents(raw: np.ndarray, n_agents: int, region: int | None = None, sigma: float = 0.05,
                   align_corners: bool = False) -> PeakSet:
    """Multi-peak extraction over all ``K`` channels of one frame, grouped into agents.

    Returns arrays shaped ``(n_agents, K, ...)``. Peaks of each channel are
    assigned to agents by the permutation closest to the agents' running
    centroids; agents are ordered by centroid ``v`` so the top one comes first.
    """
    per = [extract_multi_peak(ch, n_agents, region, sigma, align_corners=align_corners) for ch in raw]
    kp = np.stack([p.keypoints for p in per], axis=1)          # (A, K, 2)
    conf = np.stack([p.confidence for p in per], axis=1)
    cov = np.stack([p.covariance for p in per], axis=1)
    dup = np.stack([p.duplicate for p in per], axis=1)
    perms = list(itertools.permutations(range(n_agents)))
    for _ in range(3):
        centroids = kp.mean(axis=1)
        for k in range(kp.shape[1]):
            best = min(perms, key=lambda pm: sum(np.sum((kp[list(pm), k] - centroids) ** 2, axis=-1)))
            best = list(best)
            kp[:, k], conf[:, k], cov[:, k], dup[:, k] = kp[best, k], conf[best, k], cov[best, k], dup[best, k]
    idx = np.argsort(kp.mean(axis=1)[:, 1], kind="stable")
    return PeakSet(kp[idx], conf[idx], cov[idx], dup[idx])


def low_confidence_keypoints(conf: np.ndarray, quantile: float = 0.25, threshold: float | None = None) -> np.ndarray:
    """Boolean mask of keypoints whose mean confidence falls below a threshold.

    Used for reporting/visualisation of background keypoints only. ``conf`` is
    ``(T, K)``; the threshold defaults to the given quantile of the per-keypoint means.
    """
    mean = np.asarray(conf, dtype=np.float64).mean(axis=0)
    if threshold is None:
        threshold = np.quantile(mean, quantile)
    return mean < threshold
