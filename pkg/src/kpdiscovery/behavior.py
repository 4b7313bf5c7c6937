"""Trajectory features from keypoint tracks, a temporal-convolution frame classifier and MAP."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted

ALL_FLAGS = ("pose", "conf", "cov")


@dataclass
class FeatureSequence:
    values: np.ndarray          # (T, D)
    names: list[str]
    frames: np.ndarray          # (T,) source frame indices

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def feature_dimension(k: int, include: Iterable[str] = ALL_FLAGS, n_agents: int = 1) -> int:
    """Dimensionality produced by :func:`generic_features` for ``k`` keypoints per agent."""
    include = set(include)
    per_agent = k * (2 * ("pose" in include) + ("conf" in include) + 3 * ("cov" in include))
    per_agent += 2 * k + k * (k - 1) // 2 + k * (k - 1) * (k - 2) // 6
    return n_agents * per_agent + (n_agents * (n_agents - 1) // 2) * k * k


def _triplet_angles(kp: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    k = kp.shape[1]
    triplets = list(itertools.combinations(range(k), 3))
    if not triplets:
        return np.zeros((kp.shape[0], 0)), []
    t = np.array(triplets)
    a, m, b = kp[:, t[:, 0]], kp[:, t[:, 1]], kp[:, t[:, 2]]
    v1, v2 = a - m, b - m
    cross = v1[..., 0] * v2[..., 1] - v1[..., 1] * v2[..., 0]
    dot = (v1 * v2).sum(-1)
    return np.arctan2(np.abs(cross), dot), triplets


def _pair_distances(kp: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    pairs = list(itertools.combinations(range(kp.shape[1]), 2))
    if not pairs:
        return np.zeros((kp.shape[0], 0)), []
    p = np.array(pairs)
    return np.linalg.norm(kp[:, p[:, 0]] - kp[:, p[:, 1]], axis=-1), pairs


def _agent_features(kp, conf, cov, include, prefix):
    T, K = kp.shape[:2]
    cols, names = [], []
    if "pose" in include:
        cols.append(kp.reshape(T, -1))
        names += [f"{prefix}kp{k}_{c}" for k in range(K) for c in "uv"]
    if "conf" in include:
        if conf is None:
            raise ValueError("confidence requested but not provided")
        cols.append(conf)
        names += [f"{prefix}kp{k}_conf" for k in range(K)]
    if "cov" in include:
        if cov is None:
            raise ValueError("covariance requested but not provided")
        cols.append(cov.reshape(T, -1))
        names += [f"{prefix}kp{k}_{c}" for k in range(K) for c in ("s2x", "s2y", "s2xy")]
    if T >= 2:
        vel = np.gradient(kp, axis=0)
        acc = np.gradient(vel, axis=0)
    else:
        vel = acc = np.zeros_like(kp)
    cols.append(np.linalg.norm(vel, axis=-1))
    names += [f"{prefix}kp{k}_speed" for k in range(K)]
    cols.append(np.linalg.norm(acc, axis=-1))
    names += [f"{prefix}kp{k}_accel" for k in range(K)]
    dist, pairs = _pair_distances(kp)
    cols.append(dist)
    names += [f"{prefix}dist{i}_{j}" for i, j in pairs]
    ang, triplets = _triplet_angles(kp)
    cols.append(ang)
    names += [f"{prefix}angle{i}_{j}_{k}" for i, j, k in triplets]
    return cols, names


def generic_features(keypoints: np.ndarray, confidence: np.ndarray | None = None, covariance: np.ndarray | None = None,
                     include: Iterable[str] = ALL_FLAGS, frames: np.ndarray | None = None) -> FeatureSequence:
    """Identity-free trajectory features for every frame.

    ``keypoints`` is ``(T, K, 2)`` for one agent or ``(T, A, K, 2)`` for
    several (already identity-ordered). Per agent: coordinates, optional
    confidence and covariance, speed and acceleration magnitudes, all pairwise
    distances and one angle per unordered triplet ``i < j < k`` measured at
    ``j``. Cross-agent keypoint distances are appended for every agent pair.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    include = tuple(include)
    if unknown := set(include) - set(ALL_FLAGS):
        raise ValueError(f"unknown feature flags {sorted(unknown)}")
    if kp.ndim == 3:
        kp = kp[:, None]
        confidence = None if confidence is None else np.asarray(confidence)[:, None]
        covariance = None if covariance is None else np.asarray(covariance)[:, None]
    if kp.ndim != 4 or kp.shape[-1] != 2:
        raise ValueError("keypoints must be (T, K, 2) or (T, A, K, 2)")
    T, A = kp.shape[:2]
    if frames is None:
        frames = np.arange(T)
    frames = np.asarray(frames)
    if len(frames) != T:
        raise ValueError("frame index length does not match tracks")
    if T > 1 and np.any(np.diff(frames) != 1):
        raise ValueError("tracks have missing frames; features require a continuous sequence")
    if not np.all(np.isfinite(kp)):
        raise ValueError("tracks contain non-finite coordinates")
    cols, names = [], []
    for a in range(A):
        c, n = _agent_features(kp[:, a], None if confidence is None else confidence[:, a],
                               None if covariance is None else covariance[:, a], include, f"a{a}_" if A > 1 else "")
        cols += c
        names += n
    for a, b in itertools.combinations(range(A), 2):
        d = np.linalg.norm(kp[:, a, :, None] - kp[:, b, None, :], axis=-1).reshape(T, -1)
        cols.append(d)
        K = kp.shape[2]
        names += [f"a{a}kp{i}_a{b}kp{j}_dist" for i in range(K) for j in range(K)]
    values = np.concatenate(cols, axis=1)
    return FeatureSequence(values, names, frames)


class TrajectoryFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`generic_features` for pipelines.

    ``X`` is a mapping with ``keypoints`` and optionally ``confidence`` and
    ``covariance`` arrays, as returned by :func:`kpdiscovery.io.load_tracks`.
    """

    def __init__(self, include=ALL_FLAGS):
        self.include = include

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return generic_features(X["keypoints"], X.get("confidence"), X.get("covariance"), self.include).values


# --------------------------------------------------------------------------- classifier

class _TemporalConvNet(nn.Module):
    def __init__(self, n_in, n_classes, hidden, n_layers, kernel_size, dilation, dropout):
        super().__init__()
        self.pad = (kernel_size - 1) * dilation // 2
        layers, c = [], n_in
        for _ in range(n_layers):
            layers.append(nn.Conv1d(c, hidden, kernel_size, dilation=dilation))
            c = hidden
        self.convs = nn.ModuleList(layers)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Conv1d(hidden, n_classes, 1)

    def forward(self, x):                      # (B, D, T)
        for conv in self.convs:
            x = F.pad(x, (self.pad, self.pad), mode="replicate")
            x = self.dropout(F.relu(conv(x)))
        return self.head(x)


def _as_sequences(X) -> list[np.ndarray]:
    if isinstance(X, FeatureSequence):
        return [X.values]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [X]
    return [x.values if isinstance(x, FeatureSequence) else np.asarray(x) for x in X]


class TemporalConvClassifier(ClassifierMixin, BaseEstimator):
    """Per-frame behaviour classifier built from stacked dilated 1-D convolutions.

    With the defaults (kernel 3, three layers, ``frame_gap=2``) each output
    frame sees a 13-frame window. ``X`` is a ``(T, D)`` array or a list of
    such sequences; ``y`` matches it frame for frame.
    """

    def __init__(self, hidden=64, n_layers=3, kernel_size=3, frame_gap=2, dropout=0.0, learning_rate=1e-3,
                 weight_decay=1e-4, epochs=30, chunk=256, batch_size=16, seed=0):
        self.hidden = hidden
        self.n_layers = n_layers
        self.kernel_size = kernel_size
        self.frame_gap = frame_gap
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.chunk = chunk
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        seqs = [check_array(s, dtype=np.float64) for s in _as_sequences(X)]
        ys = [np.asarray(y)] if len(seqs) == 1 and np.asarray(y, dtype=object).ndim == 1 else [np.asarray(t) for t in y]
        if len(ys) != len(seqs) or any(len(a) != len(b) for a, b in zip(seqs, ys)):
            raise ValueError("labels and features differ in length")
        self.classes_ = np.unique(np.concatenate(ys))
        self.n_features_in_ = seqs[0].shape[1]
        self.scaler_ = StandardScaler().fit(np.concatenate(seqs))
        torch.manual_seed(self.seed)
        self.net_ = _TemporalConvNet(self.n_features_in_, len(self.classes_), self.hidden, self.n_layers,
                                     self.kernel_size, self.frame_gap, self.dropout).double()
        chunks = []
        for s, t in zip(seqs, ys):
            xs = self.scaler_.transform(s)
            yi = np.searchsorted(self.classes_, t)
            for start in range(0, len(xs), self.chunk):
                chunks.append((xs[start : start + self.chunk], yi[start : start + self.chunk]))
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate, weight_decay=self.weight_decay)
        rng = np.random.default_rng(self.seed)
        self.net_.train()
        for _ in range(self.epochs):
            order = rng.permutation(len(chunks))
            for b in range(0, len(order), self.batch_size):
                loss = 0.0
                batch = [chunks[i] for i in order[b : b + self.batch_size]]
                n = sum(len(c[1]) for c in batch)
                for xs, yi in batch:
                    logits = self.net_(torch.from_numpy(xs.T[None].copy()))[0].T
                    loss = loss + F.cross_entropy(logits, torch.from_numpy(yi), reduction="sum")
                opt.zero_grad()
                (loss / n).backward()
                opt.step()
        self.net_.eval()
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        seqs = _as_sequences(X)
        out = []
        with torch.no_grad():
            for s in seqs:
                xs = self.scaler_.transform(check_array(s, dtype=np.float64))
                logits = self.net_(torch.from_numpy(xs.T[None].copy()))[0].T
                out.append(torch.softmax(logits, dim=-1).numpy())
        return out[0] if len(out) == 1 else out

    def predict(self, X):
        proba = self.predict_proba(X)
        if isinstance(proba, list):
            return [self.classes_[p.argmax(1)] for p in proba]
        return self.classes_[proba.argmax(1)]


# --------------------------------------------------------------------------- evaluation

def average_precision(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Area under the step-wise precision-recall curve, ``sum_n (R_n - R_{n-1}) P_n``.

    Tied scores form a single threshold. The terms are summed with ``math.fsum`` so
    the result is the correctly rounded sum, independent of summation order.
    """
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.sum() == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], y_true[order]
    tp = np.cumsum(y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[last]
    n_pred = last + 1
    precision = tp / n_pred
    recall = tp / y_true.sum()
    return math.fsum((np.diff(np.r_[0.0, recall]) * precision).tolist())


def evaluate_map(probabilities: np.ndarray, labels: np.ndarray, classes: Sequence | None = None,
                 class_values: Sequence | None = None) -> tuple[float, dict]:
    """Unweighted mean of per-class AP over the classes of interest.

    ``probabilities`` is ``(T, C)`` with column ``c`` scoring ``class_values[c]``
    (default ``0..C-1``). Classes with no positive frame are skipped with a warning.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError("probabilities must be (T, C) aligned with labels")
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    values = list(class_values) if class_values is not None else list(range(probs.shape[1]))
    classes = list(classes) if classes is not None else values
    per_class = {}
    for c in classes:
        col = values.index(c)
        positives = labels == c
        if not positives.any():
            warnings.warn(f"class {c!r} has no positive frames and is excluded from MAP")
            continue
        per_class[c] = average_precision(positives, probs[:, col])
    if not per_class:
        raise ValueError("no class of interest has positive frames")
    return float(np.mean(list(per_class.values()))), per_class


def seed_sweep(make_classifier, X_train, y_train, X_test, y_test, seeds: Sequence[int],
               classes: Sequence | None = None) -> dict:
    """Train one classifier per seed and report MAP mean and standard deviation."""
    maps, per = [], []
    for s in seeds:
        clf = make_classifier(s).fit(X_train, y_train)
        proba = clf.predict_proba(X_test)
        if isinstance(proba, list):
            proba = np.concatenate(proba)
        if isinstance(y_test, (list, tuple)):
            labels = np.concatenate([np.asarray(t) for t in y_test])
        else:
            labels = np.asarray(y_test)
        m, pc = evaluate_map(proba, labels, classes, class_values=list(clf.classes_))
        maps.append(m)
        per.append(pc)
    keys = per[0].keys()
    return {
        "map_mean": float(np.mean(maps)),
        "map_std": float(np.std(maps)),
        "maps": maps,
        "per_class_mean": {k: float(np.mean([p[k] for p in per])) for k in keys},
        "per_class_std": {k: float(np.std([p[k] for p in per])) for k in keys},
    }
