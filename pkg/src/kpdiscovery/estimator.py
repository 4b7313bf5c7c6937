"""sklearn-style wrapper around training and keypoint inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import pair_indices, resize_frame, to_float_frame
from .heatfeat import covariance
from .model import KeypointModel, ModelConfig
from .objectives import LossWeights, build_extractor
from .trainer import PairDataset, TrainConfig, build_model, train


@dataclass
class Tracks:
    keypoints: np.ndarray     # (T, K, 2) normalized (u, v)
    confidence: np.ndarray    # (T, K)
    covariance: np.ndarray    # (T, K, 3)
    raw: np.ndarray | None = None

    def as_features(self) -> np.ndarray:
        t, k = self.confidence.shape
        return np.concatenate([self.keypoints, self.confidence[..., None], self.covariance], axis=-1).reshape(t, k * 6)


def prepare_frames(frames, resolution: int) -> np.ndarray:
    """Validate a ``(T, H, W, 3)`` stack, convert to float in [0, 1] and resize if needed."""
    arr = np.asarray(frames)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected frames of shape (T, H, W, 3), got {arr.shape}")
    arr = np.stack([to_float_frame(f) for f in arr])
    if arr.shape[1:3] != (resolution, resolution):
        arr = np.stack([resize_frame(f, resolution) for f in arr])
    return arr.astype(np.float32)


@torch.no_grad()
def predict_tracks(model: KeypointModel, frames, batch_size: int = 64, keep_raw: bool = False,
                   device: str = "cpu") -> Tracks:
    """Run the pose branch on every frame; returns keypoints, confidences and covariances."""
    frames = prepare_frames(frames, model.config.resolution)
    model.eval().to(device)
    kps, confs, covs, raws = [], [], [], []
    for s in range(0, len(frames), batch_size):
        x = torch.from_numpy(frames[s : s + batch_size]).permute(0, 3, 1, 2).to(device)
        g = model.geometry(x)
        h = g.heatmaps.double().cpu().numpy()
        uv = g.keypoints.double().cpu().numpy()
        kps.append(uv)
        confs.append(h.max(axis=(-2, -1)))
        covs.append(covariance(h, uv))
        if keep_raw:
            raws.append(g.raw.cpu().numpy())
    return Tracks(np.concatenate(kps), np.concatenate(confs), np.concatenate(covs),
                  np.concatenate(raws) if keep_raw else None)


class KeypointDiscovery(TransformerMixin, BaseEstimator):
    """Discover keypoints from frame-pair reconstruction, then expose per-frame pose features.

    ``fit`` takes a ``(T, H, W, 3)`` video (or a list of videos); ``transform``
    returns ``(T, 6K)`` rows of ``[u, v, confidence, s2_x, s2_y, s2_xy]`` per keypoint.
    """

    def __init__(self, n_keypoints=10, sigma=0.05, resolution=256, gap=6, target="ssim", encoder="resnet50",
                 encoder_widths=(16, 32, 64, 96, 128), decoder_widths=None, pyramid_width=256,
                 single_branch=False, extractor="vgg16", extractor_pretrained=True, w_r=1.0, w_s=0.02,
                 sigma_s=0.05, curriculum_epoch=5, batch_size=5, learning_rate=1e-3, epochs=100,
                 steps_per_epoch=None, max_steps=None, seed=0, device="cpu"):
        self.n_keypoints = n_keypoints
        self.sigma = sigma
        self.resolution = resolution
        self.gap = gap
        self.target = target
        self.encoder = encoder
        self.encoder_widths = encoder_widths
        self.decoder_widths = decoder_widths
        self.pyramid_width = pyramid_width
        self.single_branch = single_branch
        self.extractor = extractor
        self.extractor_pretrained = extractor_pretrained
        self.w_r = w_r
        self.w_s = w_s
        self.sigma_s = sigma_s
        self.curriculum_epoch = curriculum_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.max_steps = max_steps
        self.seed = seed
        self.device = device

    def _model_config(self) -> ModelConfig:
        return ModelConfig(n_keypoints=self.n_keypoints, sigma=self.sigma, resolution=self.resolution,
                           encoder=self.encoder, encoder_widths=self.encoder_widths,
                           decoder_widths=self.decoder_widths, pyramid_width=self.pyramid_width,
                           single_branch=self.single_branch)

    def fit(self, X, y=None, out_dir=None):
        videos = X if isinstance(X, (list, tuple)) else [X]
        videos = [prepare_frames(v, self.resolution) for v in videos]
        for v in videos:
            pair_indices(len(v), self.gap, 1)       # raises when a video is too short for the gap
        dataset = PairDataset.from_videos(videos, gap=self.gap, target_kind=self.target)
        model = build_model(self._model_config(), self.seed)
        weights = LossWeights(w_r=self.w_r, w_s=self.w_s, sigma_s=self.sigma_s, curriculum_epoch=self.curriculum_epoch)
        extractor = build_extractor(self.extractor, pretrained=self.extractor_pretrained, seed=self.seed)
        cfg = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, epochs=self.epochs,
                          steps_per_epoch=self.steps_per_epoch, seed=self.seed, target_kind=self.target,
                          device=self.device)
        result = train(dataset, cfg, model, weights, extractor, out_dir=out_dir, max_steps=self.max_steps)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = 3
        return self

    def predict_keypoints(self, X) -> Tracks:
        check_is_fitted(self, "model_")
        return predict_tracks(self.model_, X, device=self.device)

    def transform(self, X) -> np.ndarray:
        return self.predict_keypoints(X).as_features()
