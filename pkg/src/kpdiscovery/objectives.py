"""Training objectives: perceptual reconstruction, rotation equivariance, separation, supervision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import render_gaussian

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LossWeights:
    w_r: float = 1.0
    w_s: float = 0.02
    curriculum_epoch: int = 5
    sigma_s: float = 0.05

    def __post_init__(self):
        if self.w_r < 0 or self.w_s < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.sigma_s <= 0:
            raise ValueError("sigma_s must be positive")
        if self.curriculum_epoch < 0:
            raise ValueError("curriculum_epoch must be >= 0")


class PerceptualExtractor(nn.Module):
    """Frozen convolutional feature network tapped after each of its blocks."""

    def __init__(self, blocks: Sequence[nn.Module], normalize: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def vgg16_extractor(n_blocks: int = 4, pretrained: bool = True) -> PerceptualExtractor:
    """VGG-16 split at its pooling layers (taps relu1_2, relu2_2, relu3_3, relu4_3)."""
    import torchvision

    features = torchvision.models.vgg16(weights="DEFAULT" if pretrained else None).features
    cuts = [0, 4, 9, 16, 23, 30]
    blocks = [nn.Sequential(*features[cuts[i] : cuts[i + 1]]) for i in range(n_blocks)]
    return PerceptualExtractor(blocks)


def tiny_extractor(widths: Sequence[int] = (8, 16, 32, 64), seed: int = 0) -> PerceptualExtractor:
    """VGG-shaped extractor with narrow, seeded random filters for CPU-scale runs."""
    gen = torch.Generator().manual_seed(seed)
    blocks, cin = [], 3
    for i, w in enumerate(widths):
        layers = [nn.MaxPool2d(2)] if i else []
        for _ in range(2):
            conv = nn.Conv2d(cin, w, 3, padding=1)
            with torch.no_grad():
                bound = (6.0 / (cin * 9)) ** 0.5
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            cin = w
        blocks.append(nn.Sequential(*layers))
    return PerceptualExtractor(blocks)


def build_extractor(name: str = "vgg16", n_blocks: int = 4, pretrained: bool = True, seed: int = 0) -> PerceptualExtractor:
    if name == "vgg16":
        return vgg16_extractor(n_blocks, pretrained)
    if name == "tiny":
        return tiny_extractor((8, 16, 32, 64)[:n_blocks], seed)
    raise ValueError(f"unknown perceptual extractor {name!r}")


def reconstruction_loss(target: torch.Tensor, prediction: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    """Sum over tapped blocks of the mean squared feature difference."""
    if target.shape != prediction.shape:
        raise ValueError(f"target {tuple(target.shape)} and prediction {tuple(prediction.shape)} differ in shape")
    loss = prediction.new_zeros(())
    for ft, fp in zip(extractor(target), extractor(prediction)):
        loss = loss + F.mse_loss(fp, ft)
    return loss


def rotation_loss(pseudo: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    """MSE between rotated (detached) geometry maps and those predicted on the rotated image."""
    if pseudo.shape != predicted.shape:
        raise ValueError(f"pseudo labels {tuple(pseudo.shape)} and predictions {tuple(predicted.shape)} differ in shape")
    return F.mse_loss(predicted, pseudo.detach())


def separation_loss(keypoints: torch.Tensor, sigma_s: float) -> torch.Tensor:
    """``sum_{i != j} exp(-|p_i - p_j|^2 / (2 sigma_s^2))``, averaged over any leading batch dims."""
    if sigma_s <= 0:
        raise ValueError("sigma_s must be positive")
    if keypoints.shape[-1] != 2 or keypoints.shape[-2] < 1:
        raise ValueError("keypoints must have shape (..., K, 2) with K >= 1")
    diff = keypoints.unsqueeze(-2) - keypoints.unsqueeze(-3)
    d2 = (diff**2).sum(-1)
    k = keypoints.shape[-2]
    off = ~torch.eye(k, dtype=torch.bool, device=keypoints.device)
    per_set = torch.exp(-d2 / (2 * sigma_s**2))[..., off].sum(-1)
    return per_set.mean() if per_set.ndim else per_set


def supervised_keypoint_loss(predicted: torch.Tensor, annotated: torch.Tensor, mapping: Sequence[int | None] | Mapping[int, int],
                             sigma: float, resolution: int | tuple[int, int] | None = None,
                             visible: torch.Tensor | None = None) -> torch.Tensor:
    """MSE between Gaussians rendered at the annotations and the mapped predicted maps.

    ``predicted`` is either keypoints ``(B, K, 2)`` (rendered here) or maps
    ``(B, K, H, W)``; ``annotated`` is ``(B, M, 2)``; ``mapping[m]`` names the
    predicted channel supervised by annotation ``m``.
    """
    m = annotated.shape[-2]
    if isinstance(mapping, Mapping):
        channels = [mapping.get(i) for i in range(m)]
    else:
        channels = list(mapping)
    if len(channels) != m or any(c is None for c in channels):
        raise ValueError("every annotated keypoint needs a predicted channel in the mapping")
    idx = torch.as_tensor(channels, dtype=torch.long, device=annotated.device)
    if predicted.ndim == annotated.ndim and predicted.shape[-1] == 2:
        if resolution is None:
            raise ValueError("resolution is required when supervising keypoint coordinates")
        pred_maps = render_gaussian(predicted.index_select(-2, idx), sigma, resolution)
    else:
        pred_maps = predicted.index_select(-3, idx)
    target = render_gaussian(annotated.to(pred_maps.dtype), sigma, tuple(pred_maps.shape[-2:]))
    err = (pred_maps - target) ** 2
    if visible is not None:
        w = visible.to(err.dtype)[..., None, None]
        return (err * w).sum() / (w.sum() * err.shape[-1] * err.shape[-2]).clamp_min(1)
    return err.mean()


def total_loss(parts: Mapping[str, torch.Tensor | float], weights: LossWeights, epoch: int):
    """``recon + 1[epoch > n] (w_r * rot + w_s * sep)``; an optional ``sup`` term is always added."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    total = parts["recon"]
    if epoch > weights.curriculum_epoch:
        total = total + weights.w_r * parts.get("rot", 0.0) + weights.w_s * parts.get("sep", 0.0)
    if "sup" in parts:
        total = total + parts["sup"]
    return total
