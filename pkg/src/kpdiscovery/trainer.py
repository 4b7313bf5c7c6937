"""Optimisation loop with curriculum gating, rotation pseudo-labels and checkpoint/resume."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch

from .difftarget import SSIM_C1, SSIM_C2, compute_target
from .io import LOSS_COLUMNS, atomic_write_bytes, write_csv
from .model import KeypointModel, ModelConfig, NonFiniteError, rotate_maps, save_checkpoint
from .objectives import (LossWeights, PerceptualExtractor, reconstruction_loss, rotation_loss,
                         separation_loss, supervised_keypoint_loss, total_loss)

log = logging.getLogger(__name__)

STATE_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 5
    learning_rate: float = 0.001
    epochs: int = 100
    steps_per_epoch: int | None = None
    seed: int = 0
    mode: str = "self_supervised"
    checkpoint_every: int = 1            # epochs
    checkpoint_every_steps: int | None = None
    rotation: bool = True
    supervised_weight: float = 1.0
    convergence_tol: float = 0.01
    convergence_patience: int = 5
    target_kind: str = "ssim"
    ssim_window: int = 11
    ssim_c1: float = SSIM_C1
    ssim_c2: float = SSIM_C2
    negation: str = "affine"
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.mode not in ("self_supervised", "semi_supervised"):
            raise ValueError(f"unknown training mode {self.mode!r}")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "TrainConfig":
        t, tg = cfg["train"], cfg["target"]
        return cls(
            batch_size=t["batch_size"], learning_rate=t["learning_rate"], epochs=t["epochs"],
            steps_per_epoch=t["steps_per_epoch"], seed=t["seed"], mode=t["mode"],
            checkpoint_every=t["checkpoint_every"], rotation=t["rotation"], supervised_weight=t["supervised_weight"],
            convergence_tol=t["convergence_tol"], convergence_patience=t["convergence_patience"],
            target_kind=tg["kind"], ssim_window=tg["ssim"]["window"], ssim_c1=tg["ssim"]["c1"],
            ssim_c2=tg["ssim"]["c2"], negation=tg["negation"], device=t["device"],
        )


class PairDataset:
    """Frame pairs drawn from one or more videos with their difference targets."""

    def __init__(self, frames: np.ndarray, pairs: Sequence[tuple[int, int]], target_kind: str = "ssim",
                 window: int = 11, c1: float = SSIM_C1, c2: float = SSIM_C2, negation: str = "affine"):
        if len(pairs) == 0:
            raise ValueError("pair source is empty")
        self.frames = frames
        self.pairs = np.asarray(pairs, dtype=np.int64)
        self.target_kind = target_kind
        self.target_args = dict(window=window, c1=c1, c2=c2, negation=negation)

    @classmethod
    def from_videos(cls, videos: Sequence[np.ndarray], gap: int, stride: int = 1, **kwargs) -> "PairDataset":
        from .data import pair_indices

        offset, pairs = 0, []
        for v in videos:
            pairs += [(i + offset, j + offset) for i, j in pair_indices(len(v), gap, stride)]
            offset += len(v)
        frames = np.concatenate([np.asarray(v) for v in videos]) if len(videos) > 1 else np.asarray(videos[0])
        return cls(frames, pairs, **kwargs)

    def __len__(self):
        return len(self.pairs)

    def _frame(self, i):
        f = self.frames[i]
        if f.dtype == np.uint8:
            f = f.astype(np.float32) / 255.0
        return f

    def item(self, n: int):
        i, j = self.pairs[n]
        ref, fut = self._frame(i), self._frame(j)
        tgt = compute_target((ref, fut), self.target_kind, **self.target_args).map
        return ref, fut, tgt

    def batch(self, indices, device="cpu"):
        items = [self.item(n) for n in indices]

        def stack(k):
            arr = np.stack([it[k] for it in items]).astype(np.float32)
            return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(device)

        return stack(0), stack(1), stack(2)


@dataclass
class AnnotatedSet:
    """Frames with annotated keypoints for semi-supervised training.

    ``keypoints`` is ``(N, M, 2)`` in normalised (u, v); ``mapping[m]`` is the
    discovered channel that annotation ``m`` supervises.
    """

    frames: np.ndarray
    keypoints: np.ndarray
    mapping: Sequence[int]

    def batch(self, indices, device="cpu"):
        f = self.frames[indices]
        if f.dtype == np.uint8:
            f = f.astype(np.float32) / 255.0
        img = torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32)).permute(0, 3, 1, 2).to(device)
        kp = torch.from_numpy(np.asarray(self.keypoints[indices], dtype=np.float32)).to(device)
        return img, kp


@dataclass
class TrainResult:
    model: KeypointModel
    history: list[dict[str, float]]
    epochs_run: int
    converged: bool
    epoch_recon: list[float] = field(default_factory=list)


def build_model(config: ModelConfig, seed: int = 0) -> KeypointModel:
    torch.manual_seed(seed)
    return KeypointModel(config)


def rotation_angle(seed: int, step: int) -> int:
    """Quarter turns (1, 2 or 3) used at a given optimisation step; depends only on (seed, step)."""
    return int(np.random.default_rng([seed, step, 90]).integers(1, 4))


def rotation_step(model: KeypointModel, images: torch.Tensor, geometry, quarter_turns: int | Sequence[int]) -> torch.Tensor:
    """Equivariance loss for one or several right-angle rotations of ``images``.

    Pseudo labels are the rendered maps of the unrotated images rotated by the
    same angle; they are detached so only the rotated branch receives gradient.
    """
    turns = [quarter_turns] if isinstance(quarter_turns, int) else list(quarter_turns)
    loss = images.new_zeros(())
    for k in turns:
        pseudo = rotate_maps(geometry.rendered.detach(), k)
        pred = model.geometry(rotate_maps(images, k)).rendered
        loss = loss + rotation_loss(pseudo, pred)
    return loss


def converged(epoch_losses: Sequence[float], tol: float = 0.01, patience: int = 5) -> bool:
    """True when the best loss of the last ``patience`` epochs improved less than ``tol`` (relative)."""
    if len(epoch_losses) <= patience:
        return False
    before = min(epoch_losses[:-patience])
    recent = min(epoch_losses[-patience:])
    if before <= 0:
        return True
    return (before - recent) / before < tol


def _state_bytes(model, optimizer, cfg: TrainConfig, epoch, batch, step, history, epoch_recon, target_kind) -> bytes:
    buf = io.BytesIO()
    torch.save({
        "format_version": STATE_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "train_config": cfg.__dict__.copy(),
        "epoch": epoch,
        "batch": batch,
        "step": step,
        "history": history,
        "epoch_recon": epoch_recon,
        "target_kind": target_kind,
    }, buf)
    return buf.getvalue()


def write_loss_curve(path, history: Sequence[Mapping[str, float]]) -> None:
    write_csv(path, LOSS_COLUMNS, ([h[c] for c in LOSS_COLUMNS] for h in history))


def _losses(model, ref, fut, tgt, extractor, weights, config, annotated, epoch, step, curriculum, device):
    pred, geom_ref, geom_fut = model(ref, fut)
    parts = {"recon": reconstruction_loss(tgt, pred, extractor)}
    geoms = [g for g in (geom_ref, geom_fut) if g is not None]
    parts["sep"] = sum(separation_loss(g.keypoints, weights.sigma_s) for g in geoms) / len(geoms)
    if curriculum and config.rotation and weights.w_r > 0:
        base, image = (geom_ref, ref) if geom_ref is not None else (geom_fut, fut)
        parts["rot"] = rotation_step(model, image, base, rotation_angle(config.seed, step))
    else:
        parts["rot"] = pred.new_zeros(())
    if annotated is not None and config.mode == "semi_supervised":
        rng = np.random.default_rng([config.seed, step, 1])
        aidx = rng.choice(len(annotated.frames), size=min(config.batch_size, len(annotated.frames)), replace=False)
        img, kp = annotated.batch(np.sort(aidx), device)
        g = model.geometry(img)
        parts["sup"] = config.supervised_weight * supervised_keypoint_loss(
            g.keypoints, kp, annotated.mapping, model.config.sigma, model.heatmap_size)
    return total_loss(parts, weights, epoch), parts


def train(dataset: PairDataset, config: TrainConfig, model: KeypointModel, weights: LossWeights,
          extractor: PerceptualExtractor, out_dir: str | Path | None = None,
          annotated: AnnotatedSet | None = None, resume: str | Path | None = None,
          max_steps: int | None = None, callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train ``model`` on ``dataset``.

    Batches are drawn from a permutation that depends only on ``(seed, epoch)``
    and rotation angles only on ``(seed, step)``, so a run resumed from a
    checkpoint replays the same losses as an uninterrupted one.
    """
    if len(dataset) == 0:
        raise ValueError("pair source is empty")
    if config.mode == "semi_supervised" and annotated is None:
        raise ValueError("semi_supervised mode needs an annotated set")
    device = torch.device(config.device)
    model.to(device)
    extractor.to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    out = Path(out_dir) if out_dir is not None else None

    history: list[dict[str, float]] = []
    epoch_recon: list[float] = []
    start_epoch, start_batch, step = 0, 0, 0
    if resume is not None:
        state = torch.load(resume, map_location=device, weights_only=False)
        if state.get("format_version") != STATE_VERSION:
            raise ValueError("unsupported training state version")
        model.load_state_dict(state["state_dict"])
        optimizer.load_state_dict(state["optimizer"])
        start_epoch, start_batch, step = state["epoch"], state["batch"], state["step"]
        history, epoch_recon = list(state["history"]), list(state["epoch_recon"])

    n = len(dataset)
    n_batches = math.ceil(n / config.batch_size)
    if config.steps_per_epoch is not None:
        n_batches = min(n_batches, config.steps_per_epoch)
    is_converged = False
    epoch = start_epoch

    def save_state(path, epoch_, batch_):
        atomic_write_bytes(path, _state_bytes(model, optimizer, config, epoch_, batch_, step, history,
                                              epoch_recon, dataset.target_kind))

    for epoch in range(start_epoch, config.epochs):
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        curriculum = epoch > weights.curriculum_epoch
        recon_sum, recon_count = 0.0, 0
        first = start_batch if epoch == start_epoch else 0
        for b in range(first, n_batches):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            ref, fut, tgt = dataset.batch(idx, device)
            model.train()
            try:
                loss, parts = _losses(model, ref, fut, tgt, extractor, weights, config, annotated, epoch, step,
                                      curriculum, device)
            except NonFiniteError:
                loss = None
            if loss is None or not torch.isfinite(loss):
                if out is not None:
                    save_state(out / "diagnostic.pt", epoch, b)
                raise FloatingPointError(f"non-finite loss at step {step} (epoch {epoch}, batch {b})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            row = {"step": step, "recon": parts["recon"].item(), "rot": parts["rot"].item(),
                   "sep": parts["sep"].item(), "total": loss.item()}
            history.append(row)
            recon_sum += row["recon"]
            recon_count += 1
            step += 1
            if callback is not None:
                callback(step, row)
            if out is not None and config.checkpoint_every_steps and step % config.checkpoint_every_steps == 0:
                save_state(out / f"state_step{step}.pt", epoch, b + 1)
            if max_steps is not None and step >= max_steps:
                break
        if recon_count:
            epoch_recon.append(recon_sum / recon_count)
        stop = max_steps is not None and step >= max_steps
        if out is not None and ((epoch + 1) % config.checkpoint_every == 0 or stop or epoch + 1 == config.epochs):
            save_state(out / "state.pt", epoch + 1, 0)
            save_checkpoint(out / "checkpoint.pt", model, step, dataset.target_kind)
            write_loss_curve(out / "loss_curve.csv", history)
        if stop:
            break
        if converged(epoch_recon, config.convergence_tol, config.convergence_patience):
            is_converged = True
            log.info("reconstruction loss converged after %d epochs", epoch + 1)
            break
    model.eval()
    if out is not None:
        save_checkpoint(out / "checkpoint.pt", model, step, dataset.target_kind)
        write_loss_curve(out / "loss_curve.csv", history)
    return TrainResult(model, history, epoch + 1, is_converged, epoch_recon)
