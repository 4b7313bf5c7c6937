"""Frame ingestion, pair sampling, motion ROI cropping and a synthetic video generator."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# Default frame gaps (in frames) for the datasets the method was tuned on.
DEFAULT_GAPS = {"calms21": 6, "fly": 3, "human": 20, "jellyfish": 20, "vegetation": 60}

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class NoMotionError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    index: int
    timestamp: float | None = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"frame pixels must be HxWx3, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("frame pixels must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class FramePair:
    reference: Frame
    future: Frame
    gap: int

    def __post_init__(self):
        if self.gap < 1:
            raise ValueError("gap must be >= 1")
        if self.reference.shape != self.future.shape:
            raise ValueError("frames of a pair must have identical shape")
        if self.future.index - self.reference.index != self.gap:
            raise ValueError("future.index - reference.index must equal gap")


def to_float_frame(img: np.ndarray) -> np.ndarray:
    """Convert an image array (uint8 or float, gray or RGB) to float HxWx3 in [0, 1]."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    elif img.dtype == np.uint16:
        img = img.astype(np.float32) / 65535.0
    else:
        img = np.clip(img.astype(np.float32), 0.0, 1.0)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    return img


def resize_frame(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxWxC float image to ``size`` (square int or (H, W))."""
    import torch
    import torch.nn.functional as F

    if isinstance(size, int):
        size = (size, size)
    if img.shape[:2] == tuple(size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def load_frames(source: str | os.PathLike, resolution: int | None = None, max_frames: int | None = None) -> np.ndarray:
    """Load a directory of images, a video file or a ``.npy``/``.npz`` stack as float (N, H, W, 3)."""
    source = Path(source)
    frames = []
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if max_frames is not None:
            files = files[:max_frames]
        from PIL import Image

        for p in files:
            frames.append(to_float_frame(np.asarray(Image.open(p).convert("RGB"))))
    elif source.suffix == ".npy":
        frames = [to_float_frame(f) for f in np.load(source)[:max_frames]]
    elif source.suffix == ".npz":
        with np.load(source) as z:
            frames = [to_float_frame(f) for f in z["frames"][:max_frames]]
    else:
        try:
            import cv2
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise RuntimeError("reading video files requires opencv-python-headless") from exc
        cap = cv2.VideoCapture(str(source))
        if not cap.isOpened():
            raise FileNotFoundError(f"cannot open video {source}")
        while max_frames is None or len(frames) < max_frames:
            ok, bgr = cap.read()
            if not ok:
                break
            frames.append(to_float_frame(bgr[:, :, ::-1].copy()))
        cap.release()
    if not frames:
        raise ValueError(f"no frames found in {source}")
    if resolution is not None:
        frames = [resize_frame(f, resolution) for f in frames]
    return np.stack(frames).astype(np.float32)


def pair_indices(n_frames: int, gap: int, stride: int) -> list[tuple[int, int]]:
    if gap < 1 or stride < 1:
        raise ValueError("gap and stride must be >= 1")
    if n_frames <= gap:
        raise ValueError(f"video of {n_frames} frames is too short for gap {gap}: no pairs")
    return [(i, i + gap) for i in range(0, n_frames - gap, stride)]


def sample_pairs(video: Sequence[np.ndarray] | np.ndarray, gap: int, stride: int) -> list[FramePair]:
    """Sample non-overlapping (reference, future) pairs ``(i, i + gap)`` for ``i = 0, stride, ...``."""
    out = []
    for i, j in pair_indices(len(video), gap, stride):
        out.append(FramePair(Frame(to_float_frame(video[i]), i), Frame(to_float_frame(video[j]), j), gap))
    return out


def write_pair_manifest(pairs: Sequence[tuple[int, int]] | Sequence[FramePair], path: str | os.PathLike) -> None:
    from .io import atomic_write_text

    lines = []
    for p in pairs:
        i, j = (p.reference.index, p.future.index) if isinstance(p, FramePair) else p
        lines.append(f"{i},{j}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_pair_manifest(path: str | os.PathLike) -> list[tuple[int, int]]:
    pairs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, j = line.split(",")
            pairs.append((int(i), int(j)))
    return pairs


def motion_roi(diff_map: np.ndarray, threshold: float, box_size: int) -> tuple[int, int, int, int]:
    """Square crop ``(top, left, height, width)`` centred on the above-threshold motion mass.

    The centroid is weighted by the map values above ``threshold`` and the box
    is clamped so it stays inside the frame.
    """
    diff_map = np.asarray(diff_map, dtype=np.float64)
    if diff_map.ndim == 3:
        diff_map = diff_map.mean(axis=2)
    h, w = diff_map.shape
    if box_size > min(h, w) or box_size < 1:
        raise ValueError(f"box_size {box_size} does not fit in a {h}x{w} map")
    if np.any(diff_map < 0):
        raise ValueError("diff_map must be nonnegative")
    mask = diff_map > threshold
    if not mask.any():
        raise NoMotionError("no motion detected above threshold")
    weights = np.where(mask, diff_map, 0.0)
    rows, cols = np.nonzero(mask)
    wsum = weights[rows, cols].sum()
    cy = (rows * weights[rows, cols]).sum() / wsum
    cx = (cols * weights[rows, cols]).sum() / wsum
    # pixel centres sit at integer coordinates; a box covering [top, top + box) is centred at top + (box - 1) / 2
    top = int(round(cy - (box_size - 1) / 2))
    left = int(round(cx - (box_size - 1) / 2))
    top = min(max(top, 0), h - box_size)
    left = min(max(left, 0), w - box_size)
    return top, left, box_size, box_size


def crop(img: np.ndarray, box: tuple[int, int, int, int]) -> np.ndarray:
    top, left, bh, bw = box
    return img[top : top + bh, left : left + bw]


# --------------------------------------------------------------------------- synthetic videos

@dataclass
class Sprite:
    """An elliptical agent with a two-tone body so its heading is visible.

    ``radii`` are the semi-axes (along, across) in pixels; ``color`` and
    ``tail_color`` are RGB in [0, 1] blended linearly along the major axis.
    """

    radii: tuple[float, float] = (8.0, 5.0)
    color: tuple[float, float, float] = (0.95, 0.85, 0.2)
    tail_color: tuple[float, float, float] = (0.6, 0.15, 0.1)
    shape: str = "ellipse"

    @property
    def diameter(self) -> float:
        return 2.0 * max(self.radii)

    def part_offsets(self) -> np.ndarray:
        """Body-frame offsets of the annotated parts: centre, head, tail, left, right."""
        a, b = self.radii
        return np.array([[0.0, 0.0], [a, 0.0], [-a, 0.0], [0.0, -b], [0.0, b]])


@dataclass
class SyntheticScene:
    height: int = 64
    width: int = 64
    agents: list[Sprite] = field(default_factory=lambda: [Sprite()])
    background: np.ndarray | None = None
    # optional scripted (n_frames, 3) arrays of (x, y, theta) per agent; random walks otherwise
    trajectories: list[np.ndarray] | None = None
    part_annotations: np.ndarray | None = None
    antialias: float = 1.0
    speed: float = 1.2
    turn_rate: float = 0.08


@dataclass
class SyntheticVideo:
    frames: np.ndarray       # (T, H, W, 3) float32 in [0, 1]
    tracks: np.ndarray       # (T, n_agents, n_parts, 2) pixel (x, y)
    poses: np.ndarray        # (T, n_agents, 3) (x, y, theta)
    scene: SyntheticScene

    @property
    def normalized_tracks(self) -> np.ndarray:
        h, w = self.frames.shape[1:3]
        return (self.tracks + 0.5) / np.array([w, h])


def smooth_background(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    noise = rng.random((height, width, 3))
    bg = np.stack([gaussian_filter(noise[..., c], sigma=max(height, width) / 16, mode="wrap") for c in range(3)], -1)
    bg = (bg - bg.min()) / max(bg.max() - bg.min(), 1e-12)
    return (0.15 + 0.3 * bg).astype(np.float32)


def random_trajectory(scene: SyntheticScene, sprite: Sprite, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random walk with reflection at the borders, as (x, y, theta) per frame."""
    margin = max(sprite.radii) + scene.antialias + 1
    lo = np.array([margin, margin])
    hi = np.array([scene.width - 1 - margin, scene.height - 1 - margin])
    pos = lo + rng.random(2) * (hi - lo)
    theta = rng.uniform(-np.pi, np.pi)
    omega = 0.0
    out = np.empty((n_frames, 3))
    for t in range(n_frames):
        out[t] = pos[0], pos[1], theta
        omega = 0.9 * omega + rng.normal(0.0, scene.turn_rate)
        theta = theta + omega
        speed = scene.speed * (0.5 + rng.random())
        step = speed * np.array([np.cos(theta), np.sin(theta)])
        pos = pos + step
        for d in range(2):
            if pos[d] < lo[d] or pos[d] > hi[d]:
                edge = lo[d] if pos[d] < lo[d] else hi[d]
                pos[d] = np.clip(2 * edge - pos[d], lo[d], hi[d])
                theta = np.pi - theta if d == 0 else -theta
    return out


def part_positions(sprite: Sprite, pose: np.ndarray) -> np.ndarray:
    x, y, th = pose
    c, s = np.cos(th), np.sin(th)
    rot = np.array([[c, -s], [s, c]])
    return sprite.part_offsets() @ rot.T + np.array([x, y])


def render_sprite(canvas: np.ndarray, sprite: Sprite, pose: np.ndarray, antialias: float) -> None:
    """Alpha-composite one sprite onto ``canvas`` in place."""
    h, w = canvas.shape[:2]
    x0, y0, th = pose
    a, b = sprite.radii
    reach = int(np.ceil(max(a, b) + antialias)) + 1
    r0, r1 = max(int(np.floor(y0)) - reach, 0), min(int(np.ceil(y0)) + reach + 1, h)
    c0, c1 = max(int(np.floor(x0)) - reach, 0), min(int(np.ceil(x0)) + reach + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    dx, dy = xx - x0, yy - y0
    c, s = np.cos(th), np.sin(th)
    along = c * dx + s * dy
    across = -s * dx + c * dy
    if sprite.shape == "rect":
        sd = np.maximum(np.abs(along) - a, np.abs(across) - b)
    else:
        # first-order signed distance of an ellipse
        k = np.sqrt((along / a) ** 2 + (across / b) ** 2)
        grad = np.sqrt((along / a**2) ** 2 + (across / b**2) ** 2)
        sd = np.where(grad > 1e-9, (k - 1.0) * k / np.maximum(grad, 1e-9), -min(a, b))
    alpha = np.clip(0.5 - sd / antialias, 0.0, 1.0)[..., None]
    mix = np.clip(0.5 + 0.5 * along / a, 0.0, 1.0)[..., None]
    col = mix * np.asarray(sprite.color) + (1.0 - mix) * np.asarray(sprite.tail_color)
    patch = canvas[r0:r1, c0:c1]
    canvas[r0:r1, c0:c1] = (1.0 - alpha) * patch + alpha * col


def generate_synthetic(scene: SyntheticScene, n_frames: int, seed: int = 0) -> SyntheticVideo:
    """Render ``n_frames`` of the scene; only agents move over a static background."""
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    for sp in scene.agents:
        if sp.diameter + 2 * scene.antialias >= min(scene.height, scene.width):
            raise ValueError(f"agent of diameter {sp.diameter} does not fit in a {scene.height}x{scene.width} frame")
    rng = np.random.default_rng(seed)
    background = scene.background
    if background is None:
        background = smooth_background(scene.height, scene.width, rng)
    else:
        background = to_float_frame(background)
    if scene.trajectories is not None:
        trajs = [np.asarray(t, dtype=np.float64)[:n_frames] for t in scene.trajectories]
        if any(len(t) < n_frames for t in trajs):
            raise ValueError("scripted trajectories are shorter than n_frames")
    else:
        trajs = [random_trajectory(scene, sp, n_frames, rng) for sp in scene.agents]
    poses = np.stack(trajs, axis=1)
    frames = np.empty((n_frames, scene.height, scene.width, 3), dtype=np.float32)
    tracks = np.empty((n_frames, len(scene.agents), 5, 2))
    for t in range(n_frames):
        canvas = background.astype(np.float64).copy()
        for a, sp in enumerate(scene.agents):
            render_sprite(canvas, sp, poses[t, a], scene.antialias)
            tracks[t, a] = part_positions(sp, poses[t, a])
        frames[t] = canvas
    scene.background = background
    scene.part_annotations = tracks
    return SyntheticVideo(frames=np.clip(frames, 0.0, 1.0), tracks=tracks, poses=poses, scene=scene)


def agent_bounding_mask(video: SyntheticVideo, t: int) -> np.ndarray:
    """Union of the agents' axis-aligned support boxes (including the antialias band) at frame t."""
    scene = video.scene
    mask = np.zeros((scene.height, scene.width), dtype=bool)
    for a, sp in enumerate(scene.agents):
        x, y, _ = video.poses[t, a]
        reach = max(sp.radii) + scene.antialias
        r0, r1 = int(np.floor(y - reach)), int(np.ceil(y + reach)) + 1
        c0, c1 = int(np.floor(x - reach)), int(np.ceil(x + reach)) + 1
        mask[max(r0, 0) : max(r1, 0), max(c0, 0) : max(c1, 0)] = True
    return mask


AGENT_PALETTE = (
    ((0.95, 0.9, 0.3), (0.85, 0.3, 0.1)),
    ((0.3, 0.9, 0.95), (0.1, 0.2, 0.8)),
    ((0.5, 0.95, 0.4), (0.1, 0.5, 0.2)),
    ((0.95, 0.5, 0.9), (0.5, 0.1, 0.5)),
)


def make_scene(n_agents: int = 2, size: int = 64, diameter: float = 16.0) -> SyntheticScene:
    """Square scene with ``n_agents`` elliptical sprites of the given diameter."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    a = diameter / 2
    agents = [Sprite(radii=(a, a * 0.6), color=AGENT_PALETTE[i % len(AGENT_PALETTE)][0],
                     tail_color=AGENT_PALETTE[i % len(AGENT_PALETTE)][1]) for i in range(n_agents)]
    return SyntheticScene(height=size, width=size, agents=agents, speed=size / 64 * 1.2)


def two_agent_scene(size: int = 64, diameter: float = 16.0) -> SyntheticScene:
    return make_scene(2, size, diameter)
