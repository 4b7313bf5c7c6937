"""Encoder / pose decoder / geometry bottleneck / reconstruction decoder network."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------- geometry bottleneck

class NonFiniteError(ValueError):
    """Raised when a heatmap holds NaN or infinite values."""


def grid_coords(n: int, align_corners: bool = False, device=None, dtype=torch.float32) -> torch.Tensor:
    """Normalised coordinates of ``n`` cells.

    By default cells are addressed by their centres, ``(j + 0.5) / n``, which
    keeps maps of different resolution (and strided network outputs) aligned
    with the image. ``align_corners=True`` places the first and last cell at
    0 and 1 instead.
    """
    if align_corners:
        if n == 1:
            return torch.full((1,), 0.5, device=device, dtype=dtype)
        return torch.linspace(0.0, 1.0, n, device=device, dtype=dtype)
    return (torch.arange(n, device=device, dtype=dtype) + 0.5) / n


def spatial_softmax(raw: torch.Tensor) -> torch.Tensor:
    h, w = raw.shape[-2:]
    flat = raw.reshape(*raw.shape[:-2], h * w)
    return F.softmax(flat, dim=-1).reshape(raw.shape)


def soft_argmax(raw: torch.Tensor, align_corners: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Spatial softmax over the last two dims and the expected ``(u, v)`` location.

    ``u`` is the horizontal (column) coordinate and ``v`` the vertical one, both
    in [0, 1]. Returns ``(normalized, uv)`` with ``uv`` of shape ``raw.shape[:-2] + (2,)``.
    """
    if not torch.isfinite(raw).all():
        raise NonFiniteError("soft_argmax received non-finite heatmap values")
    h, w = raw.shape[-2:]
    prob = spatial_softmax(raw)
    xs = grid_coords(w, align_corners, raw.device, raw.dtype)
    ys = grid_coords(h, align_corners, raw.device, raw.dtype)
    u = (prob.sum(dim=-2) * xs).sum(dim=-1)
    v = (prob.sum(dim=-1) * ys).sum(dim=-1)
    return prob, torch.stack([u, v], dim=-1)


def render_gaussian(uv: torch.Tensor, std: float, resolution: tuple[int, int] | int,
                    align_corners: bool = False) -> torch.Tensor:
    """Unnormalised isotropic Gaussians ``exp(-|c - uv|^2 / (2 std^2))`` on a grid.

    ``uv`` has shape ``(..., 2)``; the output has shape ``(..., H, W)`` with a
    peak value of 1 at the keypoint.
    """
    if std <= 0:
        raise ValueError("Gaussian std must be positive")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    h, w = resolution
    xs = grid_coords(w, align_corners, uv.device, uv.dtype)
    ys = grid_coords(h, align_corners, uv.device, uv.dtype)
    gx = torch.exp(-((xs - uv[..., 0:1]) ** 2) / (2 * std**2))
    gy = torch.exp(-((ys - uv[..., 1:2]) ** 2) / (2 * std**2))
    return gy.unsqueeze(-1) * gx.unsqueeze(-2)


def rotate_maps(maps: torch.Tensor, quarter_turns: int) -> torch.Tensor:
    """Rotate image-like tensors by ``90 * quarter_turns`` degrees (counter-clockwise on screen)."""
    return torch.rot90(maps, quarter_turns, dims=(-2, -1))


def rotate_uv(uv: torch.Tensor, quarter_turns: int) -> torch.Tensor:
    """Keypoint coordinates under the same rotation as :func:`rotate_maps`."""
    u, v = uv[..., 0], uv[..., 1]
    for _ in range(quarter_turns % 4):
        u, v = v, 1.0 - u
    return torch.stack([u, v], dim=-1)


class GeometryBottleneck(NamedTuple):
    raw: torch.Tensor         # (B, K, H', W') pose decoder output
    heatmaps: torch.Tensor    # (B, K, H', W') spatial softmax, each map sums to 1
    keypoints: torch.Tensor   # (B, K, 2) (u, v) in [0, 1]
    rendered: torch.Tensor    # (B, K, H', W') Gaussian maps


# --------------------------------------------------------------------------- building blocks

def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class ResNetEncoder(nn.Module):
    """torchvision ResNet trunk returning the stride 4, 8, 16 and 32 feature maps."""

    def __init__(self, depth: int = 50, pretrained: bool = False):
        super().__init__()
        import torchvision

        builders = {18: torchvision.models.resnet18, 34: torchvision.models.resnet34, 50: torchvision.models.resnet50}
        net = builders[depth](weights="DEFAULT" if pretrained else None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        expansion = 4 if depth >= 50 else 1
        self.channels = [64 * expansion, 128 * expansion, 256 * expansion, 512 * expansion]

    def forward(self, x):
        feats = []
        x = self.stem(x)
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


class TinyEncoder(nn.Module):
    """Small residual encoder with the same stride-32 pyramid as a ResNet trunk, for CPU runs."""

    def __init__(self, widths=(16, 32, 64, 96, 128), in_channels: int = 3):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("TinyEncoder needs five stage widths")
        self.stem = conv_block(in_channels, widths[0], stride=2)
        self.layers = nn.ModuleList([BasicBlock(widths[i], widths[i + 1], stride=2) for i in range(4)])
        self.channels = list(widths[1:])

    def forward(self, x):
        feats = []
        x = self.stem(x)
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


class PoseDecoder(nn.Module):
    """Feature-pyramid head: top-down merge of the encoder pyramid to stride 4, then K heatmaps."""

    def __init__(self, in_channels: list[int], n_keypoints: int, width: int = 256):
        super().__init__()
        self.lateral = nn.ModuleList([nn.Conv2d(c, width, 1) for c in in_channels])
        self.smooth = conv_block(width, width)
        self.head = nn.Conv2d(width, n_keypoints, 1)

    def forward(self, feats):
        x = self.lateral[-1](feats[-1])
        for lat, f in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            x = F.interpolate(x, size=f.shape[-2:], mode="bilinear", align_corners=False) + lat(f)
        return self.head(self.smooth(x))


class ReconstructionDecoder(nn.Module):
    """Five upsample + conv stages; geometry maps are concatenated before every stage."""

    def __init__(self, in_channels: int, geometry_channels: int, widths: list[int], out_channels: int = 3):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("ReconstructionDecoder needs five stage widths")
        chans = [in_channels] + list(widths)
        self.geometry_channels = geometry_channels
        self.blocks = nn.ModuleList([conv_block(chans[i] + geometry_channels, chans[i + 1]) for i in range(5)])
        self.out = nn.Conv2d(widths[-1], out_channels, 3, padding=1)

    def forward(self, appearance, geometry_fn):
        x = appearance
        for block in self.blocks:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            g = geometry_fn(x.shape[-2:])
            if g.shape[1] != self.geometry_channels:
                raise ValueError(f"decoder expects {self.geometry_channels} geometry channels, got {g.shape[1]}")
            x = block(torch.cat([x, g.to(x.dtype)], dim=1))
        return self.out(x)


# --------------------------------------------------------------------------- full model

@dataclass
class ModelConfig:
    n_keypoints: int = 10
    sigma: float = 0.05
    resolution: int = 256
    encoder: str = "resnet50"          # resnet18 | resnet34 | resnet50 | tiny
    pretrained: bool = False
    encoder_widths: tuple[int, ...] = (16, 32, 64, 96, 128)
    decoder_widths: tuple[int, ...] | None = None
    pyramid_width: int = 256
    single_branch: bool = False
    heatmap_stride: int = 4

    def __post_init__(self):
        if self.n_keypoints < 1:
            raise ValueError("n_keypoints must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.resolution % 32:
            raise ValueError("resolution must be a multiple of 32")
        self.encoder_widths = tuple(self.encoder_widths)
        if self.decoder_widths is not None:
            self.decoder_widths = tuple(self.decoder_widths)

    def to_dict(self):
        return dataclasses.asdict(self)


class KeypointModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None, **kwargs):
        super().__init__()
        self.config = config = config or ModelConfig(**kwargs)
        if config.encoder == "tiny":
            self.encoder = TinyEncoder(config.encoder_widths)
        elif config.encoder.startswith("resnet"):
            self.encoder = ResNetEncoder(int(config.encoder[6:]), config.pretrained)
        else:
            raise ValueError(f"unknown encoder {config.encoder!r}")
        if config.heatmap_stride != 4:
            raise ValueError("heatmaps are produced at stride 4")
        chans = self.encoder.channels
        self.pose_decoder = PoseDecoder(chans, config.n_keypoints, config.pyramid_width)
        widths = config.decoder_widths or [max(chans[-1] // 2 ** (i + 1), 4) for i in range(5)]
        n_geom = config.n_keypoints * (1 if config.single_branch else 2)
        self.decoder = ReconstructionDecoder(chans[-1], n_geom, list(widths))

    @property
    def n_keypoints(self) -> int:
        return self.config.n_keypoints

    @property
    def heatmap_size(self) -> int:
        return self.config.resolution // self.config.heatmap_stride

    def _check_input(self, x: torch.Tensor):
        r = self.config.resolution
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[-2:] != (r, r):
            raise ValueError(f"expected input of shape (B, 3, {r}, {r}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Feature pyramid at strides 4..32; the last entry is the appearance feature."""
        self._check_input(x)
        return self.encoder(x)

    def pose_decode(self, feats: list[torch.Tensor]) -> torch.Tensor:
        return self.pose_decoder(feats)

    def bottleneck(self, raw: torch.Tensor) -> GeometryBottleneck:
        heatmaps, uv = soft_argmax(raw)
        rendered = render_gaussian(uv, self.config.sigma, raw.shape[-2:])
        return GeometryBottleneck(raw, heatmaps, uv, rendered)

    def geometry(self, x: torch.Tensor) -> GeometryBottleneck:
        return self.bottleneck(self.pose_decode(self.encode(x)))

    def reconstruct(self, appearance: torch.Tensor, geom_ref: GeometryBottleneck | None,
                    geom_fut: GeometryBottleneck) -> torch.Tensor:
        k = self.config.n_keypoints
        sets = [geom_fut] if self.config.single_branch else [geom_ref, geom_fut]
        for g in sets:
            if g is None or g.keypoints.shape[-2] != k:
                raise ValueError(f"geometry must carry {k} keypoints")
        uv = torch.cat([g.keypoints for g in sets], dim=1)

        def geometry_fn(size):
            return render_gaussian(uv, self.config.sigma, tuple(size))

        return self.decoder(appearance, geometry_fn)

    def forward(self, reference: torch.Tensor, future: torch.Tensor):
        """Return ``(prediction, geom_ref, geom_fut)``; ``geom_ref`` is None in single-branch mode."""
        self._check_input(reference)
        self._check_input(future)
        b = reference.shape[0]
        feats = self.encoder(torch.cat([reference, future], dim=0))
        appearance = feats[-1][:b]
        if self.config.single_branch:
            geom_fut = self.bottleneck(self.pose_decoder([f[b:] for f in feats]))
            geom_ref = None
        else:
            geom = self.bottleneck(self.pose_decoder(feats))
            geom_ref = GeometryBottleneck(*(t[:b] for t in geom))
            geom_fut = GeometryBottleneck(*(t[b:] for t in geom))
        return self.reconstruct(appearance, geom_ref, geom_fut), geom_ref, geom_fut


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: KeypointModel, step: int = 0, target_kind: str = "ssim", extra: dict | None = None) -> None:
    import io

    from .io import atomic_write_bytes

    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "n_keypoints": model.config.n_keypoints,
        "sigma": model.config.sigma,
        "resolution": model.config.resolution,
        "target_kind": target_kind,
        "step": step,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, map_location="cpu") -> tuple[KeypointModel, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = dict(payload["model_config"])
    cfg["pretrained"] = False
    model = KeypointModel(ModelConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
