"""Learnable stages of the codec.

All tensors use the torch NCHW layout. Flow fields carry channel 0 = dx and
channel 1 = dy in pixels; content at ``(y, x)`` of the reference appears at
``(y + dy, x + dx)`` of the current frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

UPSAMPLER_MODES = ("deconv", "nn_conv", "bilinear_conv")
Role = Literal["mv", "residual"]


class GeometryError(ValueError):
    pass


@dataclass
class NetworkConfig:
    base_channels: int = 64
    latent_channels: int = 128
    levels: int = 4
    upsampler_mode: str = "nn_conv"
    negative_slope: float = 0.2
    kernel_size: int = 3
    flow_levels: int = 3
    flow_channels: int = 32
    mc_channels: int = 64
    disc_levels: int = 3
    disc_channels: int = 64

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1 or self.latent_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.upsampler_mode not in UPSAMPLER_MODES:
            raise ValueError(f"upsampler_mode must be one of {UPSAMPLER_MODES}")
        if self.flow_levels < 1 or self.disc_levels < 1:
            raise ValueError("flow_levels and disc_levels must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        """Small preset used for CPU experiments."""
        kw = dict(base_channels=16, latent_channels=32, levels=3, flow_levels=2,
                  flow_channels=16, mc_channels=16, disc_levels=3, disc_channels=16)
        kw.update(overrides)
        return cls(**kw)

    @property
    def stride_product(self) -> int:
        return 2 ** self.levels


def _check_same_size(*tensors: torch.Tensor) -> None:
    sizes = {tuple(t.shape[-2:]) for t in tensors}
    if len(sizes) != 1:
        raise GeometryError(f"spatial size mismatch: {sorted(sizes)}")


def _base_grid(n: int, h: int, w: int, device, dtype) -> torch.Tensor:
    ys = torch.arange(h, device=device, dtype=dtype)
    xs = torch.arange(w, device=device, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=0).unsqueeze(0).expand(n, -1, -1, -1)


def warp(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp with border clamping.

    ``out[y, x] = frame[y - dy, x - dx]`` so a frame warped by the true motion
    of a translating clip lands on the next frame.
    """
    _check_same_size(frame, flow)
    if flow.shape[1] != 2:
        raise GeometryError(f"flow must have 2 channels, got {flow.shape[1]}")
    n, _, h, w = frame.shape
    coords = _base_grid(n, h, w, frame.device, frame.dtype) - flow
    gx = 2.0 * coords[:, 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * coords[:, 1] / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(frame, grid, mode="bilinear", padding_mode="border", align_corners=True)


class FlowNet(nn.Module):
    """Coarse-to-fine residual flow estimator.

    Each pyramid level refines the upsampled coarser estimate from the
    reference warped by it, the current frame and the estimate itself.
    """

    def __init__(self, levels: int = 3, channels: int = 32):
        super().__init__()
        self.levels = levels
        self.blocks = nn.ModuleList([self._block(channels) for _ in range(levels)])

    @staticmethod
    def _block(ch: int) -> nn.Sequential:
        block = nn.Sequential(
            nn.Conv2d(8, ch, 7, padding=3), nn.ReLU(),
            nn.Conv2d(ch, ch, 5, padding=2), nn.ReLU(),
            nn.Conv2d(ch, ch // 2, 5, padding=2), nn.ReLU(),
            nn.Conv2d(ch // 2, 2, 5, padding=2),
        )
        nn.init.normal_(block[-1].weight, std=1e-3)
        nn.init.zeros_(block[-1].bias)
        return block

    def forward(self, reference: torch.Tensor, current: torch.Tensor) -> torch.Tensor:
        _check_same_size(reference, current)
        refs, curs = [reference], [current]
        for _ in range(self.levels - 1):
            refs.insert(0, F.avg_pool2d(refs[0], 2))
            curs.insert(0, F.avg_pool2d(curs[0], 2))
        n, _, h, w = refs[0].shape
        flow = reference.new_zeros(n, 2, h, w)
        for level, block in enumerate(self.blocks):
            ref, cur = refs[level], curs[level]
            if flow.shape[-2:] != ref.shape[-2:]:
                flow = 2.0 * F.interpolate(flow, size=ref.shape[-2:], mode="bilinear",
                                           align_corners=False)
            warped = warp(ref, flow)
            flow = flow + block(torch.cat([warped, cur, flow], dim=1))
        return flow


def estimate_flow(flow_net: FlowNet, reference: torch.Tensor, current: torch.Tensor) -> torch.Tensor:
    _check_same_size(reference, current)
    divisor = 2 ** (flow_net.levels - 1)
    h, w = reference.shape[-2:]
    if h % divisor or w % divisor:
        raise GeometryError(f"frame size {h}x{w} not divisible by {divisor}")
    return flow_net(reference, current)


class Encoder(nn.Module):
    """Stack of stride-2 convolutions, ReLU after all but the last."""

    def __init__(self, in_channels: int, config: NetworkConfig):
        super().__init__()
        self.levels = config.levels
        k = config.kernel_size
        layers: list[nn.Module] = []
        ch_in = in_channels
        for i in range(config.levels):
            last = i == config.levels - 1
            ch_out = config.latent_channels if last else config.base_channels
            layers.append(nn.Conv2d(ch_in, ch_out, k, stride=2, padding=(k - 1) // 2))
            if not last:
                layers.append(nn.ReLU())
            ch_in = ch_out
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        d = 2 ** self.levels
        if h % d or w % d:
            raise GeometryError(f"input {h}x{w} not divisible by {d}")
        return self.net(x)


class Upsample2x(nn.Module):
    """One x2 upsampling stage: interpolation + stride-1 conv, or a strided deconv."""

    def __init__(self, ch_in: int, ch_out: int, mode: str, kernel_size: int = 3):
        super().__init__()
        if mode not in UPSAMPLER_MODES:
            raise ValueError(f"unknown upsampler mode {mode!r}")
        self.mode = mode
        k = kernel_size
        if mode == "deconv":
            # padding/output_padding chosen so the output is exactly 2x the input
            pad = k // 2 if k % 2 else k // 2 - 1
            self.conv = nn.ConvTranspose2d(ch_in, ch_out, k, stride=2, padding=pad,
                                           output_padding=2 + 2 * pad - k)
        else:
            self.conv = nn.Conv2d(ch_in, ch_out, k, stride=1, padding="same")

    def interpolate(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "nn_conv":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "deconv":
            return self.conv(x)
        return self.conv(self.interpolate(x))


class Generator(nn.Module):
    """Mirror of :class:`Encoder` built from :class:`Upsample2x` stages."""

    def __init__(self, out_channels: int, config: NetworkConfig, mode: str | None = None):
        super().__init__()
        self.levels = config.levels
        self.latent_channels = config.latent_channels
        self.mode = mode or config.upsampler_mode
        layers: list[nn.Module] = []
        ch_in = config.latent_channels
        for i in range(config.levels):
            last = i == config.levels - 1
            ch_out = out_channels if last else config.base_channels
            layers.append(Upsample2x(ch_in, ch_out, self.mode, config.kernel_size))
            if not last:
                layers.append(nn.ReLU())
            ch_in = ch_out
        self.net = nn.Sequential(*layers)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[1] != self.latent_channels:
            raise GeometryError(
                f"latent has {latent.shape[1]} channels, expected {self.latent_channels}")
        return self.net(latent)


def role_channels(role: Role) -> int:
    if role == "mv":
        return 2
    if role == "residual":
        return 3
    raise ValueError(f"unknown role {role!r}")


def encode(x: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(x)


def generate(latent: torch.Tensor, generator: Generator) -> torch.Tensor:
    return generator(latent)


class MotionCompensation(nn.Module):
    """Refines the warped reference given the reference and the flow.

    Output is the warped frame plus a learned correction.
    """

    def __init__(self, channels: int = 64):
        super().__init__()
        self.head = nn.Sequential(nn.Conv2d(8, channels, 3, padding=1), nn.ReLU())
        self.down = nn.Sequential(
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
        )
        self.up = nn.Sequential(nn.Conv2d(2 * channels, channels, 3, padding=1), nn.ReLU())
        self.tail = nn.Conv2d(channels, 3, 3, padding=1)
        nn.init.normal_(self.tail.weight, std=1e-3)
        nn.init.zeros_(self.tail.bias)

    def forward(self, warped, reference, flow):
        _check_same_size(warped, reference, flow)
        h0 = self.head(torch.cat([warped, reference, flow], dim=1))
        h1 = self.down(h0)
        h1 = F.interpolate(h1, size=h0.shape[-2:], mode="nearest")
        h = self.up(torch.cat([h0, h1], dim=1))
        return warped + self.tail(h)


def motion_compensate(mc: MotionCompensation, warped, reference, flow) -> torch.Tensor:
    return mc(warped, reference, flow)


class Discriminator(nn.Module):
    """DCGAN-style critic: strided convs, batch norm on hidden layers, LeakyReLU,
    no pooling or dense hidden layers, raw (sigmoid-free) score per image."""

    def __init__(self, levels: int = 3, channels: int = 64, negative_slope: float = 0.2):
        super().__init__()
        self.levels = levels
        layers: list[nn.Module] = []
        ch_in = 3
        for i in range(levels):
            ch_out = channels * 2 ** i
            layers.append(nn.Conv2d(ch_in, ch_out, 4, stride=2, padding=1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(ch_out))
            layers.append(nn.LeakyReLU(negative_slope))
            ch_in = ch_out
        layers.append(nn.Conv2d(ch_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.normal_(m.weight, 1.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        h, w = frame.shape[-2:]
        if min(h, w) < 2 ** self.levels:
            raise GeometryError(f"input {h}x{w} smaller than discriminator geometry")
        return self.net(frame).mean(dim=(1, 2, 3))


def discriminate(disc: Discriminator, frame: torch.Tensor) -> torch.Tensor:
    return disc(frame)


class FeatureExtractor(nn.Module):
    """Frozen, deterministic feature map used by the perceptual loss."""

    stride: int = 1

    def train(self, mode: bool = True):
        # always evaluated in inference mode
        return super().train(False)


class IdentityExtractor(FeatureExtractor):
    stride = 1

    def forward(self, x):
        return x


class RandomConvExtractor(FeatureExtractor):
    """Fixed-seed random convnet; a cheap stand-in for a pretrained VGG slice."""

    def __init__(self, seed: int = 1234, channels: int = 32, pools: int = 1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        ch_in = 3
        for i in range(pools + 1):
            conv = nn.Conv2d(ch_in, channels, 3, padding=1)
            with torch.no_grad():
                fan_in = ch_in * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            if i < pools:
                layers.append(nn.MaxPool2d(2))
            ch_in = channels
        self.net = nn.Sequential(*layers)
        self.stride = 2 ** pools
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x)


class VGG19Extractor(FeatureExtractor):
    """conv5_4 activations of an ImageNet VGG-19 (pre-activation).

    Needs torchvision weights to be available locally or downloadable.
    """

    stride = 16
    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        # index 34 is conv5_4; 36 is the fifth max-pool
        self.net = features[:35]
        self.register_buffer("mean", torch.tensor(self._MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self._STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net((x - self.mean) / self.std)


def make_extractor(name: str, seed: int = 1234) -> FeatureExtractor:
    if name == "identity":
        return IdentityExtractor()
    if name == "random":
        return RandomConvExtractor(seed=seed)
    if name == "vgg19":
        return VGG19Extractor()
    raise ValueError(f"unknown feature extractor {name!r}")


def extract_features(frame: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    return extractor(frame)
