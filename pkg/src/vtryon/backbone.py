"""Convolutional encoders and the shared decoder used by the warping stage."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

__all__ = ["EncoderConfig", "DecoderConfig", "Encoder", "ContextEncoder", "Decoder",
           "Refine1x1", "LEAK"]

LEAK = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 3
    stride: int = 2
    channels: tuple[int, ...] = (32, 64, 96)
    kernel_size: int = 3

    def __post_init__(self):
        if len(self.channels) != self.layers:
            raise ValueError("one channel width per layer required")

    @property
    def factor(self) -> int:
        return self.stride ** self.layers


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: int = 96
    channels: tuple[int, ...] = (64, 48, 32)
    out_channels: int = 3
    convs_per_stage: int = 1


class Encoder(nn.Module):
    """``layers`` strided convolutions; output is input / stride**layers."""

    def __init__(self, in_channels: int, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        widths = (in_channels,) + tuple(cfg.channels)
        pad = cfg.kernel_size // 2
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], cfg.kernel_size, stride=cfg.stride, padding=pad)
            for i in range(cfg.layers))

    @property
    def out_channels(self) -> int:
        return self.cfg.channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.cfg.factor or w % self.cfg.factor:
            raise ValueError(f"input {h}x{w} not divisible by {self.cfg.factor}")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, LEAK)
        return x


class ContextEncoder(nn.Module):
    """Two stride-1 convolutions mapping reference features to the motion width."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv2(F.leaky_relu(self.conv1(x), LEAK))


class Decoder(nn.Module):
    """Nearest x2 upsampling + 3x3 conv per stage, then a tanh-bounded RGB head."""

    def __init__(self, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.cfg = cfg
        widths = (cfg.in_channels,) + tuple(cfg.channels)
        self.stages = nn.ModuleList(
            nn.ModuleList(nn.Conv2d(widths[i] if k == 0 else widths[i + 1], widths[i + 1], 3, padding=1)
                          for k in range(cfg.convs_per_stage))
            for i in range(len(cfg.channels)))
        self.norms = nn.ModuleList(nn.GroupNorm(8, widths[i + 1]) for i in range(len(cfg.channels)))
        self.head = nn.Conv2d(widths[-1], cfg.out_channels, 3, padding=1)

    @property
    def factor(self) -> int:
        return 2 ** len(self.stages)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[-3] != self.cfg.in_channels:
            raise ValueError(f"decoder expects {self.cfg.in_channels} channels, got {feat.shape[-3]}")
        x = feat
        for stage, norm in zip(self.stages, self.norms):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            for conv in stage:
                x = conv(x)
            x = F.leaky_relu(norm(x), LEAK)
        return torch.tanh(self.head(x))


class _LeakyClamp(torch.autograd.Function):
    """Exact clamp to [-1, 1] whose backward keeps a small slope outside the range,
    so pixels pushed past the bound can still be pulled back."""

    @staticmethod
    def forward(ctx, x, leak):
        ctx.save_for_backward(x)
        ctx.leak = leak
        return x.clamp(-1.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        inside = (x >= -1.0) & (x <= 1.0)
        return grad * torch.where(inside, 1.0, ctx.leak).to(grad.dtype), None


def leaky_clamp(x: torch.Tensor, leak: float = LEAK) -> torch.Tensor:
    return _LeakyClamp.apply(x, leak)


class Refine1x1(nn.Module):
    """Identity-initialised 1x1 convolution; output clamped to [-1, 1]."""

    def __init__(self, channels: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
            self.conv.bias.zero_()

    def forward(self, image):
        return leaky_clamp(self.conv(image))
