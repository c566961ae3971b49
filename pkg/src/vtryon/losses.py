"""Warping-stage objective: L1, perceptual, style (Gram) and the occlusion-aware
warp loss, weighted into one scalar."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LEAK

__all__ = ["LossWeights", "FixedFeatureNet", "owl_mask", "owl_loss", "gram",
           "perceptual_loss", "style_loss", "stage1_loss", "DegenerateSampleWarning"]


class DegenerateSampleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    prec: float = 1.0
    style: float = 100.0
    owl: float = 1.0

    def __post_init__(self):
        if min(self.l1, self.prec, self.style, self.owl) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.lambda_l1, cfg.lambda_prec, cfg.lambda_style, cfg.lambda_owl)


class FixedFeatureNet(nn.Module):
    """Three frozen random conv stages, tapped after each stage.

    Stands in for a pretrained perceptual network. Parameters are drawn from a
    private generator so construction never touches the global RNG.
    """

    def __init__(self, seed: int = 1234, channels=(16, 32, 32), dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = (3,) + tuple(channels)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for i in range(len(channels)):
            fan_in = widths[i] * 9
            w = torch.randn(widths[i + 1], widths[i], 3, 3, generator=gen, dtype=torch.float64)
            w = w * (2.0 / fan_in) ** 0.5
            b = 0.05 * torch.randn(widths[i + 1], generator=gen, dtype=torch.float64)
            self.weights.append(nn.Parameter(w.to(dtype), requires_grad=False))
            self.biases.append(nn.Parameter(b.to(dtype), requires_grad=False))

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for w, b in zip(self.weights, self.biases):
            x = F.leaky_relu(F.conv2d(x, w, b, stride=2, padding=1), LEAK)
            taps.append(x)
        return taps

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average pooled last tap, (B, D)."""
        return self(x)[-1].mean(dim=(-2, -1))


def owl_mask(gt_warp: torch.Tensor, threshold: float = 0.05) -> torch.Tensor:
    """1 where any channel of the target magnitude exceeds ``threshold``.

    Holes burned into the target are exactly zero, so they fall outside.
    """
    return (gt_warp.abs() > threshold).any(dim=-3, keepdim=True).to(gt_warp.dtype)


def owl_loss(gt_warp: torch.Tensor, warp_g: torch.Tensor, threshold: float = 0.05) -> torch.Tensor:
    """Mean absolute error over mask-1 pixels (all channels)."""
    if gt_warp.shape != warp_g.shape:
        raise ValueError(f"shape mismatch {tuple(gt_warp.shape)} vs {tuple(warp_g.shape)}")
    mask = owl_mask(gt_warp, threshold).expand_as(gt_warp)
    count = mask.sum()
    if count == 0:
        warnings.warn("occlusion mask is empty; OWL term is zero", DegenerateSampleWarning,
                      stacklevel=2)
        return (warp_g * 0).sum()
    return (mask * (gt_warp - warp_g).abs()).sum() / count


def gram(feat: torch.Tensor) -> torch.Tensor:
    b, c, h, w = feat.shape
    f = feat.reshape(b, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


def perceptual_loss(net: FixedFeatureNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    taps_a, taps_b = net(a), net(b)
    return sum((fa - fb).abs().mean() for fa, fb in zip(taps_a, taps_b)) / len(taps_a)


def style_loss(net: FixedFeatureNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over taps of the per-sample squared Frobenius norm of the Gram difference."""
    taps_a, taps_b = net(a), net(b)
    total = 0
    for fa, fb in zip(taps_a, taps_b):
        total = total + ((gram(fa) - gram(fb)) ** 2).sum(dim=(-2, -1)).mean()
    return total / len(taps_a)


def stage1_loss(out, person: torch.Tensor, gt_warp: torch.Tensor, net: FixedFeatureNet,
                weights: LossWeights = LossWeights(), threshold: float = 0.05):
    """Return ``(total, breakdown)`` for a warping-stage output.

    Image terms compare the coarse try-on with the ground-truth person; the OWL
    term compares the warped garment with the hole-burned ground-truth warp.
    """
    tryon = out.tryon_c
    terms = {
        "l1": (tryon - person).abs().mean(),
        "perc": perceptual_loss(net, tryon, person),
        "style": style_loss(net, tryon, person),
        "owl": owl_loss(gt_warp, out.warp_g, threshold),
    }
    weighted = {
        "l1": weights.l1 * terms["l1"],
        "perc": weights.prec * terms["perc"],
        "style": weights.style * terms["style"],
        "owl": weights.owl * terms["owl"],
    }
    total = weighted["l1"] + weighted["perc"] + weighted["style"] + weighted["owl"]
    breakdown = {k: float(v.detach()) for k, v in weighted.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
