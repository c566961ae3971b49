"""Warping stage: encoders, two shared GFW applications, RefineNet, shared
decoder and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LEAK, Decoder, DecoderConfig, Encoder, EncoderConfig, Refine1x1
from .gfw import GFW
from .losses import FixedFeatureNet, LossWeights, stage1_loss
from .runtime import RunConfig, seed_everything
from .warp import backward_warp, upsample_flow

log = logging.getLogger(__name__)

__all__ = ["Stage1Output", "RefineNet", "Stage1Model", "build_stage1", "train_stage1",
           "TrainingDiverged", "stage1_batch"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Stage1Output:
    warp_g: torch.Tensor
    tryon_c: torch.Tensor
    source_flow: torch.Tensor
    reference_flow: torch.Tensor
    refine_attention: torch.Tensor


class RefineNet(nn.Module):
    """Four convolutions over concat(source, reference) warped features.

    Emits (x_src, y_src, x_ref, y_ref, attention); the last layer starts at zero.
    """

    def __init__(self, channels: int, hidden: int = 96):
        super().__init__()
        widths = (2 * channels, hidden, hidden, hidden // 2, 5)
        self.convs = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1) for i in range(4))
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def forward(self, feat_s_warped, feat_r_warped):
        if feat_s_warped.shape != feat_r_warped.shape:
            raise ValueError("RefineNet inputs must share a geometry")
        x = torch.cat([feat_s_warped, feat_r_warped], dim=1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < 3:
                x = F.leaky_relu(x, LEAK)
        return x[:, 0:2], x[:, 2:4], torch.sigmoid(x[:, 4:5])


class Stage1Model(nn.Module):
    def __init__(self, height: int = 64, width: int = 48, nodes: int = 32, graph_iters: int = 1,
                 enc: EncoderConfig = EncoderConfig()):
        super().__init__()
        if height % enc.factor or width % enc.factor:
            raise ValueError(f"image size {height}x{width} not divisible by {enc.factor}")
        self.size = (height, width)
        grid = (height // enc.factor, width // enc.factor)
        c = enc.channels[-1]
        self.garment_encoder = Encoder(3, enc)
        self.reference_encoder = Encoder(6, enc)
        self.gfw = GFW(c, grid, nodes=nodes, iterations=graph_iters)
        self.refine = RefineNet(c)
        self.decoder = Decoder(DecoderConfig(in_channels=c))
        self.refine_1x1 = Refine1x1(3)

    def forward(self, garment, pose, agnostic) -> Stage1Output:
        h, w = self.size
        if garment.shape[-2:] != (h, w):
            raise ValueError(f"expected {h}x{w} images, got {tuple(garment.shape[-2:])}")
        feat_s = self.garment_encoder(garment)
        feat_r = self.reference_encoder(torch.cat([pose, agnostic], dim=1))
        flow_s, _, feat_s_warped = self.gfw(feat_s, feat_r)
        flow_r, _, feat_r_warped = self.gfw(feat_r, feat_s_warped)
        off_s, off_r, att = self.refine(feat_s_warped, feat_r_warped)
        feat_s_refine = backward_warp(feat_s_warped, off_s) * att
        feat_r_refine = backward_warp(feat_r_warped, off_r) * (1 - att)
        tryon_c = self.decoder(feat_s_refine + feat_r_refine)
        warp_g = self.refine_1x1(self.decoder(feat_s_refine))
        return Stage1Output(
            warp_g=warp_g,
            tryon_c=tryon_c,
            source_flow=upsample_flow(flow_s, h, w),
            reference_flow=upsample_flow(flow_r, h, w),
            refine_attention=F.interpolate(att, size=(h, w), mode="bilinear", align_corners=True),
        )


def build_stage1(cfg: RunConfig) -> Stage1Model:
    seed_everything(cfg.seed)
    model = Stage1Model(cfg.height, cfg.width, nodes=cfg.graph_nodes, graph_iters=cfg.graph_iters)
    return model.to(cfg.dtype)


def stage1_batch(samples, dtype=torch.float32) -> dict[str, torch.Tensor]:
    def stack(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])).to(dtype)
    return {k: stack(k) for k in ("garment", "pose", "agnostic", "gt_warp", "person")}


def train_stage1(samples, cfg: RunConfig, model: Stage1Model | None = None, log_fn=None,
                 feature_net: FixedFeatureNet | None = None):
    """AdamW over the composite objective.

    Returns ``(model, curve)`` where ``curve`` holds one breakdown dict per
    optimizer step. ``log_fn`` receives one dict per epoch (mean breakdown).
    """
    from .synth import verify_sample

    for i, s in enumerate(samples):
        if not verify_sample(s):
            raise ValueError(f"sample {i} failed verification")
    model = model if model is not None else build_stage1(cfg)
    model.train()
    net = feature_net if feature_net is not None else FixedFeatureNet(dtype=cfg.dtype)
    weights = LossWeights.from_config(cfg)
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=cfg.lr,
                            betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: cfg.lr_factor(k, total_steps))
    curve = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_terms = []
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            batch = stage1_batch([samples[i] for i in idx], cfg.dtype)
            out = model(batch["garment"], batch["pose"], batch["agnostic"])
            total, terms = stage1_loss(out, batch["person"], batch["gt_warp"], net, weights,
                                       cfg.owl_threshold)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at batch {step} (epoch {epoch}, batch {k})")
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            curve.append(terms)
            epoch_terms.append(terms)
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        summary = {key: float(np.mean([t[key] for t in epoch_terms])) for key in epoch_terms[0]}
        summary["epoch"] = epoch
        log.info("epoch=%d l1=%.6f perc=%.6f style=%.6f owl=%.6f total=%.6f", epoch,
                 summary["l1"], summary["perc"], summary["style"], summary["owl"], summary["total"])
        if log_fn is not None:
            log_fn(summary)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    model.eval()
    return model, curve
