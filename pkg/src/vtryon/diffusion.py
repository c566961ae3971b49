"""Latent diffusion inpainting for the try-on stage.

A small autoencoder maps 3xHxW images to 4x(H/8)x(W/8) latents. A conditional
denoiser predicts the noise of a latent person image given 16 conditioning
channels (noisy latent, coarse body mask, pose, encoded warped garment,
encoded agnostic person) and, through decoupled cross-attention, caption and
garment-texture tokens. Sampling is deterministic (variance-free updates) and
the result is composited back onto the agnostic person outside the mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LEAK, Decoder, DecoderConfig, Encoder, EncoderConfig
from .dcaa import DcaaBlock, TextEmbedder, TextureEmbedder
from .runtime import RunConfig, seed_everything
from .stage1 import TrainingDiverged, stage1_batch

log = logging.getLogger(__name__)

__all__ = [
    "ToyAutoencoder", "NoiseSchedule", "add_noise", "Denoiser", "Stage2Model",
    "CONDITIONING_LAYOUT", "assemble_conditioning", "coarse_body_mask",
    "derive_stage2_inputs", "denoise_step", "sample_tryon", "composite",
    "pretrain_autoencoder", "build_stage2", "train_stage2", "Stage2Inputs",
    "prepare_stage2_inputs", "sampling_timesteps", "autoencoder_images", "noise_mse",
]

LATENT_CHANNELS = 4

# (name, channels) in concatenation order; part of every stage-2 checkpoint config
CONDITIONING_LAYOUT = (("noisy_latent", 4), ("coarse_mask", 1), ("pose", 3),
                       ("warped_garment_latent", 4), ("agnostic_latent", 4))
CONDITIONING_CHANNELS = sum(c for _, c in CONDITIONING_LAYOUT)


# --- autoencoder --------------------------------------------------------------

class ToyAutoencoder(nn.Module):
    """Conv encoder to a 4-channel latent at 1/8 resolution and a mirrored decoder.

    ``scale`` multiplies encoder outputs so that latents have roughly unit
    variance over the training data; ``decode`` divides it back out.
    """

    def __init__(self, channels=(32, 64, 64)):
        super().__init__()
        enc = EncoderConfig(channels=tuple(channels))
        self.encoder = Encoder(3, enc)
        self.to_latent = nn.Conv2d(channels[-1], LATENT_CHANNELS, 1)
        self.decoder = Decoder(DecoderConfig(in_channels=LATENT_CHANNELS, channels=(64, 48, 32)))
        self.register_buffer("scale", torch.ones(()))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(F.leaky_relu(self.encoder(x), LEAK)) * self.scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.scale)

    def forward(self, x):
        return self.decode(self.encode(x))

    def freeze(self) -> "ToyAutoencoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def autoencoder_images(samples) -> torch.Tensor:
    """Every image kind the autoencoder has to represent, stacked."""
    arrays = []
    for s in samples:
        arrays += [s.garment, s.person, s.agnostic, np.where(s.gt_warp == 0, -1.0, s.gt_warp)]
    return torch.from_numpy(np.stack(arrays).astype(np.float32))


def pretrain_autoencoder(samples, cfg: RunConfig, batch_size: int = 16,
                         ae: ToyAutoencoder | None = None) -> tuple[ToyAutoencoder, list[float]]:
    """Fit the autoencoder with an L1 reconstruction loss, set the latent scale, freeze it."""
    seed_everything(cfg.seed)
    ae = (ae or ToyAutoencoder()).to(cfg.dtype)
    images = autoencoder_images(samples).to(cfg.dtype)
    opt = torch.optim.AdamW(ae.parameters(), lr=cfg.ae_lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    curve = []
    for step in range(cfg.ae_pretrain_steps):
        idx = torch.randint(len(images), (batch_size,), generator=gen)
        loss = (ae(images[idx]) - images[idx]).abs().mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite autoencoder loss at batch {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(loss.detach()))
    with torch.no_grad():
        z = ae.encode(images)
        ae.scale.copy_(1.0 / z.std().clamp_min(1e-6))
    ae.eval()
    return ae.freeze(), curve


# --- noise schedule -----------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear per-step variances; ``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] = 1``."""

    steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> torch.Tensor:
        return torch.linspace(self.beta_start, self.beta_end, self.steps, dtype=torch.float64)

    @property
    def alpha_bar(self) -> torch.Tensor:
        return torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - self.betas, 0)])

    def check_t(self, t, low: int = 0) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < low).any() or (t > self.steps).any():
            raise ValueError(f"timestep out of range [{low}, {self.steps}]: {t.tolist()}")
        return t


def _per_sample(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = values[t].to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def add_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or one per sample."""
    t = schedule.check_t(t)
    abar = schedule.alpha_bar
    return _per_sample(abar.sqrt(), t, x0) * x0 + _per_sample((1 - abar).sqrt(), t, x0) * eps


def sampling_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Descending integer timesteps from T to 0 visiting ``steps`` denoising updates."""
    if not 1 <= steps <= schedule.steps:
        raise ValueError(f"sampling steps must lie in [1, {schedule.steps}], got {steps}")
    grid = np.linspace(schedule.steps, 0, steps + 1).round().astype(int)
    return [int(t) for t in grid]


# --- denoiser -----------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


class AttentionLevel(nn.Module):
    """Feature map -> tokens -> decoupled cross-attention -> residual feature map."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.proj_in = nn.Conv2d(channels, dim, 1)
        self.block = DcaaBlock(dim)
        self.proj_out = nn.Conv2d(dim, channels, 1)

    def forward(self, x, text, text_mask, texture):
        b, _, h, w = x.shape
        z = self.proj_in(x).flatten(2).transpose(1, 2)
        z = self.block(z, text, texture, text_mask)
        return x + self.proj_out(z.transpose(1, 2).reshape(b, -1, h, w))


class ResLevel(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.time = nn.Linear(time_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(8, c_out)

    def forward(self, x, temb):
        h = F.leaky_relu(self.conv1(x), LEAK) + self.time(temb)[:, :, None, None]
        return h + self.conv2(F.leaky_relu(self.norm(h), LEAK))


class Denoiser(nn.Module):
    """Three-level conv encoder-decoder with skips, a timestep embedding added at
    every level and one decoupled cross-attention block per level."""

    def __init__(self, in_channels: int = CONDITIONING_CHANNELS, widths=(64, 96, 128),
                 dim: int = 64, time_dim: int = 64):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(),
                                      nn.Linear(time_dim, time_dim))
        w0, w1, w2 = widths
        self.down = nn.ModuleList([ResLevel(in_channels, w0, time_dim),
                                   ResLevel(w0, w1, time_dim, stride=2),
                                   ResLevel(w1, w2, time_dim, stride=2)])
        self.attend = nn.ModuleList([AttentionLevel(w, dim) for w in widths])
        self.up = nn.ModuleList([ResLevel(w2 + w1, w1, time_dim), ResLevel(w1 + w0, w0, time_dim)])
        self.out = nn.Conv2d(w0, LATENT_CHANNELS, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def dcaa_blocks(self) -> list[DcaaBlock]:
        return [a.block for a in self.attend]

    def forward(self, beta, t, text, text_mask, texture):
        if beta.shape[1] != CONDITIONING_CHANNELS:
            raise ValueError(f"expected {CONDITIONING_CHANNELS} conditioning channels, got {beta.shape[1]}")
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(beta.dtype))
        skips = []
        x = beta
        for level, attend in zip(self.down, self.attend):
            x = attend(level(x, temb), text, text_mask, texture)
            skips.append(x)
        for level, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = level(torch.cat([x, skip], dim=1), temb)
        return self.out(x)


# --- conditioning -------------------------------------------------------------

def coarse_body_mask(tryon_c: torch.Tensor, level: float = -0.5) -> torch.Tensor:
    """Binary foreground of the coarse try-on, (B, 1, H, W) with values in {0, 1}.

    Raises if any image is background everywhere.
    """
    mask = (tryon_c > level).any(dim=-3, keepdim=True).to(tryon_c.dtype)
    empty = mask.flatten(1).sum(1) == 0
    if empty.any():
        raise ValueError(f"coarse try-on is all background for batch item(s) "
                         f"{torch.nonzero(empty).flatten().tolist()}")
    return mask


def derive_stage2_inputs(out, pose: torch.Tensor, agnostic: torch.Tensor):
    """(coarse body mask, pose, agnostic) from a warping-stage output and its sample."""
    return coarse_body_mask(out.tryon_c), pose, agnostic


def assemble_conditioning(x_t, coarse_mask, pose, warped_latent, agnostic_latent) -> torch.Tensor:
    """Concatenate the 16 conditioning channels at latent resolution.

    The mask is area-averaged and the pose bilinearly resampled (with
    antialiasing) down to the latent grid.
    """
    size = x_t.shape[-2:]
    mask = F.interpolate(coarse_mask, size=size, mode="area")
    pose = F.interpolate(pose, size=size, mode="bilinear", antialias=True, align_corners=False)
    parts = (x_t, mask, pose, warped_latent, agnostic_latent)
    for (name, channels), part in zip(CONDITIONING_LAYOUT, parts):
        if part.shape[1] != channels or part.shape[-2:] != size:
            raise ValueError(f"{name}: expected {channels}x{tuple(size)}, got {tuple(part.shape[1:])}")
    return torch.cat(parts, dim=1)


def composite(generated: torch.Tensor, agnostic: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Generated pixels inside the mask, agnostic pixels (bit-exact) outside."""
    return torch.where(mask.expand_as(generated) > 0.5, generated, agnostic)


@dataclass
class Stage2Inputs:
    """Per-sample tensors that stay fixed while the denoiser trains."""

    person_latent: torch.Tensor
    static_cond: tuple  # (coarse mask, pose, warped latent, agnostic latent)
    garment: torch.Tensor
    agnostic: torch.Tensor
    captions: list[str]

    def __len__(self):
        return len(self.captions)

    def select(self, idx) -> "Stage2Inputs":
        idx = torch.as_tensor(idx)
        return Stage2Inputs(self.person_latent[idx], tuple(c[idx] for c in self.static_cond),
                            self.garment[idx], self.agnostic[idx],
                            [self.captions[int(i)] for i in idx])


class Stage2Model(nn.Module):
    def __init__(self, height: int = 64, width: int = 48, dim: int = 64,
                 schedule: NoiseSchedule = NoiseSchedule()):
        super().__init__()
        self.schedule = schedule
        self.size = (height, width)
        self.autoencoder = ToyAutoencoder().freeze()
        self.text_embedder = TextEmbedder(dim=dim)
        self.texture_embedder = TextureEmbedder((height // 8, width // 8), dim=dim)
        self.denoiser = Denoiser(dim=dim)

    def frozen_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    def embeddings(self, captions, garment):
        text, mask = self.text_embedder(list(captions))
        return text, mask, self.texture_embedder(garment)

    def predict_noise(self, x_t, t, static_cond, embeddings):
        t = self.schedule.check_t(t, low=1)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        beta = assemble_conditioning(x_t, *static_cond)
        return self.denoiser(beta, t, *embeddings)


def prepare_stage2_inputs(samples, stage1_model, autoencoder: ToyAutoencoder,
                          dtype=torch.float32) -> Stage2Inputs:
    """Run the frozen warping stage and autoencoder once over ``samples``."""
    batch = stage1_batch(samples, dtype)
    with torch.no_grad():
        out = stage1_model(batch["garment"], batch["pose"], batch["agnostic"])
        mask, pose, agnostic = derive_stage2_inputs(out, batch["pose"], batch["agnostic"])
        static = (mask, pose, autoencoder.encode(out.warp_g), autoencoder.encode(agnostic))
        person = autoencoder.encode(batch["person"])
    return Stage2Inputs(person, static, batch["garment"], agnostic, [s.caption for s in samples])


def denoise_step(model: Stage2Model, x_t, t: int, static_cond, embeddings,
                 t_prev: int | None = None) -> torch.Tensor:
    """Deterministic update from step ``t`` to ``t_prev`` (default t - 1)."""
    sched = model.schedule
    t = int(sched.check_t(t, low=1))
    t_prev = t - 1 if t_prev is None else int(sched.check_t(t_prev))
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be below t={t}")
    abar = sched.alpha_bar.to(x_t.dtype)
    eps = model.predict_noise(x_t, t, static_cond, embeddings)
    x0 = (x_t - (1 - abar[t]).sqrt() * eps) / abar[t].sqrt()
    return abar[t_prev].sqrt() * x0 + (1 - abar[t_prev]).sqrt() * eps


@torch.no_grad()
def sample_tryon(model: Stage2Model, inputs: Stage2Inputs, steps: int = 50,
                 seed: int = 0) -> torch.Tensor:
    """Denoise from seeded Gaussian noise, decode and composite; (B, 3, H, W)."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    shape = inputs.person_latent.shape
    x = torch.randn(shape, generator=gen, dtype=torch.float64).to(inputs.person_latent.dtype)
    embeddings = model.embeddings(inputs.captions, inputs.garment)
    ts = sampling_timesteps(model.schedule, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        x = denoise_step(model, x, t, inputs.static_cond, embeddings, t_prev)
    image = model.autoencoder.decode(x)
    return composite(image, inputs.agnostic, inputs.static_cond[0])


# --- training -----------------------------------------------------------------

def build_stage2(cfg: RunConfig, autoencoder: ToyAutoencoder | None = None) -> Stage2Model:
    seed_everything(cfg.seed)
    model = Stage2Model(cfg.height, cfg.width, schedule=NoiseSchedule(cfg.diffusion_steps))
    if autoencoder is not None:
        model.autoencoder.load_state_dict(autoencoder.state_dict())
    model.autoencoder.freeze()
    return model.to(cfg.dtype)


def noise_mse(model: Stage2Model, inputs: Stage2Inputs, t: torch.Tensor,
              eps: torch.Tensor) -> torch.Tensor:
    x_t = add_noise(inputs.person_latent, t, eps, model.schedule)
    embeddings = model.embeddings(inputs.captions, inputs.garment)
    pred = model.predict_noise(x_t, t, inputs.static_cond, embeddings)
    return ((pred - eps) ** 2).mean()


def train_stage2(inputs: Stage2Inputs, cfg: RunConfig, model: Stage2Model,
                 log_fn=None) -> tuple[Stage2Model, list[float]]:
    """AdamW over every trainable weight; the autoencoder and the base
    cross-attention projections stay frozen. Returns ``(model, eps-MSE curve)``."""
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    n = len(inputs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: cfg.lr_factor(k, total_steps))
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.train()
    model.autoencoder.eval()
    curve = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for k in range(steps_per_epoch):
            batch = inputs.select(order[k * cfg.batch_size:(k + 1) * cfg.batch_size])
            b = len(batch)
            t = torch.randint(1, model.schedule.steps + 1, (b,), generator=gen)
            eps = torch.randn(batch.person_latent.shape, generator=gen,
                              dtype=torch.float64).to(cfg.dtype)
            loss = noise_mse(model, batch, t, eps)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at batch {step} (epoch {epoch}, batch {k})")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            sched.step()
            curve.append(float(loss.detach()))
            epoch_losses.append(curve[-1])
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        mean = float(np.mean(epoch_losses))
        log.info("epoch=%d eps_mse=%.6f", epoch, mean)
        if log_fn is not None:
            log_fn({"epoch": epoch, "eps_mse": mean})
        if cfg.max_steps and step >= cfg.max_steps:
            break
    model.eval()
    return model, curve
