"""Synthetic two-stage virtual try-on.

Stage one warps a garment image onto a target pose with graph-reasoned
appearance flow and renders a coarse try-on; stage two refines it with a small
latent diffusion inpainting model conditioned on caption and texture tokens
through decoupled cross-attention.
"""

from .runtime import RunConfig, ParamStore, grad_check, load_checkpoint, save_checkpoint, seed_everything
from .synth import GeneratorSpec, TryonSample, generate_dataset, make_sample
from .stage1 import Stage1Model, build_stage1, train_stage1
from .diffusion import NoiseSchedule, Stage2Model, build_stage2, sample_tryon, train_stage2
from .metrics import MetricReport, fid, kid, lpips_proxy, ssim

__version__ = "0.1.0"
