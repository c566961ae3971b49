"""
From flat garment to inpainted try-on
=====================================

The whole pipeline at toy scale:

1. train the warping stage,
2. pretrain and freeze the latent autoencoder,
3. train the conditioned denoiser,
4. sample try-on images and score them.

    python demos/end_to_end.py

About a minute on one core. The diffusion stage sees far too little data
and compute to produce clean images; the point is to see every piece run.
"""

from pathlib import Path

import numpy as np

from vtryon.diffusion import build_stage2, prepare_stage2_inputs, pretrain_autoencoder, sample_tryon, train_stage2
from vtryon.pipeline import evaluate_pipeline
from vtryon.runtime import RunConfig
from vtryon.stage1 import train_stage1
from vtryon.synth import GeneratorSpec, generate_dataset, write_png

out = Path("demo_output/end_to_end")
out.mkdir(parents=True, exist_ok=True)

samples = generate_dataset(GeneratorSpec(deformations=("affine",), n_train=64, n_val=4, n_test=8), seed=0)
train = [s for s in samples if s.meta["split"] == "train"]
test = [s for s in samples if s.meta["split"] == "test"]

warp_cfg = RunConfig(lr=2e-3, warmup_steps=30, lr_decay="cosine", lambda_owl=5.0, grad_clip=1.0, max_steps=200)
warp_model, _ = train_stage1(train, warp_cfg)

# %%
# The autoencoder squeezes 64x48 images to a 4x8x6 latent and is frozen
# afterwards; the denoiser works entirely in that latent space.
diff_cfg = RunConfig(lr=1e-3, warmup_steps=10, lr_decay="cosine", grad_clip=1.0, max_steps=200,
                     ae_pretrain_steps=300)
ae, ae_curve = pretrain_autoencoder(train, diff_cfg)
print(f"autoencoder L1 {ae_curve[0]:.3f} -> {ae_curve[-1]:.3f}")

# %%
# The coarse try-on from the warping stage supplies the inpainting mask and
# the warped-garment latent; caption and garment texture enter through
# cross-attention.
inputs = prepare_stage2_inputs(train, warp_model, ae)
model = build_stage2(diff_cfg, ae)
model, curve = train_stage2(inputs, diff_cfg, model)
print(f"noise-prediction MSE {np.mean(curve[:10]):.3f} -> {np.mean(curve[-10:]):.3f} (10-step means)")

# %%
# Pixels outside the mask come straight from the agnostic image.
held_out = prepare_stage2_inputs(test, warp_model, ae)
images = sample_tryon(model, held_out, steps=50, seed=0)
rows = [np.concatenate([s.garment, s.agnostic, img.double().numpy(), s.person], axis=2)
        for s, img in zip(test, images)]
write_png(out / "tryon.png", np.concatenate(rows, axis=1))
print("wrote", out / "tryon.png")

paired, unpaired = evaluate_pipeline(warp_model, model, test, steps=50, seed=0)
print(f"paired:   ssim {paired.ssim:.3f}  lpips-proxy {paired.lpips_proxy:.3f}  "
      f"fid {paired.fid:.3f}  kid {paired.kid:.4f}")
print(f"unpaired: fid {unpaired.fid:.3f}  kid {unpaired.kid:.4f}")
