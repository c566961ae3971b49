"""
What the occlusion-aware loss ignores
=====================================

An arm crossing the torso hides part of the garment. The ground-truth warp
has exact zeros there, and the loss skips them. Background sits at -1, so
it counts as visible.

    python demos/occlusion_aware_loss.py
"""

from pathlib import Path

import numpy as np
import torch

from vtryon.losses import owl_loss, owl_mask
from vtryon.synth import ArmBar, make_sample, write_png

out = Path("demo_output/owl")
out.mkdir(parents=True, exist_ok=True)

sample = make_sample(texture="checker", color="blue", color2="white",
                     occluder=ArmBar((8.0, 40.0), (40.0, 34.0), 3.0))
gt = torch.from_numpy(sample.gt_warp)[None]
mask = owl_mask(gt)[0, 0]
print(f"pixels the loss looks at: {int(mask.sum())} of {mask.numel()}")

# %%
# A prediction that is right everywhere except under the arm scores zero,
# whatever it paints in the hole.
pred = gt.clone()
holes = mask == 0
pred[..., holes] = torch.rand(3, int(holes.sum()), dtype=torch.float64) * 2 - 1
print("loss with garbage in the hole:", owl_loss(gt, pred).item())

# %%
# Errors on visible pixels do count.
pred[..., ~holes] += 0.1
print("loss after shifting visible pixels by 0.1:", round(owl_loss(gt, pred).item(), 6))

write_png(out / "sample.png", np.concatenate([sample.person, sample.gt_warp, pred[0].numpy().clip(-1, 1),
                                              np.repeat(mask.numpy()[None] * 2 - 1, 3, 0)], axis=2))
print("wrote", out / "sample.png")
