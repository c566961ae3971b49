"""
Warping a garment onto a pose
=============================

Generate a small synthetic set, train the warping stage for a couple of
hundred steps and look at what it produces on held-out samples.

Run from the repository root::

    python demos/warp_a_garment.py

Images land in ``demo_output/warp``. Takes about half a minute on one core.
"""

from pathlib import Path

import numpy as np
import torch

from vtryon.runtime import RunConfig
from vtryon.stage1 import stage1_batch, train_stage1
from vtryon.synth import GeneratorSpec, generate_dataset, silhouette, write_png
from vtryon.warp import backward_warp, flow_to_color

out = Path("demo_output/warp")
out.mkdir(parents=True, exist_ok=True)

# %%
# Every sample carries the flat garment, a pose map, the garment-agnostic
# person and the exact warped garment. Affine deformations only, to keep the
# learning problem small.
samples = generate_dataset(GeneratorSpec(deformations=("affine",), n_train=64, n_val=4, n_test=8), seed=0)
train = [s for s in samples if s.meta["split"] == "train"]
test = [s for s in samples if s.meta["split"] == "test"]
print(f"{len(train)} training samples, {len(test)} held out")
print("example caption:", train[0].caption)

# %%
# Short schedule: warmup, cosine decay and clipping at a learning rate far above
# the default, and a heavier weight on the occlusion-aware term.
cfg = RunConfig(lr=2e-3, warmup_steps=30, lr_decay="cosine", lambda_owl=5.0, grad_clip=1.0, max_steps=200)
model, curve = train_stage1(train, cfg)
print(f"composite loss {curve[0]['total']:.3f} -> {curve[-1]['total']:.3f} over {len(curve)} steps")

# %%
# On held-out samples, compare the predicted warp with the ground truth.
b = stage1_batch(test)
with torch.no_grad():
    result = model(b["garment"], b["pose"], b["agnostic"])

truth = torch.stack([silhouette(backward_warp(torch.from_numpy(s.garment), torch.from_numpy(s.gt_flow)))
                     for s in test])
pred = silhouette(result.warp_g)
print(f"held-out silhouette IoU {((truth & pred).sum() / (truth | pred).sum()).item():.3f}")

# %%
# One row per sample: garment, ground-truth warp, predicted warp, coarse
# try-on, and the source flow as a color wheel image.
rows = []
for i in range(len(test)):
    flow_rgb = flow_to_color(result.source_flow[i]).numpy() * 2 - 1
    rows.append(np.concatenate([test[i].garment, test[i].gt_warp, result.warp_g[i].double().numpy(),
                                result.tryon_c[i].double().numpy(), flow_rgb], axis=2))
write_png(out / "grid.png", np.concatenate(rows, axis=1))
print("wrote", out / "grid.png")
