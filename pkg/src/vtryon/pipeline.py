"""Glue between the stages: checkpoint round-trips for trained models and
paired / unpaired evaluation of the full pipeline."""

from __future__ import annotations

import dataclasses
import json

import torch

from .diffusion import (CONDITIONING_LAYOUT, Stage2Model, build_stage2, prepare_stage2_inputs,
                        sample_tryon)
from .losses import FixedFeatureNet
from .metrics import MetricReport, image_set_metrics
from .runtime import CheckpointError, ParamStore, RunConfig, load_checkpoint, save_checkpoint
from .stage1 import Stage1Model, build_stage1

__all__ = ["save_stage1", "load_stage1", "save_stage2", "load_stage2", "swap_garments",
           "evaluate_pipeline"]


def _config_entry(cfg: RunConfig, kind: str, **extra) -> dict:
    return {"kind": kind, "run_config": cfg.to_text(), "run_config_hash": cfg.config_hash(), **extra}


def _open(path, kind: str):
    store, config = load_checkpoint(path)
    if config.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {config.get('kind')!r}")
    cfg = RunConfig.from_text(config["run_config"])
    if cfg.config_hash() != config.get("run_config_hash"):
        raise CheckpointError(f"{path}: run configuration does not match its recorded hash")
    return store, cfg, config


def save_stage1(model: Stage1Model, cfg: RunConfig, path) -> None:
    save_checkpoint(ParamStore.from_module(model), path, _config_entry(cfg, "warp"))


def load_stage1(path) -> tuple[Stage1Model, RunConfig]:
    store, cfg, _ = _open(path, "warp")
    model = build_stage1(cfg)
    store.apply_to(model)
    return model.eval(), cfg


def save_stage2(model: Stage2Model, cfg: RunConfig, path) -> None:
    layout = json.dumps([list(entry) for entry in CONDITIONING_LAYOUT])
    save_checkpoint(ParamStore.from_module(model), path,
                    _config_entry(cfg, "diffusion", conditioning_layout=layout))


def load_stage2(path) -> tuple[Stage2Model, RunConfig]:
    store, cfg, config = _open(path, "diffusion")
    layout = [tuple(entry) for entry in json.loads(config.get("conditioning_layout", "[]"))]
    if layout != [tuple(entry) for entry in CONDITIONING_LAYOUT]:
        raise CheckpointError(f"{path}: conditioning layout {layout} differs from this build")
    model = build_stage2(cfg)
    store.apply_to(model)
    return model.eval(), cfg


def swap_garments(samples) -> list:
    """Pair each sample with the next sample's garment and caption (unpaired setting)."""
    n = len(samples)
    return [dataclasses.replace(s, garment=samples[(i + 1) % n].garment,
                                caption=samples[(i + 1) % n].caption)
            for i, s in enumerate(samples)]


def evaluate_pipeline(stage1: Stage1Model, stage2: Stage2Model, samples, steps: int = 50,
                      seed: int = 0, net: FixedFeatureNet | None = None) -> tuple[MetricReport, MetricReport]:
    """Return ``(paired, unpaired)`` reports; both compare against the real persons."""
    if len(samples) < 2:
        raise ValueError("evaluation needs at least two samples")
    dtype = next(stage1.parameters()).dtype
    net = net or FixedFeatureNet(dtype=torch.float64)
    persons = torch.stack([torch.from_numpy(s.person) for s in samples]).to(torch.float64)
    reports = []
    for paired, batch in ((True, samples), (False, swap_garments(samples))):
        inputs = prepare_stage2_inputs(batch, stage1, stage2.autoencoder, dtype)
        generated = sample_tryon(stage2, inputs, steps=steps, seed=seed).to(torch.float64)
        reports.append(image_set_metrics(generated, persons, net, paired))
    return reports[0], reports[1]
