"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. ``--out`` and
``--seed`` fall back to the VTRYON_OUT and VTRYON_SEED environment variables.
Every command writes ``<command>.manifest`` under ``--out`` recording the
resolved options, the seed, the configuration hash and output checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("vtryon")

COMMANDS = ("generate-data", "train-warp", "train-diffusion", "eval", "warp", "tryon", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _env_int(name: str):
    value = os.environ.get(name)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"environment variable {name}={value!r} is not an integer") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vtryon", description="Synthetic two-stage virtual try-on toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="random seed (env VTRYON_SEED)")
        p.add_argument("--out", default=None, help="output directory (env VTRYON_OUT)")
        return p

    p = command("generate-data", "write a synthetic dataset")
    p.add_argument("--count", type=int, default=64, help="training samples; val/test get count//4 each")
    p.add_argument("--deformations", default="affine,bend", help="comma list of affine, bend")

    p = command("train-warp", "train the warping stage")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", help="key=value run configuration")
    p.add_argument("--out-checkpoint")
    p.add_argument("--log", help="also append per-epoch loss lines to this file")

    p = command("train-diffusion", "pretrain the autoencoder and train the diffusion stage")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out-checkpoint")

    p = command("eval", "paired and unpaired metrics on a dataset split")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--stage2-ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default from config)")

    p = command("warp", "apply the warping stage to one sample directory")
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--sample-dir", required=True)

    p = command("tryon", "generate one try-on image")
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--stage2-ckpt", required=True)
    p.add_argument("--garment", required=True, help="sample directory or garment PNG")
    p.add_argument("--caption", help="garment caption (defaults to the sample's caption)")
    p.add_argument("--person-dir", required=True, help="sample directory supplying pose and agnostic person")
    p.add_argument("--steps", type=int, default=None)

    command("selftest", "compare vectorised operations with loop oracles")
    return parser


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, args, seed: int, config_hash: str, outputs: list[Path]) -> None:
    lines = [f"command={args.command}", f"seed={seed}", f"config_hash={config_hash}"]
    for key, value in sorted(vars(args).items()):
        if key not in ("command", "seed"):
            lines.append(f"option.{key}={value}")
    for path in outputs:
        lines.append(f"output.{path.name}={_sha256(path)}")
    (out / f"{args.command}.manifest").write_text("\n".join(lines) + "\n")


def _load_config(args, seed: int):
    from .runtime import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.replace(seed=seed)


def _samples(data_dir, split):
    from .synth import load_dataset

    samples = load_dataset(data_dir, split)
    if not samples:
        raise FileNotFoundError(f"{data_dir}: no samples in split {split!r}")
    return samples


def cmd_generate_data(args, seed, out):
    from .synth import GeneratorSpec, generate_dataset, save_dataset

    if args.count < 1:
        raise UsageError("--count must be positive")
    deformations = tuple(d.strip() for d in args.deformations.split(",") if d.strip())
    held_out = max(args.count // 4, 1)
    try:
        spec = GeneratorSpec(deformations=deformations, n_train=args.count, n_val=held_out, n_test=held_out)
    except ValueError as exc:
        raise UsageError(f"--deformations: {exc}") from None
    samples = generate_dataset(spec, seed)
    save_dataset(samples, out, header={"seed": seed, "count": args.count, "deformations": args.deformations})
    log.info("wrote %d samples to %s", len(samples), out)
    digest = hashlib.sha256((out / "index.txt").read_bytes()).hexdigest()[:16]
    return digest, [out / "index.txt"]


def cmd_train_warp(args, seed, out):
    from .pipeline import save_stage1
    from .stage1 import train_stage1

    cfg = _load_config(args, seed)
    samples = _samples(args.data_dir, "train")
    log_file = open(args.log, "a") if args.log else None

    def log_epoch(summary):
        if log_file:
            log_file.write("epoch={epoch} l1={l1:.6f} perc={perc:.6f} style={style:.6f} "
                           "owl={owl:.6f} total={total:.6f}\n".format(**summary))
    try:
        model, _ = train_stage1(samples, cfg, log_fn=log_epoch)
    finally:
        if log_file:
            log_file.close()
    ckpt = Path(args.out_checkpoint) if args.out_checkpoint else out / "stage1.ckpt"
    save_stage1(model, cfg, ckpt)
    log.info("saved warping checkpoint %s", ckpt)
    return cfg.config_hash(), [ckpt]


def cmd_train_diffusion(args, seed, out):
    from .diffusion import build_stage2, prepare_stage2_inputs, pretrain_autoencoder, train_stage2
    from .pipeline import load_stage1, save_stage2

    cfg = _load_config(args, seed)
    samples = _samples(args.data_dir, "train")
    stage1, _ = load_stage1(args.stage1_ckpt)
    ae, ae_curve = pretrain_autoencoder(samples, cfg)
    log.info("autoencoder pretrained: l1 %.6f -> %.6f", ae_curve[0] if ae_curve else float("nan"),
             ae_curve[-1] if ae_curve else float("nan"))
    inputs = prepare_stage2_inputs(samples, stage1.to(cfg.dtype), ae, cfg.dtype)
    model = build_stage2(cfg, ae)
    model, _ = train_stage2(inputs, cfg, model)
    ckpt = Path(args.out_checkpoint) if args.out_checkpoint else out / "stage2.ckpt"
    save_stage2(model, cfg, ckpt)
    log.info("saved diffusion checkpoint %s", ckpt)
    return cfg.config_hash(), [ckpt]


def cmd_eval(args, seed, out):
    from .pipeline import evaluate_pipeline, load_stage1, load_stage2

    stage1, _ = load_stage1(args.stage1_ckpt)
    stage2, cfg = load_stage2(args.stage2_ckpt)
    samples = _samples(args.data_dir, args.split)
    steps = args.steps or cfg.sampling_steps
    paired, unpaired = evaluate_pipeline(stage1.to(cfg.dtype), stage2, samples, steps=steps, seed=seed)
    lines = []
    for prefix, report in (("paired", paired), ("unpaired", unpaired)):
        lines += [f"{prefix}.{line}" for line in report.to_text().splitlines()]
    report_path = out / "metrics.txt"
    report_path.write_text("\n".join(lines) + "\n")
    table = ["setting    ssim      lpips_proxy  fid         kid",
             f"paired     {paired.ssim:<9.4f} {paired.lpips_proxy:<12.4f} {paired.fid:<11.4f} {paired.kid:.4f}",
             f"unpaired   {'-':<9} {'-':<12} {unpaired.fid:<11.4f} {unpaired.kid:.4f}"]
    table_path = out / "metrics_table.txt"
    table_path.write_text("\n".join(table) + "\n")
    print("\n".join(table))
    return cfg.config_hash(), [report_path, table_path]


def cmd_warp(args, seed, out):
    from .pipeline import load_stage1
    from .stage1 import stage1_batch
    from .synth import load_sample_dir, write_png
    from .runtime import write_raw
    from .warp import flow_to_color

    model, cfg = load_stage1(args.stage1_ckpt)
    sample = load_sample_dir(args.sample_dir)
    batch = stage1_batch([sample], cfg.dtype)
    with torch.no_grad():
        result = model(batch["garment"], batch["pose"], batch["agnostic"])
    outputs = []
    for name, img in (("warp_g", result.warp_g[0]), ("tryon_c", result.tryon_c[0]),
                      ("source_flow", flow_to_color(result.source_flow[0])),
                      ("reference_flow", flow_to_color(result.reference_flow[0]))):
        write_png(out / f"{name}.png", img.double().numpy())
        outputs.append(out / f"{name}.png")
    for name, arr in (("warp_g", result.warp_g[0]), ("tryon_c", result.tryon_c[0]),
                      ("source_flow", result.source_flow[0])):
        write_raw(out / f"{name}.raw", arr.double().numpy())
        outputs.append(out / f"{name}.raw")
    return cfg.config_hash(), outputs


def cmd_tryon(args, seed, out):
    import dataclasses

    from .diffusion import prepare_stage2_inputs, sample_tryon
    from .pipeline import load_stage1, load_stage2
    from .runtime import write_raw
    from .synth import load_sample_dir, read_png, write_png

    stage1, _ = load_stage1(args.stage1_ckpt)
    stage2, cfg = load_stage2(args.stage2_ckpt)
    person = load_sample_dir(args.person_dir)
    garment_path = Path(args.garment)
    if garment_path.is_dir():
        source = load_sample_dir(garment_path)
        garment, caption = source.garment, source.caption
    elif garment_path.is_file():
        garment, caption = read_png(garment_path), ""
    else:
        raise FileNotFoundError(f"--garment: {garment_path} does not exist")
    if garment.shape != person.garment.shape:
        raise ValueError(f"--garment: shape {garment.shape} differs from {person.garment.shape}")
    caption = args.caption if args.caption is not None else caption
    sample = dataclasses.replace(person, garment=garment.astype(np.float64), caption=caption)
    inputs = prepare_stage2_inputs([sample], stage1.to(cfg.dtype), stage2.autoencoder, cfg.dtype)
    image = sample_tryon(stage2, inputs, steps=args.steps or cfg.sampling_steps, seed=seed)[0]
    write_png(out / "tryon.png", image.double().numpy())
    write_raw(out / "tryon.raw", image.double().numpy())
    return cfg.config_hash(), [out / "tryon.png", out / "tryon.raw"]


def cmd_selftest(args, seed, out):
    from .selftest import run_selftest

    results = run_selftest(seed)
    report = out / "selftest.txt"
    report.write_text("\n".join(r.line() for r in results) + "\n")
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"selftest failed: {', '.join(failed)}")
    return "-", [report]


HANDLERS = {
    "generate-data": cmd_generate_data, "train-warp": cmd_train_warp,
    "train-diffusion": cmd_train_diffusion, "eval": cmd_eval, "warp": cmd_warp,
    "tryon": cmd_tryon, "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout, force=True)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        seed = args.seed if args.seed is not None else _env_int("VTRYON_SEED")
        seed = 0 if seed is None else seed
        out = args.out or os.environ.get("VTRYON_OUT")
        if not out:
            raise UsageError(f"{args.command}: --out (or VTRYON_OUT) is required\n{parser.format_usage()}")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        config_hash, outputs = HANDLERS[args.command](args, seed, out)
        _write_manifest(out, args, seed, config_hash, outputs)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"vtryon {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
