"""Shared plumbing: run configuration, seeding, parameter stores, gradient
checking, checkpoints and the raw array file format."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import random
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

__all__ = [
    "RunConfig",
    "ParamStore",
    "CheckpointError",
    "seed_everything",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "write_raw",
    "read_raw",
]


@dataclass
class RunConfig:
    seed: int = 0
    height: int = 64
    width: int = 48
    lr: float = 3.5e-5
    batch_size: int = 6
    epochs: int = 200
    max_steps: int = 0  # 0 = run all epochs
    warmup_steps: int = 0
    lr_decay: str = "none"  # or "cosine" (to 10% of lr at the last step)
    grad_clip: float = 0.0  # global gradient-norm bound, 0 = off
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    lambda_l1: float = 1.0
    lambda_prec: float = 1.0
    lambda_style: float = 100.0
    lambda_owl: float = 1.0
    owl_threshold: float = 0.05
    precision: str = "float32"  # "float64" for gradient checks
    graph_nodes: int = 32
    graph_iters: int = 1
    diffusion_steps: int = 200
    sampling_steps: int = 50
    ae_pretrain_steps: int = 600
    ae_lr: float = 2e-3

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 8")
        for name in ("lambda_l1", "lambda_prec", "lambda_style", "lambda_owl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("optimizer betas must lie in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if not 0 < self.owl_threshold < 1:
            raise ValueError("owl_threshold must lie in (0, 1)")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def lr_factor(self, step: int, total_steps: int) -> float:
        """Multiplier on ``lr`` for optimizer step ``step`` (0-based)."""
        factor = 1.0
        if self.warmup_steps and step < self.warmup_steps:
            factor = (step + 1) / self.warmup_steps
        if self.lr_decay == "cosine" and total_steps > 1:
            progress = min(step / (total_steps - 1), 1.0)
            factor *= 0.1 + 0.45 * (1 + math.cos(math.pi * progress))
        return factor

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n".replace("'", "")
                       for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in types:
                raise ValueError(f"line {lineno}: unknown config entry {line!r}")
            kind = types[key]
            values[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def seed_everything(seed: int) -> np.random.Generator:
    random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


@dataclass
class ParamStore:
    """Named arrays plus per-name trainable flags."""

    params: dict[str, torch.Tensor] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        flags = {name: p.requires_grad for name, p in module.named_parameters()}
        store = cls()
        for name, value in module.state_dict().items():
            store.params[name] = value.detach().clone()
            store.trainable[name] = flags.get(name, False)
        return store

    def apply_to(self, module: nn.Module) -> None:
        expected = module.state_dict()
        missing = [k for k in expected if k not in self.params]
        if missing:
            raise CheckpointError(f"parameter {missing[0]!r} missing from store")
        unexpected = [k for k in self.params if k not in expected]
        if unexpected:
            raise CheckpointError(f"unexpected parameter {unexpected[0]!r} in store")
        for name, value in expected.items():
            if tuple(value.shape) != tuple(self.params[name].shape):
                raise CheckpointError(
                    f"parameter {name!r}: shape {tuple(self.params[name].shape)} "
                    f"!= expected {tuple(value.shape)}")
        module.load_state_dict({k: v.to(expected[k].dtype) for k, v in self.params.items()})
        for name, p in module.named_parameters():
            p.requires_grad_(self.trainable[name])

    def names(self) -> list[str]:
        return list(self.params)

    def __len__(self):
        return len(self.params)


class CheckpointError(RuntimeError):
    pass


def _iter_tensors(params) -> list[torch.Tensor]:
    if isinstance(params, nn.Module):
        return [p for p in params.parameters() if p.requires_grad]
    if isinstance(params, ParamStore):
        return [v for k, v in params.params.items() if params.trainable[k]]
    if isinstance(params, torch.Tensor):
        return [params]
    return list(params)


def grad_check(f: Callable[[], torch.Tensor], params, eps: float = 1e-5,
               n_samples: int = 50, seed: int = 0) -> float:
    """Compare autograd against central differences on sampled entries.

    ``f`` is re-evaluated after each in-place perturbation of ``params`` (a
    module, a ParamStore, a tensor or an iterable of tensors), so it must close
    over them. Returns the maximum relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    tensors = _iter_tensors(params)
    for t in tensors:
        if t.dtype != torch.float64:
            raise ValueError("grad_check requires float64 tensors")
    value = f()
    if not torch.isfinite(value).all():
        raise FloatingPointError("non-finite objective")
    analytic = torch.autograd.grad(value, tensors, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, analytic)]

    sizes = np.array([t.numel() for t in tensors])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for flat in flat_ids:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            local = int(flat - offsets[which])
            view = tensors[which].view(-1)
            orig = view[local].item()
            view[local] = orig + eps
            f_plus = f().item()
            view[local] = orig - eps
            f_minus = f().item()
            view[local] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite objective")
            numeric = (f_plus - f_minus) / (2 * eps)
            exact = analytic[which].reshape(-1)[local].item()
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


# --- checkpoints -------------------------------------------------------------

_FIXED_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(store: ParamStore, path, config: dict | None = None) -> None:
    """Write ``store`` as a zip archive: ``manifest.json`` plus one raw
    little-endian array per parameter. ``config`` is a flat dict stored in the
    manifest together with its hash."""
    config = dict(config or {})
    entries = []
    blobs = {}
    for i, (name, value) in enumerate(store.params.items()):
        arr = value.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        member = f"arrays/{i:04d}.bin"
        blobs[member] = blob
        entries.append({
            "name": name,
            "member": member,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "trainable": bool(store.trainable.get(name, False)),
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
    manifest = {
        "format": "vtryon-checkpoint-1",
        "config": config,
        "config_hash": _dict_hash(config),
        "params": entries,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for member, blob in blobs.items():
            _zip_write(zf, member, blob)
    path.write_bytes(buf.getvalue())


def _dict_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def load_checkpoint(path, expected_names: Iterable[str] | None = None) -> tuple[ParamStore, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(store, config)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {str(path)!r} not found")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"checkpoint {str(path)!r} is corrupt: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint {str(path)!r}: unreadable manifest.json") from exc
        config = manifest.get("config", {})
        if _dict_hash(config) != manifest.get("config_hash"):
            raise CheckpointError(f"checkpoint {str(path)!r}: config hash mismatch")
        store = ParamStore()
        members = set(zf.namelist())
        for entry in manifest["params"]:
            name = entry["name"]
            if entry["member"] not in members:
                raise CheckpointError(f"parameter {name!r}: array data missing")
            try:
                blob = zf.read(entry["member"])
            except (zipfile.BadZipFile, OSError) as exc:
                raise CheckpointError(f"parameter {name!r}: corrupt array data") from exc
            if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise CheckpointError(f"parameter {name!r}: checksum mismatch")
            arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            store.params[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
            store.trainable[name] = bool(entry["trainable"])
    if expected_names is not None:
        for name in expected_names:
            if name not in store.params:
                raise CheckpointError(f"parameter {name!r} missing from checkpoint")
    return store, config


# --- raw arrays ---------------------------------------------------------------

_RAW_MAGIC = "VTRAW1"


def write_raw(path, array) -> None:
    """Header line ``VTRAW1 <dtype> <d0>x<d1>...`` then little-endian data."""
    arr = np.asarray(array)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = f"{_RAW_MAGIC} {arr.dtype.str} {'x'.join(map(str, arr.shape))}\n"
    Path(path).write_bytes(header.encode("ascii") + np.ascontiguousarray(arr).tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    parts = data[:newline].decode("ascii").split(" ") if newline > 0 else []
    if len(parts) != 3 or parts[0] != _RAW_MAGIC:
        raise ValueError(f"{path}: not a raw array file")
    dtype = np.dtype(parts[1])
    shape = tuple(int(s) for s in parts[2].split("x")) if parts[2] else ()
    body = data[newline + 1:]
    if len(body) != dtype.itemsize * int(np.prod(shape)):
        raise ValueError(f"{path}: truncated array data")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
