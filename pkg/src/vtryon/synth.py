"""Procedural try-on pairs with known warps and burned-in self-occlusion.

Convention: images are 3xHxW in [-1, 1] with background -1. A deformation is
described by its backward map T (target pixel -> garment pixel); the flow is
T(x) - x and every target-space image is produced by ``backward_warp`` with
that flow, so :func:`verify_sample` can re-derive the supervision exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .runtime import read_raw, write_raw
from .warp import backward_warp

log = logging.getLogger(__name__)

__all__ = [
    "TryonSample", "GeneratorSpec", "Affine", "Bend", "ArmBar", "COLORS", "SKIN", "VOCAB",
    "make_sample", "generate_dataset", "verify_sample", "save_dataset", "load_dataset",
    "load_sample_dir", "save_sample_dir", "silhouette", "garment_alpha", "tokenize",
    "write_png", "read_png",
]

COLORS = {
    "red": (0.9, -0.7, -0.6),
    "green": (-0.6, 0.7, -0.5),
    "blue": (-0.6, -0.4, 0.9),
    "yellow": (0.9, 0.8, -0.7),
    "white": (0.9, 0.9, 0.9),
    "purple": (0.5, -0.6, 0.7),
    "orange": (0.95, 0.2, -0.8),
    "cyan": (-0.7, 0.8, 0.9),
    "pink": (0.9, 0.1, 0.5),
    "gray": (0.2, 0.2, 0.25),
}
SKIN = (0.75, 0.35, 0.05)
TEXTURE_WORDS = {"stripes": "striped", "checker": "checked", "glyphs": "lettered", "solid": "plain"}

VOCAB = tuple(sorted(set(COLORS) | set(TEXTURE_WORDS.values()) | {
    "short-sleeve", "long-sleeve", "short", "long", "sleeve", "sleeveless", "top", "shirt", "tee", "blouse", "tank", "polo",
    "with", "and", "a", "the", "cotton", "linen", "dark", "light", "bright", "pale", "pattern",
    "print", "collar", "round", "neck", "slim", "loose", "fit", "casual", "sport", "summer",
    "winter", "soft", "bold", "thin", "wide",
}))

_GLYPHS = {
    "A": ["010", "101", "111", "101", "101"],
    "T": ["111", "010", "010", "010", "010"],
    "X": ["101", "101", "010", "101", "101"],
    "O": ["111", "101", "101", "101", "111"],
    "H": ["101", "101", "111", "101", "101"],
    "L": ["100", "100", "100", "100", "111"],
}


def tokenize(caption: str) -> list[str]:
    return caption.lower().split()


# --- deformations and occluders -------------------------------------------------

def _center(h, w):
    return (w - 1) / 2.0, (h - 1) / 2.0


@dataclass(frozen=True)
class Affine:
    """Backward map T(x) = c + A (x - c) + b about the image centre c."""

    matrix: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    offset: tuple[float, float] = (0.0, 0.0)

    def flow(self, h, w) -> np.ndarray:
        cx, cy = _center(h, w)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        (a, b), (c, d) = self.matrix
        dx, dy = xs - cx, ys - cy
        x_src = cx + a * dx + b * dy + self.offset[0]
        y_src = cy + c * dx + d * dy + self.offset[1]
        return np.stack([x_src - xs, y_src - ys])

    def forward_points(self, pts: np.ndarray, h, w) -> np.ndarray:
        cx, cy = _center(h, w)
        inv = np.linalg.inv(np.array(self.matrix))
        rel = pts - np.array([cx, cy]) - np.array(self.offset)
        return rel @ inv.T + np.array([cx, cy])


@dataclass(frozen=True)
class Bend:
    """Horizontal sinusoidal bend: T(x, y) = (x + amp * sin(2 pi y / period + phase), y)."""

    amplitude: float = 2.0
    period: float = 48.0
    phase: float = 0.0

    def _shift(self, y):
        return self.amplitude * np.sin(2 * np.pi * y / self.period + self.phase)

    def flow(self, h, w) -> np.ndarray:
        ys, _ = np.mgrid[0:h, 0:w].astype(np.float64)
        return np.stack([self._shift(ys), np.zeros_like(ys)])

    def forward_points(self, pts: np.ndarray, h, w) -> np.ndarray:
        out = pts.astype(np.float64).copy()
        out[:, 0] -= self._shift(out[:, 1])
        return out


@dataclass(frozen=True)
class ArmBar:
    """A thick segment (an arm across the torso) in target pixel coordinates."""

    p0: tuple[float, float]
    p1: tuple[float, float]
    half_width: float

    def mask(self, h, w) -> np.ndarray:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        p0, p1 = np.array(self.p0), np.array(self.p1)
        d = p1 - p0
        t = ((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))
        return dist <= self.half_width


# --- canonical rendering -----------------------------------------------------------

def _rect(h, w, r0, r1, c0, c1):
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys >= round(r0 * h)) & (ys < round(r1 * h)) & (xs >= round(c0 * w)) & (xs < round(c1 * w))


def garment_alpha(h, w, sleeve: str) -> np.ndarray:
    torso = _rect(h, w, 0.28, 0.85, 0.27, 0.73)
    bottom = 0.42 if sleeve == "short" else 0.75
    sleeves = _rect(h, w, 0.28, bottom, 0.12, 0.27) | _rect(h, w, 0.28, bottom, 0.73, 0.88)
    neck = _rect(h, w, 0.28, 0.33, 0.42, 0.58)
    return (torso | sleeves) & ~neck


def _body_alpha(h, w) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    head = (ys - 0.15 * h) ** 2 + (xs - 0.5 * w) ** 2 <= (0.09 * h) ** 2
    neck = _rect(h, w, 0.2, 0.3, 0.44, 0.56)
    torso = _rect(h, w, 0.28, 0.9, 0.29, 0.71)
    arms = _rect(h, w, 0.29, 0.8, 0.13, 0.26) | _rect(h, w, 0.29, 0.8, 0.74, 0.87)
    return head | neck | torso | arms


def _texture(h, w, kind: str, c1, c2, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.empty((3, h, w))
    img[:] = np.array(c1)[:, None, None]
    if kind == "stripes":
        period = int(rng.integers(4, 7))
        sel = (ys // (period // 2 + 1)) % 2 == 1
    elif kind == "checker":
        cell = int(rng.integers(4, 7))
        sel = ((ys // cell) + (xs // cell)) % 2 == 1
    elif kind == "glyphs":
        sel = np.zeros((h, w), bool)
        letters = list(_GLYPHS)
        for r in range(0, h - 5, 8):
            for c in range(0, w - 3, 6):
                g = _GLYPHS[letters[int(rng.integers(len(letters)))]]
                for dy, row in enumerate(g):
                    for dx, bit in enumerate(row):
                        if bit == "1":
                            sel[r + 2 + dy, c + 1 + dx] = True
    elif kind == "solid":
        sel = np.zeros((h, w), bool)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    img[:, sel] = np.array(c2)[:, None]
    return img


def _canonical_keypoints(h, w) -> dict[str, np.ndarray]:
    pts = {
        "head": (0.5, 0.15), "neck": (0.5, 0.27),
        "l_shoulder": (0.25, 0.30), "r_shoulder": (0.75, 0.30),
        "l_elbow": (0.19, 0.55), "r_elbow": (0.81, 0.55),
        "l_hip": (0.35, 0.85), "r_hip": (0.65, 0.85),
    }
    return {k: np.array([fx * (w - 1), fy * (h - 1)]) for k, (fx, fy) in pts.items()}


def _draw_line(canvas: np.ndarray, p0, p1):
    h, w = canvas.shape
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])) * 2) + 2
    for t in np.linspace(0.0, 1.0, n):
        x = int(round(p0[0] + t * (p1[0] - p0[0])))
        y = int(round(p0[1] + t * (p1[1] - p0[1])))
        if 0 <= x < w and 0 <= y < h:
            canvas[y, x] = True


_TORSO_LIMBS = [("head", "neck"), ("neck", "l_hip"), ("neck", "r_hip"), ("l_shoulder", "r_shoulder"),
                ("l_hip", "r_hip")]
_ARM_LIMBS = [("l_shoulder", "l_elbow"), ("r_shoulder", "r_elbow")]


def _render_pose(h, w, deformation, occluder: ArmBar | None) -> np.ndarray:
    canon = _canonical_keypoints(h, w)
    names = list(canon)
    moved = deformation.forward_points(np.stack([canon[k] for k in names]), h, w)
    kp = dict(zip(names, moved))
    planes = np.zeros((3, h, w), bool)
    for a, b in _TORSO_LIMBS:
        _draw_line(planes[0], kp[a], kp[b])
    for a, b in _ARM_LIMBS:
        _draw_line(planes[1], kp[a], kp[b])
    if occluder is not None:
        _draw_line(planes[2], occluder.p0, occluder.p1)
    return np.where(planes, 1.0, -1.0)


def silhouette(img: np.ndarray | torch.Tensor, level: float = -0.5):
    """Foreground = any channel above ``level`` (background is -1)."""
    if isinstance(img, torch.Tensor):
        return (img > level).any(dim=-3, keepdim=True)
    return (np.asarray(img) > level).any(axis=-3, keepdims=True)


def _warp_np(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    return backward_warp(torch.from_numpy(img), torch.from_numpy(flow)).numpy()


# --- samples -----------------------------------------------------------------------

@dataclass
class TryonSample:
    garment: np.ndarray
    pose: np.ndarray
    agnostic: np.ndarray
    gt_warp: np.ndarray
    gt_flow: np.ndarray
    occlusion_mask: np.ndarray
    person: np.ndarray
    caption: str
    coarse_body_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    IMAGE_FIELDS = ("garment", "pose", "agnostic", "gt_warp", "person")
    MASK_FIELDS = ("occlusion_mask", "coarse_body_mask")

    @property
    def size(self) -> tuple[int, int]:
        return self.garment.shape[-2], self.garment.shape[-1]


def make_sample(h: int = 64, w: int = 48, texture: str = "stripes", color: str = "red",
                color2: str = "white", sleeve: str = "short", deformation=Affine(),
                occluder: ArmBar | None = None, texture_seed: int = 0) -> TryonSample:
    """Render one pair deterministically from explicit parameters."""
    if sleeve not in ("short", "long"):
        raise ValueError(f"unknown sleeve style {sleeve!r}")
    rng = np.random.default_rng(texture_seed)
    alpha = garment_alpha(h, w, sleeve)
    garment = np.where(alpha[None], _texture(h, w, texture, COLORS[color], COLORS[color2], rng), -1.0)

    flow = deformation.flow(h, w)
    warped = _warp_np(garment, flow)

    body = np.where(_body_alpha(h, w)[None], np.array(SKIN)[:, None, None], -1.0)
    person = _warp_np(np.where(alpha[None], garment, body), flow)
    alpha_w = _warp_np(alpha[None].astype(np.float64), flow)[0] > 0.5

    occluded = occluder.mask(h, w) if occluder is not None else np.zeros((h, w), bool)
    mask = (~occluded).astype(np.float64)[None]
    gt_warp = warped * mask

    person[:, occluded] = np.array(SKIN)[:, None]

    grow = alpha_w.copy()
    grow[1:] |= alpha_w[:-1]
    grow[:-1] |= alpha_w[1:]
    grow[:, 1:] |= alpha_w[:, :-1]
    grow[:, :-1] |= alpha_w[:, 1:]
    agnostic = person.copy()
    agnostic[:, grow & ~occluded] = 0.0

    caption = f"{color} {TEXTURE_WORDS[texture]} {sleeve}-sleeve top"
    return TryonSample(
        garment=garment,
        pose=_render_pose(h, w, deformation, occluder),
        agnostic=agnostic,
        gt_warp=gt_warp,
        gt_flow=flow,
        occlusion_mask=mask,
        person=person,
        caption=caption,
        coarse_body_mask=silhouette(person).astype(np.float64),
        meta={"texture": texture, "color": color, "color2": color2, "sleeve": sleeve,
              "deformation": repr(deformation), "occluder": repr(occluder)},
    )


def verify_sample(s: TryonSample, tol: float = 1e-6) -> bool:
    """Re-derive the hole-burned target from (garment, flow, mask)."""
    expected = _warp_np(s.garment, s.gt_flow) * s.occlusion_mask
    err = np.abs(expected - s.gt_warp)
    problems = []
    if not np.all(np.isin(s.occlusion_mask, (0.0, 1.0))):
        problems.append("occlusion mask is not binary")
    for name in TryonSample.IMAGE_FIELDS:
        arr = getattr(s, name)
        if not np.all(np.isfinite(arr)) or arr.min() < -1 or arr.max() > 1:
            problems.append(f"{name} outside [-1, 1]")
    if err.max() >= tol:
        c, y, x = np.unravel_index(int(err.argmax()), err.shape)
        problems.append(f"gt_warp mismatch {err.max():.3g} at channel {c}, pixel ({y}, {x})")
    for p in problems:
        log.warning("sample %s: %s", s.meta.get("name", "?"), p)
    return not problems


# --- dataset ---------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    textures: tuple[str, ...] = ("stripes", "checker", "glyphs", "solid")
    deformations: tuple[str, ...] = ("affine", "bend")
    occluders: tuple[str, ...] = ("none", "arm-bar")
    sleeves: tuple[str, ...] = ("short", "long")
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    height: int = 64
    width: int = 48
    max_rotation_deg: float = 8.0
    max_scale: float = 0.08
    max_shear: float = 0.05
    max_shift: float = 3.0
    max_bend: float = 3.0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("split sizes must be positive")
        if self.height % 8 or self.width % 8:
            raise ValueError("image size must be divisible by 8")
        for name, allowed in (("textures", TEXTURE_WORDS), ("deformations", ("affine", "bend")),
                              ("occluders", ("none", "arm-bar")), ("sleeves", ("short", "long"))):
            values = getattr(self, name)
            if not values or any(v not in allowed for v in values):
                raise ValueError(f"invalid {name}: {values}")
        limit = self.height / 4
        if self.offset_bound() > limit:
            raise ValueError(f"deformation bound {self.offset_bound():.2f}px exceeds H/4 = {limit:.2f}px")

    def offset_bound(self) -> float:
        half_diag = math.hypot(self.height, self.width) / 2
        linear = math.radians(self.max_rotation_deg) + self.max_scale + self.max_shear
        return max(linear * half_diag + math.hypot(self.max_shift, self.max_shift), self.max_bend)


def _draw_deformation(spec: GeneratorSpec, kind: str, rng: np.random.Generator):
    if kind == "affine":
        th = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
        s = 1 + rng.uniform(-spec.max_scale, spec.max_scale)
        sh = rng.uniform(-spec.max_shear, spec.max_shear)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        m = rot @ np.array([[s, sh], [0.0, s]])
        off = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
        return Affine(tuple(map(tuple, m.tolist())), (float(off[0]), float(off[1])))
    return Bend(amplitude=float(rng.uniform(-spec.max_bend, spec.max_bend)),
                period=float(rng.uniform(spec.height / 2, spec.height)),
                phase=float(rng.uniform(0, 2 * np.pi)))


def _draw_occluder(spec: GeneratorSpec, rng: np.random.Generator) -> ArmBar:
    h, w = spec.height, spec.width
    cx = rng.uniform(0.4, 0.6) * w
    cy = rng.uniform(0.45, 0.7) * h
    ang = rng.uniform(-math.pi / 5, math.pi / 5)
    half_len = 0.3 * w
    dx, dy = half_len * math.cos(ang), half_len * math.sin(ang)
    return ArmBar((cx - dx, cy - dy), (cx + dx, cy + dy), float(rng.uniform(1.5, 3.0)))


def _draw_sample(spec: GeneratorSpec, seed_seq: np.random.SeedSequence) -> TryonSample:
    rng = np.random.default_rng(seed_seq)
    texture = spec.textures[int(rng.integers(len(spec.textures)))]
    colors = list(COLORS)
    i, j = rng.choice(len(colors), size=2, replace=False)
    sleeve = spec.sleeves[int(rng.integers(len(spec.sleeves)))]
    deformation = _draw_deformation(spec, spec.deformations[int(rng.integers(len(spec.deformations)))], rng)
    occ_kind = spec.occluders[int(rng.integers(len(spec.occluders)))]
    occluder = _draw_occluder(spec, rng) if occ_kind == "arm-bar" else None
    sample = make_sample(spec.height, spec.width, texture, colors[i], colors[j], sleeve,
                         deformation, occluder, texture_seed=int(rng.integers(2 ** 31)))
    if np.abs(sample.gt_flow).max() > spec.height / 4:
        raise ValueError("generated flow exceeds H/4")
    return sample


def generate_dataset(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> list[TryonSample]:
    """Train, val and test samples (in that order), each tagged in ``meta['split']``.

    Every split draws from its own spawned seed sequence.
    """
    root = np.random.SeedSequence(seed)
    samples = []
    for split, count, child in zip(("train", "val", "test"), (spec.n_train, spec.n_val, spec.n_test),
                                   root.spawn(3)):
        for k, seq in enumerate(child.spawn(count)):
            s = _draw_sample(spec, seq)
            s.meta.update(split=split, name=f"{split}_{k:04d}")
            samples.append(s)
    return samples


# --- directory format --------------------------------------------------------------

def write_png(path, img: np.ndarray) -> None:
    """3xHxW or 1xHxW array in [-1, 1] (images) or {0, 1} (masks) -> 8-bit PNG."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[0] == 1:
        px = np.round(np.clip(arr[0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(px, mode="L").save(path, format="PNG")
    else:
        px = np.round((np.clip(arr, -1, 1) + 1) * 127.5).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(px, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Inverse of :func:`write_png` up to 8-bit quantisation."""
    px = np.asarray(Image.open(path))
    if px.ndim == 2:
        return (px.astype(np.float64) / 255.0)[None]
    return px[..., :3].astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def save_sample_dir(s: TryonSample, d) -> None:
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    for name in TryonSample.IMAGE_FIELDS + TryonSample.MASK_FIELDS:
        arr = getattr(s, name)
        write_png(d / f"{name}.png", arr)
        write_raw(d / f"{name}.raw", arr)
    write_raw(d / "gt_flow.raw", s.gt_flow)
    lines = [f"caption={s.caption}"] + [f"{k}={v}" for k, v in sorted(s.meta.items())]
    (d / "meta.txt").write_text("\n".join(lines) + "\n")


def load_sample_dir(d) -> TryonSample:
    d = Path(d)
    if not (d / "meta.txt").is_file():
        raise FileNotFoundError(f"{d}: not a sample directory (meta.txt missing)")
    meta = dict(line.split("=", 1) for line in (d / "meta.txt").read_text().splitlines() if "=" in line)
    caption = meta.pop("caption")
    arrays = {name: read_raw(d / f"{name}.raw")
              for name in TryonSample.IMAGE_FIELDS + TryonSample.MASK_FIELDS + ("gt_flow",)}
    return TryonSample(caption=caption, meta=meta, **arrays)


def save_dataset(samples: list[TryonSample], root, header: dict | None = None) -> None:
    """One sub-directory per sample plus ``index.txt`` (name, split, caption)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# vtryon dataset v1"] + [f"# {k}={v}" for k, v in sorted((header or {}).items())]
    for s in samples:
        name = s.meta["name"]
        save_sample_dir(s, root / name)
        lines.append(f"{name}\t{s.meta.get('split', '')}\t{s.caption}")
    (root / "index.txt").write_text("\n".join(lines) + "\n")


def load_dataset(root, split: str | None = None) -> list[TryonSample]:
    root = Path(root)
    index = root / "index.txt"
    if not index.is_file():
        raise FileNotFoundError(f"{root}: no index.txt")
    out = []
    for line in index.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        name, sample_split, _ = line.split("\t")
        if split is None or sample_split == split:
            out.append(load_sample_dir(root / name))
    return out
