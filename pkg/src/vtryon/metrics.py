"""Image-quality metrics: windowed SSIM, a fixed-feature LPIPS proxy, and
FID / KID over pooled FixedFeatureNet embeddings.

None of these numbers are comparable with published scores computed with
pretrained networks; ``lpips_proxy`` is named accordingly.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .losses import FixedFeatureNet

__all__ = ["ssim", "lpips_proxy", "fid", "kid", "psd_sqrt", "MetricReport", "embed_images",
           "image_set_metrics", "CovarianceWarning"]


class CovarianceWarning(UserWarning):
    pass


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def ssim(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range: float = 2.0) -> float:
    """Mean SSIM over every fully contained ``window`` x ``window`` patch.

    Accepts (H, W), (C, H, W) or (B, C, H, W); local statistics use a uniform
    window with sample (n - 1) covariance, and the mean runs over windows,
    channels and batch.
    """
    a, b = _as_numpy(a), _as_numpy(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {a.shape[-2:]} is smaller than the {window}x{window} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    n = window * window

    def local_mean(x):
        return sliding_window_view(x, (window, window), axis=(-2, -1)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    unbias = n / (n - 1)
    var_a = (local_mean(a * a) - mu_a * mu_a) * unbias
    var_b = (local_mean(b * b) - mu_b * mu_b) * unbias
    cov = (local_mean(a * b) - mu_a * mu_b) * unbias
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def lpips_proxy(a: torch.Tensor, b: torch.Tensor, net: FixedFeatureNet) -> float:
    """Per-tap squared distance of unit-normalized feature vectors, averaged
    over positions, taps and batch."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    dtype = net.weights[0].dtype
    with torch.no_grad():
        taps_a, taps_b = net(a.to(dtype)), net(b.to(dtype))
        total = 0.0
        for fa, fb in zip(taps_a, taps_b):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
            total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total / len(taps_a)


def psd_sqrt(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetric square root; negative eigenvalues beyond round-off are clipped with a warning."""
    sym = (matrix + matrix.T) / 2
    vals, vecs = np.linalg.eigh(sym)
    tol = 1e-10 * max(float(np.abs(vals).max(initial=0.0)), 1e-300)
    if vals.min(initial=0.0) < -tol:
        warnings.warn(f"{name} is not positive semi-definite (min eigenvalue {vals.min():.3e}); "
                      "clipping at 0", CovarianceWarning, stacklevel=2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a, features_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (rows are samples).

    The cross term uses trace(sqrt(S B S)) with S = sqrt(A), which equals
    trace(sqrt(A B)) and keeps every square root symmetric.
    """
    fa, fb = _as_numpy(features_a), _as_numpy(features_b)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError(f"need two (n, D) feature sets of equal D, got {fa.shape} and {fb.shape}")
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    root_a = psd_sqrt(cov_a, "covariance A")
    cross = psd_sqrt(root_a @ cov_b @ root_a, "covariance product")
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))
    return max(value, 0.0)


def kid(features_a, features_b) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel (x.y / D + 1)^3.

    Equal-size sets use the paired U-statistic, which is exactly zero for
    identical sets; otherwise the cross term averages over all pairs.
    """
    fa, fb = _as_numpy(features_a), _as_numpy(features_b)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError(f"need two (n, D) feature sets of equal D, got {fa.shape} and {fb.shape}")
    m, n, d = len(fa), len(fb), fa.shape[1]
    if m < 2 or n < 2:
        raise ValueError("need at least two samples per set")

    def kernel(x, y):
        return (x @ y.T / d + 1.0) ** 3

    kaa, kbb, kab = kernel(fa, fa), kernel(fb, fb), kernel(fa, fb)
    if m == n:
        h = kaa + kbb - kab - kab.T
        return float((h.sum() - np.trace(h)) / (m * (m - 1)))
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2 * kab.mean())


def embed_images(images: torch.Tensor, net: FixedFeatureNet) -> np.ndarray:
    dtype = net.weights[0].dtype
    with torch.no_grad():
        return net.embed(images.to(dtype)).double().numpy()


@dataclass
class MetricReport:
    """One evaluation row; ``ssim`` and ``lpips_proxy`` are NaN for unpaired runs,
    which have no pixel-aligned ground truth."""

    ssim: float
    lpips_proxy: float
    fid: float
    kid: float
    paired: bool
    count: int

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(ssim=float(values["ssim"]), lpips_proxy=float(values["lpips_proxy"]),
                   fid=float(values["fid"]), kid=float(values["kid"]),
                   paired=values["paired"] == "True", count=int(values["count"]))


def image_set_metrics(generated: torch.Tensor, reference: torch.Tensor, net: FixedFeatureNet,
                      paired: bool) -> MetricReport:
    """Metrics of a generated batch against real images.

    Paired runs also score pixel-aligned SSIM and the LPIPS proxy.
    """
    if generated.shape != reference.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(reference.shape)}")
    fg, fr = embed_images(generated, net), embed_images(reference, net)
    nan = math.nan
    return MetricReport(
        ssim=ssim(generated, reference) if paired else nan,
        lpips_proxy=lpips_proxy(generated, reference, net) if paired else nan,
        fid=fid(fg, fr),
        kid=kid(fg, fr),
        paired=paired,
        count=len(generated),
    )
