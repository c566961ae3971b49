"""Compare every vectorised operation against its loop oracle on seeded inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import oracles
from .dcaa import DcaaBlock, dcaa_attend
from .gfw import ContextGraphConv, build_correlation
from .losses import gram, owl_loss
from .metrics import fid, ssim
from .warp import backward_warp

__all__ = ["CheckResult", "run_selftest"]


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<22} error={self.error:.3e} tolerance={self.tolerance:.0e}"


def _t(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def _max_abs(a, b) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).max())


def check_correlation(rng) -> CheckResult:
    fs, fr = rng.normal(size=(2, 4, 3, 2))
    got = build_correlation(_t(fs)[None], _t(fr)[None])[0].numpy()
    return CheckResult("correlation", _max_abs(got, oracles.correlation(fs, fr)), 1e-12)


def check_warp(rng) -> CheckResult:
    img = rng.normal(size=(2, 5, 6))
    flow = rng.uniform(-4, 4, size=(2, 5, 6))
    got = backward_warp(_t(img), _t(flow)).numpy()
    return CheckResult("bilinear warp", _max_abs(got, oracles.bilinear_warp(img, flow)), 1e-12)


def check_gram(rng) -> CheckResult:
    feat = rng.normal(size=(3, 8, 8))
    got = gram(_t(feat)[None])[0].numpy()
    return CheckResult("gram", _max_abs(got, oracles.gram(feat)), 1e-12)


def check_graph_conv(rng) -> CheckResult:
    nodes = rng.normal(size=(5, 4))
    conv = ContextGraphConv(4).double()
    with torch.no_grad():
        got = conv(_t(nodes)[None])[0][0].numpy()
    weight = conv.weight.weight.detach().numpy()
    return CheckResult("context graph conv", _max_abs(got, oracles.context_graph_conv(nodes, weight)), 1e-10)


def check_dcaa(rng) -> CheckResult:
    torch.manual_seed(0)
    block = DcaaBlock(4).double()
    with torch.no_grad():
        block.w_key_img.weight.add_(_t(rng.normal(scale=0.3, size=(4, 4))))
    z, x_t, g_i = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    with torch.no_grad():
        got = dcaa_attend(_t(z), _t(x_t), _t(g_i), block).numpy()
    mats = [m.weight.detach().numpy() for m in (block.w_query, block.w_key, block.w_value,
                                                block.w_key_img, block.w_value_img)]
    return CheckResult("decoupled attention", _max_abs(got, oracles.decoupled_attention(z, x_t, g_i, *mats)), 1e-10)


def check_ssim(rng) -> CheckResult:
    a, b = rng.uniform(-1, 1, size=(2, 9, 9))
    return CheckResult("ssim", abs(ssim(a, b) - oracles.ssim(a, b)), 1e-10)


def check_owl(rng) -> CheckResult:
    gt = rng.uniform(-1, 1, size=(3, 6, 5))
    gt[:, 2:4, 1:3] = 0.0
    pred = rng.uniform(-1, 1, size=(3, 6, 5))
    got = float(owl_loss(_t(gt)[None], _t(pred)[None]))
    return CheckResult("occlusion-aware loss", abs(got - oracles.owl(gt, pred)), 1e-12)


def check_fid_shift(rng, n: int = 5000, shift: float = 0.5) -> CheckResult:
    a = rng.normal(size=(n, 1))
    b = rng.normal(size=(n, 1)) + shift
    return CheckResult("fid 1-d mean shift", abs(fid(a, b) - shift ** 2) / shift ** 2, 0.1)


CHECKS = (check_correlation, check_warp, check_gram, check_graph_conv, check_dcaa,
          check_ssim, check_owl, check_fid_shift)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    results = []
    for i, check in enumerate(CHECKS):
        results.append(check(np.random.default_rng([seed, i])))
    return results
