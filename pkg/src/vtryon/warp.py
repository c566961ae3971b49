"""Backward (gather) warping with bilinear sampling and border clamping.

Flows are stored in pixels, channel 0 = x offset, channel 1 = y offset. The
sample position for output pixel (y, x) is (x + flow_x, y + flow_y).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .runtime import read_raw, write_raw

__all__ = ["backward_warp", "average_flow", "upsample_flow", "base_grid",
           "save_flow", "load_flow", "flow_to_color"]


def base_grid(h: int, w: int, dtype=torch.float64, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(h, dtype=dtype, device=device).view(h, 1).expand(h, w)
    xs = torch.arange(w, dtype=dtype, device=device).view(1, w).expand(h, w)
    return xs, ys


def backward_warp(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` (C,H,W or B,C,H,W) at base grid + ``flow`` (2,H,W or B,2,H,W)."""
    squeeze = src.dim() == 3
    if squeeze:
        src, flow = src.unsqueeze(0), flow.unsqueeze(0)
    if src.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"bad shapes src={tuple(src.shape)} flow={tuple(flow.shape)}")
    b, c, h, w = src.shape
    if flow.shape[0] != b or flow.shape[2:] != (h, w):
        raise ValueError(f"shape mismatch: src {tuple(src.shape)} vs flow {tuple(flow.shape)}")

    xs, ys = base_grid(h, w, dtype=flow.dtype, device=flow.device)
    x = (xs + flow[:, 0]).clamp(0, w - 1)
    y = (ys + flow[:, 1]).clamp(0, h - 1)
    # clamp the left corner so x0 + 1 stays in range; weight 1 then lands on x0 + 1
    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    out = ((1 - wy) * ((1 - wx) * gather(y0, x0) + wx * gather(y0, x1))
           + wy * ((1 - wx) * gather(y1, x0) + wx * gather(y1, x1)))
    return out.squeeze(0) if squeeze else out


def average_flow(flows: torch.Tensor) -> torch.Tensor:
    """Unit-weight mean over the flow axis: (m,2,H,W) -> (2,H,W), (B,m,2,H,W) -> (B,2,H,W)."""
    if flows.dim() not in (4, 5) or flows.shape[-3] != 2:
        raise ValueError(f"expected (..., m, 2, H, W), got {tuple(flows.shape)}")
    m = flows.shape[-4]
    if m == 0:
        raise ValueError("average_flow needs at least one flow")
    # shifting by the first flow makes the average of identical flows exact
    first = flows.select(-4, 0)
    return first + (flows - first.unsqueeze(-4)).sum(dim=-4) / m


def upsample_flow(flow: torch.Tensor, height: int, width: int | None = None) -> torch.Tensor:
    """Bilinear (corner-aligned) resize of a flow, offsets scaled by the factor."""
    squeeze = flow.dim() == 3
    if squeeze:
        flow = flow.unsqueeze(0)
    h, w = flow.shape[-2:]
    if width is None:
        width = w * height // h
    if height % h or width % w or height // h != width // w:
        raise ValueError(f"non-integer upsampling factor {h}x{w} -> {height}x{width}")
    factor = height // h
    up = F.interpolate(flow, size=(height, width), mode="bilinear", align_corners=True) * factor
    return up.squeeze(0) if squeeze else up


def save_flow(path, flow) -> None:
    if isinstance(flow, torch.Tensor):
        flow = flow.detach().cpu().numpy()
    write_raw(path, flow)


def load_flow(path) -> torch.Tensor:
    arr = read_raw(path)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"{path}: expected a 2xHxW flow, got shape {arr.shape}")
    return torch.from_numpy(arr)


def flow_to_color(flow: torch.Tensor, max_mag: float | None = None) -> torch.Tensor:
    """Colour-wheel rendering (hue = direction, saturation = magnitude), 3xHxW in [0,1]."""
    flow = flow.detach().double()
    fx, fy = flow[0], flow[1]
    mag = torch.sqrt(fx ** 2 + fy ** 2)
    scale = max_mag if max_mag else float(mag.max()) or 1.0
    hue = (torch.atan2(-fy, -fx) / torch.pi + 1) / 2  # [0, 1]
    sat = (mag / scale).clamp(0, 1)
    h6 = hue * 6
    i = h6.floor() % 6
    f = h6 - h6.floor()
    p = 1 - sat
    q = 1 - sat * f
    t = 1 - sat * (1 - f)
    one = torch.ones_like(sat)
    table = [(one, t, p), (q, one, p), (p, one, t), (p, q, one), (t, p, one), (one, p, q)]
    rgb = torch.zeros(3, *sat.shape, dtype=torch.float64)
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        rgb[0][sel], rgb[1][sel], rgb[2][sel] = r[sel], g[sel], b[sel]
    return rgb
