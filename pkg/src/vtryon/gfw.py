"""Graph-based flow warping.

Pipeline for one application (source features warped towards a reference):

    all-pairs correlation -> motion feature f_s
    reference -> context encoder -> f_c
    f_c, f_s -> soft-assignment projection -> context / source graph nodes
    context graph conv (adjacency = Gram of context nodes) and an adaptive
    source graph whose adjacency is produced by a context-conditioned learner
    residual back-projection with zero-initialised gates
    channel-attention fusion -> m flows + attention -> mean flow

All tensors are batched (B, C, h, w); node tensors are (B, K, D).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LEAK, ContextEncoder
from .warp import average_flow, backward_warp

__all__ = [
    "GraphNodes", "build_correlation", "MotionEncoder", "GraphProjection",
    "GraphLearner", "ContextGraphConv", "AdaptiveGraphConv", "graph_reason",
    "back_project", "normalize_gram_adjacency", "OffsetFusion", "GFW",
]


def build_correlation(feat_s: torch.Tensor, feat_r: torch.Tensor) -> torch.Tensor:
    """(B,C,h,w) x (B,C,h,w) -> (B, h*w, h*w); entry [p, q] = <s_p, r_q> / sqrt(C)."""
    if feat_s.shape != feat_r.shape:
        raise ValueError(f"shape mismatch {tuple(feat_s.shape)} vs {tuple(feat_r.shape)}")
    b, c, h, w = feat_s.shape
    s = feat_s.reshape(b, c, h * w)
    r = feat_r.reshape(b, c, h * w)
    return torch.einsum("bcp,bcq->bpq", s, r) / math.sqrt(c)


class MotionEncoder(nn.Module):
    """Four convolutions over the correlation volume laid out on the reference grid.

    Each reference pixel q carries its column of similarities to every source
    pixel, i.e. an (h*w)-channel map aligned with the flow grid.
    """

    def __init__(self, grid: tuple[int, int], out_channels: int, hidden: int = 96):
        super().__init__()
        self.grid = tuple(grid)
        n = grid[0] * grid[1]
        widths = (n, hidden, hidden, out_channels, out_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3 if i else 1, padding=1 if i else 0)
            for i in range(4))

    def forward(self, corr: torch.Tensor) -> torch.Tensor:
        b, p, q = corr.shape
        h, w = self.grid
        if p != h * w or q != h * w:
            raise ValueError(f"correlation {p}x{q} does not match grid {h}x{w}")
        x = corr.reshape(b, p, h, w)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < 3:
                x = F.leaky_relu(x, LEAK)
        return x


@dataclass
class GraphNodes:
    """Node embeddings U (B,K,D), adjacency (B,K,K) and the soft assignment S (K, h*w)."""

    U: torch.Tensor
    kind: str
    A: torch.Tensor | None = None
    assignment: torch.Tensor | None = None
    grid: tuple[int, int] | None = None


class GraphProjection(nn.Module):
    """Learned soft assignment of the h*w pixels to K nodes (softmax over pixels)."""

    def __init__(self, grid: tuple[int, int], nodes: int):
        super().__init__()
        n = grid[0] * grid[1]
        if nodes > n:
            raise ValueError(f"K={nodes} graph nodes exceed the {n} pixels of a {grid[0]}x{grid[1]} grid")
        self.grid = tuple(grid)
        self.logits = nn.Parameter(0.1 * torch.randn(nodes, n))

    def assignment(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    def forward(self, f: torch.Tensor, kind: str) -> GraphNodes:
        b, c, h, w = f.shape
        if (h, w) != self.grid:
            raise ValueError(f"feature grid {h}x{w} != projection grid {self.grid}")
        S = self.assignment()
        U = torch.einsum("kp,bcp->bkc", S, f.reshape(b, c, h * w))
        return GraphNodes(U=U, kind=kind, assignment=S, grid=(h, w))


def normalize_gram_adjacency(A: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Rectify then divide each row by its sum; an identity Gram stays identity."""
    A = F.relu(A)
    return A / (A.sum(dim=-1, keepdim=True) + eps)


class ContextGraphConv(nn.Module):
    """Û_c = rownorm(U_c U_cᵀ) U_c W_g."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Linear(dim, dim, bias=False)

    def adjacency(self, U: torch.Tensor) -> torch.Tensor:
        return U @ U.transpose(-1, -2)

    def forward(self, U: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        A = self.adjacency(U)
        if not torch.isfinite(A).all():
            raise FloatingPointError("non-finite context adjacency")
        return normalize_gram_adjacency(A) @ self.weight(U), A


class GraphLearner(nn.Module):
    """Two-layer node network producing the adaptive source adjacency.

    Layer 1 is channel-wise on U_s and modulated by a scale/shift computed from
    the mean context node; layer 2 mixes each node with the node average
    (permutation-equivariant node interaction). The adjacency is the softmax of
    the scaled similarity of the refined nodes.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.layer1 = nn.Linear(dim, dim)
        self.theta = nn.Linear(dim, 2 * dim)
        self.self_mix = nn.Linear(dim, dim)
        self.node_mix = nn.Linear(dim, dim, bias=False)
        with torch.no_grad():
            self.theta.weight.mul_(0.1)
            self.theta.bias.zero_()

    def forward(self, U_s: torch.Tensor, U_c: torch.Tensor) -> torch.Tensor:
        scale, shift = self.theta(U_c.mean(dim=1, keepdim=True)).chunk(2, dim=-1)
        h = F.relu(self.layer1(U_s) * (1 + scale) + shift)
        h = F.relu(self.self_mix(h) + self.node_mix(h.mean(dim=1, keepdim=True)))
        scores = h @ h.transpose(-1, -2) / math.sqrt(self.dim)
        if not torch.isfinite(scores).all():
            raise FloatingPointError("non-finite adaptive adjacency")
        return torch.softmax(scores, dim=-1)


class AdaptiveGraphConv(nn.Module):
    """Û_s = Ǎ_s U_s W_a with Ǎ_s from the graph learner (rows already sum to one)."""

    def __init__(self, dim: int):
        super().__init__()
        self.learner = GraphLearner(dim)
        self.weight = nn.Linear(dim, dim, bias=False)

    def forward(self, U_s, U_c):
        A_s = self.learner(U_s, U_c)
        return A_s @ self.weight(U_s), A_s


def graph_reason(U_c: torch.Tensor, U_s: torch.Tensor, context_conv: ContextGraphConv,
                 source_conv: AdaptiveGraphConv, iterations: int = 1):
    """Run ``iterations`` rounds of context and adaptive source graph convolution.

    Returns ``(Û_c, Û_s, A_c, Ǎ_s)`` with the adjacencies of the last round.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if U_c.shape[-1] != U_s.shape[-1]:
        raise ValueError("context and source node widths differ")
    A_c = A_s = None
    for _ in range(iterations):
        U_c_next, A_c = context_conv(U_c)
        U_s, A_s = source_conv(U_s, U_c)
        U_c = U_c_next
    return U_c, U_s, A_c, A_s


def back_project(f: torch.Tensor, nodes: GraphNodes, U_hat: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """f + gate * reshape(Sᵀ Û)."""
    if nodes.assignment is None:
        raise ValueError("graph nodes carry no assignment to project back with")
    b, c, h, w = f.shape
    back = torch.einsum("kp,bkc->bcp", nodes.assignment, U_hat).reshape(b, c, h, w)
    return f + gate * back


class OffsetFusion(nn.Module):
    """(1 + F_ch(f̂_s)) * concat(f̂_c, f̂_s) -> conv head -> m flows + attention."""

    def __init__(self, dim: int, m: int = 6, reduction: int = 4, max_offset: float = 4.0):
        super().__init__()
        self.m = m
        self.max_offset = max_offset
        hidden = max(dim // reduction, 4)
        self.excite1 = nn.Linear(dim, hidden)
        self.excite2 = nn.Linear(hidden, 2 * dim)
        self.head1 = nn.Conv2d(2 * dim, dim, 3, padding=1)
        self.head2 = nn.Conv2d(dim, 2 * m + 1, 3, padding=1)
        for lin in (self.excite1, self.excite2):
            nn.init.zeros_(lin.bias)
        with torch.no_grad():
            self.head2.weight.mul_(0.1)
            self.head2.bias.zero_()
            self.head2.bias[2 * m] = 3.0  # attention starts open

    def channel_gate(self, f_s: torch.Tensor) -> torch.Tensor:
        squeezed = f_s.mean(dim=(-2, -1))
        return torch.sigmoid(self.excite2(F.relu(self.excite1(squeezed))))

    def fused(self, f_c, f_s):
        gate = self.channel_gate(f_s)[:, :, None, None]
        return (1 + gate) * torch.cat([f_c, f_s], dim=1)

    def forward(self, f_c, f_s):
        if f_c.shape != f_s.shape:
            raise ValueError("context and source features must have equal shapes")
        out = self.head2(F.leaky_relu(self.head1(self.fused(f_c, f_s)), LEAK))
        b, _, h, w = out.shape
        # bounded offsets: samples far off the grid are border-clamped and get no gradient
        raw = out[:, : 2 * self.m].reshape(b, self.m, 2, h, w)
        flows = self.max_offset * torch.tanh(raw / self.max_offset)
        attention = torch.sigmoid(out[:, 2 * self.m:])
        return flows, attention


class GFW(nn.Module):
    def __init__(self, feat_channels: int, grid: tuple[int, int], dim: int = 64,
                 nodes: int = 32, iterations: int = 1, m: int = 6):
        super().__init__()
        self.iterations = iterations
        self.motion = MotionEncoder(grid, dim)
        self.context = ContextEncoder(feat_channels, dim)
        self.project_c = GraphProjection(grid, nodes)
        self.project_s = GraphProjection(grid, nodes)
        self.context_conv = ContextGraphConv(dim)
        self.source_conv = AdaptiveGraphConv(dim)
        self.gate_h = nn.Parameter(torch.zeros(()))
        self.gate_l = nn.Parameter(torch.zeros(()))
        self.fusion = OffsetFusion(dim, m)

    def features(self, feat_s, feat_r):
        """Return (f̂_c, f̂_s) after graph reasoning and back-projection."""
        f_s = self.motion(build_correlation(feat_s, feat_r))
        f_c = self.context(feat_r)
        nodes_c = self.project_c(f_c, "context")
        nodes_s = self.project_s(f_s, "source")
        U_c, U_s, _, _ = graph_reason(nodes_c.U, nodes_s.U, self.context_conv,
                                      self.source_conv, self.iterations)
        f_c_hat = back_project(f_c, nodes_c, U_c, self.gate_h)
        f_s_hat = back_project(f_s, nodes_s, U_s, self.gate_l)
        return f_c_hat, f_s_hat

    def forward(self, feat_s: torch.Tensor, feat_r: torch.Tensor):
        """Return ``(flow, attention, warped)``; warped = warp(feat_s, flow) * attention."""
        f_c_hat, f_s_hat = self.features(feat_s, feat_r)
        flows, attention = self.fusion(f_c_hat, f_s_hat)
        flow = average_flow(flows)
        warped = backward_warp(feat_s, flow) * attention
        return flow, attention, warped
