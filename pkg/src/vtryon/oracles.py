"""Slow reference implementations written as explicit loops in numpy.

They share no code with the vectorised versions and exist to check them:
the test-suite and the ``selftest`` command compare both on random inputs.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["correlation", "bilinear_warp", "gram", "context_graph_conv", "decoupled_attention",
           "ssim", "owl", "softmax_rows"]


def correlation(feat_s: np.ndarray, feat_r: np.ndarray) -> np.ndarray:
    """(C,h,w) pair -> (h*w, h*w) with entry [p, q] = sum_c s[c,p] r[c,q] / sqrt(C)."""
    c, h, w = feat_s.shape
    out = np.zeros((h * w, h * w))
    for p in range(h * w):
        for q in range(h * w):
            acc = 0.0
            for k in range(c):
                acc += feat_s[k, p // w, p % w] * feat_r[k, q // w, q % w]
            out[p, q] = acc / math.sqrt(c)
    return out


def bilinear_warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp of (C,H,W) by a pixel flow (2,H,W), sampling coordinates clamped to the border."""
    c, h, w = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + flow[0, y, x], 0.0), w - 1.0)
            sy = min(max(y + flow[1, y, x], 0.0), h - 1.0)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = sx - x0, sy - y0
            for k in range(c):
                top = img[k, y0, x0] * (1 - fx) + img[k, y0, x1] * fx
                bottom = img[k, y1, x0] * (1 - fx) + img[k, y1, x1] * fx
                out[k, y, x] = top * (1 - fy) + bottom * fy
    return out


def gram(feat: np.ndarray) -> np.ndarray:
    """(C,h,w) -> (C,C) channel Gram divided by C*h*w."""
    c, h, w = feat.shape
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            g[i, j] = sum(feat[i, y, x] * feat[j, y, x] for y in range(h) for x in range(w))
    return g / (c * h * w)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    out = np.zeros_like(scores, dtype=np.float64)
    for i, row in enumerate(scores):
        top = max(row)
        e = [math.exp(v - top) for v in row]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def context_graph_conv(nodes: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """(K,D) nodes, (D,D) weight applied as U @ weight.T: rectified Gram
    adjacency, row-normalised, times the transformed nodes."""
    k, d = nodes.shape
    adj = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            adj[i, j] = max(sum(nodes[i, m] * nodes[j, m] for m in range(d)), 0.0)
    for i in range(k):
        adj[i] /= sum(adj[i]) + 1e-12
    transformed = np.array([[sum(nodes[i, m] * weight[o, m] for m in range(d)) for o in range(d)]
                            for i in range(k)])
    return adj @ transformed


def decoupled_attention(z, x_t, g_i, w_q, w_k, w_v, w_k_img, w_v_img) -> np.ndarray:
    """Text plus image cross-attention with one shared query; weights are
    (d_out, d_in) matrices applied to row vectors."""
    d = z.shape[1]

    def project(x, w):
        return np.array([[sum(row[m] * w[o, m] for m in range(d)) for o in range(w.shape[0])] for row in x])

    def attend(query, keys, values):
        scores = np.array([[sum(q * k for q, k in zip(qr, kr)) / math.sqrt(d) for kr in keys] for qr in query])
        weights = softmax_rows(scores)
        return np.array([[sum(weights[i, j] * values[j, o] for j in range(len(values)))
                          for o in range(values.shape[1])] for i in range(len(query))])

    query = project(z, w_q)
    text = attend(query, project(x_t, w_k), project(x_t, w_v))
    image = attend(query, project(g_i, w_k_img), project(g_i, w_v_img))
    return text + image


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 2.0) -> float:
    """Single-channel (H,W) SSIM averaged over valid windows, one window at a time."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, w = a.shape
    n = window * window
    values = []
    for y in range(h - window + 1):
        for x in range(w - window + 1):
            pa = [a[y + i, x + j] for i in range(window) for j in range(window)]
            pb = [b[y + i, x + j] for i in range(window) for j in range(window)]
            ma, mb = sum(pa) / n, sum(pb) / n
            va = sum((v - ma) ** 2 for v in pa) / (n - 1)
            vb = sum((v - mb) ** 2 for v in pb) / (n - 1)
            cov = sum((u - ma) * (v - mb) for u, v in zip(pa, pb)) / (n - 1)
            values.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return sum(values) / len(values)


def owl(gt: np.ndarray, pred: np.ndarray, threshold: float = 0.05) -> float:
    """(C,H,W) masked mean absolute error over pixels where any |gt| channel exceeds ``threshold``."""
    c, h, w = gt.shape
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            if any(abs(gt[k, y, x]) > threshold for k in range(c)):
                for k in range(c):
                    total += abs(gt[k, y, x] - pred[k, y, x])
                    count += 1
    return total / count if count else 0.0
