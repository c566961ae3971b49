"""Conditioning pathway: toy caption and texture embedders and the decoupled
cross-attention block that lets latent queries attend to both.

Text and texture tokens share the width ``d``. The block computes the query
projection once and reuses it for both branches:

    z'  = softmax(a bᵀ / sqrt(d)) c        a = z W_q, b = x_t W_k,  c = x_t W_v
    z'' = softmax(a b'ᵀ / sqrt(d)) c'      b' = g_i W'_k, c' = g_i W'_v
    out = z' + z''

W_q, W_k, W_v are frozen; the image-branch copies W'_k, W'_v start equal to
W_k, W_v and are the only trainable weights of the block.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .backbone import Encoder, EncoderConfig
from .synth import VOCAB, tokenize

__all__ = ["TextEmbedder", "TextureEmbedder", "DcaaBlock", "SelfMix", "embed_text",
           "embed_texture", "dcaa_attend", "attention_weights", "MAX_TEXT_TOKENS"]

MAX_TEXT_TOKENS = 8


def attention_weights(query: torch.Tensor, keys: torch.Tensor,
                      key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-stochastic softmax(q kᵀ / sqrt(d)); ``key_mask`` (B, n_k) marks valid keys."""
    scores = query @ keys.transpose(-1, -2) / math.sqrt(query.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, :], float("-inf"))
    return torch.softmax(scores, dim=-1)


class SelfMix(nn.Module):
    """One residual single-head self-attention layer."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        att = attention_weights(self.q(x), self.k(x), mask)
        return x + self.out(att @ self.v(x))


class TextEmbedder(nn.Module):
    """Lookup table + positional table + one mixing layer.

    Index 0 is a learned null token that always leads the sequence, so an
    empty caption embeds to a single token. Index 1 pads batches and is masked
    out of the mixing attention.
    """

    NULL, PAD = 0, 1

    def __init__(self, vocab=VOCAB, dim: int = 64, max_tokens: int = MAX_TEXT_TOKENS):
        super().__init__()
        self.vocab = tuple(vocab)
        self.index = {w: i + 2 for i, w in enumerate(self.vocab)}
        self.dim = dim
        self.max_tokens = max_tokens
        self.table = nn.Embedding(len(self.vocab) + 2, dim)
        self.position = nn.Parameter(0.02 * torch.randn(max_tokens, dim))
        self.mix = SelfMix(dim)

    def token_ids(self, caption: str) -> list[int]:
        """Null token followed by the word ids, truncated to ``max_tokens``."""
        ids = [self.NULL]
        for word in tokenize(caption):
            if word not in self.index:
                raise KeyError(f"unknown token {word!r} in caption {caption!r}")
            ids.append(self.index[word])
        return ids[: self.max_tokens]

    def forward(self, captions: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(tokens (B, n, d), valid mask (B, n))`` padded to the longest caption."""
        ids = [self.token_ids(c) for c in captions]
        n = max(len(i) for i in ids)
        padded = torch.tensor([i + [self.PAD] * (n - len(i)) for i in ids])
        mask = padded != self.PAD
        x = self.table(padded) + self.position[:n]
        return self.mix(x, mask), mask


class TextureEmbedder(nn.Module):
    """Garment image -> (H/8)(W/8) patch tokens: conv encoder, projection, one mixing layer."""

    def __init__(self, grid: tuple[int, int], dim: int = 64, enc: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.grid = tuple(grid)
        self.encoder = Encoder(3, enc)
        self.project = nn.Linear(enc.channels[-1], dim)
        self.position = nn.Parameter(0.02 * torch.randn(grid[0] * grid[1], dim))
        self.mix = SelfMix(dim)

    def forward(self, garment: torch.Tensor) -> torch.Tensor:
        feat = self.encoder(garment)
        if tuple(feat.shape[-2:]) != self.grid:
            raise ValueError(f"garment encodes to {tuple(feat.shape[-2:])}, expected {self.grid}")
        tokens = self.project(feat.flatten(2).transpose(1, 2)) + self.position
        return self.mix(tokens)


class DcaaBlock(nn.Module):
    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.w_query = nn.Linear(dim, dim, bias=False)
        self.w_key = nn.Linear(dim, dim, bias=False)
        self.w_value = nn.Linear(dim, dim, bias=False)
        self.w_key_img = nn.Linear(dim, dim, bias=False)
        self.w_value_img = nn.Linear(dim, dim, bias=False)
        with torch.no_grad():
            self.w_key_img.weight.copy_(self.w_key.weight)
            self.w_value_img.weight.copy_(self.w_value.weight)
        for lin in self.frozen_layers():
            lin.weight.requires_grad_(False)

    def frozen_layers(self) -> tuple[nn.Linear, ...]:
        return (self.w_query, self.w_key, self.w_value)

    def trainable_layers(self) -> tuple[nn.Linear, ...]:
        return (self.w_key_img, self.w_value_img)

    def branches(self, z, x_t, g_i, text_mask=None):
        """Return ``(z', z'')``, the text and image branch outputs."""
        for name, t in (("latent", z), ("text", x_t), ("texture", g_i)):
            if t.shape[-1] != self.dim:
                raise ValueError(f"{name} tokens have width {t.shape[-1]}, block expects {self.dim}")
        query = self.w_query(z)
        text = attention_weights(query, self.w_key(x_t), text_mask) @ self.w_value(x_t)
        image = attention_weights(query, self.w_key_img(g_i)) @ self.w_value_img(g_i)
        return text, image

    def forward(self, z, x_t, g_i, text_mask=None):
        text, image = self.branches(z, x_t, g_i, text_mask)
        return text + image


def embed_text(caption: str, embedder: TextEmbedder) -> torch.Tensor:
    """(n_t, d) embedding of one caption."""
    return embedder([caption])[0][0]


def embed_texture(garment: torch.Tensor, embedder: TextureEmbedder) -> torch.Tensor:
    """(n_i, d) tokens of one (3, H, W) garment, or (B, n_i, d) for a batch."""
    if garment.dim() == 3:
        return embedder(garment[None])[0]
    return embedder(garment)


def dcaa_attend(z: torch.Tensor, x_t: torch.Tensor, g_i: torch.Tensor, block: DcaaBlock,
                text_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Decoupled cross-attention of latent tokens ``z`` over text and texture tokens.

    Unbatched (n, d) inputs are accepted and returned unbatched.
    """
    if z.dim() == 2:
        return block(z[None], x_t[None], g_i[None],
                     None if text_mask is None else text_mask[None])[0]
    return block(z, x_t, g_i, text_mask)
