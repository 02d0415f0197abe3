"""Category-guided decoding: query self-attention, image and text cross-attention."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Optional

import torch
from torch import Tensor, nn

from .backbone import ImageFeatureMap, sine_position_encoding

Order = Literal["visual-text", "text-visual"]


@dataclass
class CGDLayerConfig:
    dim: int = 256
    heads: int = 8
    ffn_dim: int = 2048
    order: Order = "visual-text"
    layers: int = 6

    def __post_init__(self):
        if self.order not in ("visual-text", "text-visual"):
            raise ValueError(f"unknown attention order {self.order!r}")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")


@dataclass
class SegmentQueries:
    content: Tensor  # (B, N, C)
    positional: Tensor  # (N, C)

    @property
    def num_queries(self) -> int:
        return self.positional.shape[0]

    def permute(self, perm: Tensor) -> "SegmentQueries":
        return SegmentQueries(self.content[:, perm], self.positional[perm])


class CGDLayer(nn.Module):
    """Pre-norm decoder block: self-attn, cross-attn (image), cross-attn (text), FFN."""

    def __init__(self, cfg: CGDLayerConfig):
        super().__init__()
        self.order = cfg.order
        c = cfg.dim
        self.self_attn = nn.MultiheadAttention(c, cfg.heads, batch_first=True)
        self.image_attn = nn.MultiheadAttention(c, cfg.heads, batch_first=True)
        self.text_attn = nn.MultiheadAttention(c, cfg.heads, batch_first=True)
        self.norm_self = nn.LayerNorm(c)
        self.norm_image = nn.LayerNorm(c)
        self.norm_text = nn.LayerNorm(c)
        self.norm_ffn = nn.LayerNorm(c)
        self.ffn = nn.Sequential(nn.Linear(c, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, c))

    def _image(self, q: Tensor, pos: Tensor, memory: Tensor, memory_pos: Tensor) -> Tensor:
        x = self.norm_image(q)
        return q + self.image_attn(x + pos, memory + memory_pos, memory, need_weights=False)[0]

    def _text(self, q: Tensor, pos: Tensor, text: Tensor) -> Tensor:
        # category order carries no meaning: no positional term on text tokens
        x = self.norm_text(q)
        return q + self.text_attn(x + pos, text, text, need_weights=False)[0]

    def forward(self, q: Tensor, pos: Tensor, memory: Tensor, memory_pos: Tensor,
                text: Tensor) -> Tensor:
        x = self.norm_self(q)
        qk = x + pos
        q = q + self.self_attn(qk, qk, x, need_weights=False)[0]
        if self.order == "visual-text":
            q = self._image(q, pos, memory, memory_pos)
            q = self._text(q, pos, text)
        else:
            q = self._text(q, pos, text)
            q = self._image(q, pos, memory, memory_pos)
        return q + self.ffn(self.norm_ffn(q))


class CGDStack(nn.Module):
    """``cfg.layers`` CGD blocks plus the learnable query positions and image input projection."""

    def __init__(self, cfg: CGDLayerConfig, num_queries: int, feature_dim: int):
        super().__init__()
        self.cfg = cfg
        self.query_pos = nn.Parameter(torch.randn(num_queries, cfg.dim) * 0.1)
        self.input_proj = nn.Conv2d(feature_dim, cfg.dim, 1)
        self.layers = nn.ModuleList(CGDLayer(cfg) for _ in range(cfg.layers))

    @property
    def num_queries(self) -> int:
        return self.query_pos.shape[0]

    def initial_queries(self, batch: int) -> SegmentQueries:
        content = self.query_pos.new_zeros(batch, self.num_queries, self.cfg.dim)
        return SegmentQueries(content, self.query_pos)

    def memory(self, f: ImageFeatureMap):
        x = self.input_proj(f.features)
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # (B, H'W', C)
        pos = sine_position_encoding(h, w, c, dtype=x.dtype).to(x.device)
        return tokens, pos

    def forward(self, f: ImageFeatureMap, text: Tensor,
                queries: Optional[SegmentQueries] = None) -> SegmentQueries:
        batch = f.features.shape[0]
        if queries is None:
            queries = self.initial_queries(batch)
        text = _batch_text(text, batch, self.cfg.dim)
        memory, memory_pos = self.memory(f)
        return cgd_stack(queries, memory, memory_pos, text, self.layers)


def _batch_text(text: Tensor, batch: int, dim: int) -> Tensor:
    if text.shape[-1] != dim:
        raise ValueError(f"text embeddings have C={text.shape[-1]}, queries have C={dim}")
    if text.ndim == 2:
        text = text.unsqueeze(0).expand(batch, -1, -1)
    return text


def cgd_layer(layer: CGDLayer, queries: SegmentQueries, memory: Tensor, memory_pos: Tensor,
              text: Tensor) -> SegmentQueries:
    """One block; positional encodings pass through untouched."""
    text = _batch_text(text, queries.content.shape[0], queries.content.shape[-1])
    q = layer(queries.content, queries.positional, memory, memory_pos, text)
    return replace(queries, content=q)


def cgd_stack(queries: SegmentQueries, memory: Tensor, memory_pos: Tensor, text: Tensor,
              layers) -> SegmentQueries:
    for layer in layers:
        queries = cgd_layer(layer, queries, memory, memory_pos, text)
    return queries
