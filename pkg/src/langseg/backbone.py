"""Pixel feature extractor: conv image encoder + FPN-style pixel decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn
import torch.nn.functional as F


@dataclass
class ImageFeatureMap:
    features: Tensor  # (B, C_F, H', W')
    stride: int
    skips: List[Tensor]  # finer encoder stages, stride 1 .. stride/2
    image_size: Tuple[int, int]  # (H, W) before internal padding
    padding: Tuple[int, int] = (0, 0)  # bottom/right padding applied internally


@dataclass
class PixelEmbeddings:
    embeddings: Tensor  # (B, C_eps, H, W)


class ChannelNorm(nn.Module):
    """LayerNorm over channels at each pixel; keeps the encoder translation-equivariant."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def _conv_block(c_in: int, c_out: int, stride: int = 1, light: bool = False) -> nn.Sequential:
    if light:
        return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.GELU())
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        ChannelNorm(c_out),
        nn.GELU(),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        ChannelNorm(c_out),
        nn.GELU(),
    )


class ImageEncoder(nn.Module):
    """Four conv stages at strides 1, 2, 4, 8."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), zero_init_last: bool = False):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("encoder expects four stage widths")
        self.widths = tuple(widths)
        self.stride = 8
        c_in = 3
        stages = []
        for i, w in enumerate(widths):
            # full-resolution stem is a single conv; it dominates the cost otherwise
            stages.append(_conv_block(c_in, w, stride=1 if i == 0 else 2, light=i == 0))
            c_in = w
        self.stages = nn.ModuleList(stages)
        self.out_proj = nn.Conv2d(c_in, c_in, 1)
        if zero_init_last:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def forward(self, image: Tensor) -> ImageFeatureMap:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        pad_h = (-h) % self.stride
        pad_w = (-w) % self.stride
        if pad_h or pad_w:
            image = F.pad(image, (0, pad_w, 0, pad_h))
        x = image
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        feats = self.out_proj(x)
        return ImageFeatureMap(feats, self.stride, skips[:-1], (h, w), (pad_h, pad_w))


class PixelDecoder(nn.Module):
    """Top-down FPN: laterals from every stage, nearest upsampling, 3x3 output conv."""

    def __init__(self, in_widths: Sequence[int] = (16, 32, 64, 128), embed_dim: int = 32):
        super().__init__()
        self.embed_dim = embed_dim
        self.laterals = nn.ModuleList(nn.Conv2d(c, embed_dim, 1) for c in in_widths)
        # no smoothing at stride 1: out_conv plays that role
        self.smooth = nn.ModuleList(
            nn.Sequential(nn.Conv2d(embed_dim, embed_dim, 3, padding=1), ChannelNorm(embed_dim), nn.GELU())
            if i > 0 else nn.GELU()
            for i in range(len(in_widths) - 1)
        )
        self.out_conv = nn.Conv2d(embed_dim, embed_dim, 3, padding=1)

    def forward(self, f: ImageFeatureMap) -> PixelEmbeddings:
        levels = list(f.skips) + [f.features]
        x = self.laterals[-1](levels[-1])
        for i in range(len(levels) - 2, -1, -1):
            lat = self.laterals[i](levels[i])
            x = lat + F.interpolate(x, size=lat.shape[-2:], mode="nearest")
            x = self.smooth[i](x)
        x = self.out_conv(x)
        h, w = f.image_size
        return PixelEmbeddings(x[..., :h, :w])


class PixelFeatureExtractor(nn.Module):
    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), embed_dim: int = 32,
                 zero_init_last: bool = False):
        super().__init__()
        self.encoder = ImageEncoder(widths, zero_init_last=zero_init_last)
        self.decoder = PixelDecoder(widths, embed_dim)

    @property
    def feature_dim(self) -> int:
        return self.encoder.out_channels

    @property
    def embed_dim(self) -> int:
        return self.decoder.embed_dim

    def forward(self, image: Tensor) -> Tuple[ImageFeatureMap, PixelEmbeddings]:
        f = self.encoder(image)
        return f, self.decoder(f)


def extract_features(encoder: ImageEncoder, image: Tensor) -> ImageFeatureMap:
    return encoder(image)


def pixel_decode(decoder: PixelDecoder, f: ImageFeatureMap) -> PixelEmbeddings:
    return decoder(f)


def mask_logits(queries: Tensor, pix: PixelEmbeddings | Tensor,
                proj: Optional[nn.Module] = None) -> Tensor:
    """Per-pixel dot products ``<proj(q_i), eps_pixel[:, y, x]>`` before the sigmoid.

    ``queries`` is (N, C) or (B, N, C); embeddings are (C_eps, H, W) or (B, C_eps, H, W).
    """
    emb = pix.embeddings if isinstance(pix, PixelEmbeddings) else pix
    q = proj(queries) if proj is not None else queries
    if q.ndim == 2 and emb.ndim == 3:
        return torch.einsum("nc,chw->nhw", q, emb)
    if q.ndim == 2:
        q = q.unsqueeze(0).expand(emb.shape[0], -1, -1)
    if emb.ndim == 3:
        emb = emb.unsqueeze(0)
    return torch.einsum("bnc,bchw->bnhw", q, emb)


def predict_masks(queries: Tensor, pix: PixelEmbeddings | Tensor,
                  proj: Optional[nn.Module] = None) -> Tensor:
    """Sigmoid mask maps in (0, 1), one per query."""
    return torch.sigmoid(mask_logits(queries, pix, proj))


def sine_position_encoding(h: int, w: int, dim: int, temperature: float = 10000.0,
                           dtype: torch.dtype = torch.float32) -> Tensor:
    """Fixed 2-D sinusoidal encoding, (h*w, dim); half the channels per axis."""
    if dim % 4:
        raise ValueError("positional dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / temperature ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    gy = ys[:, None] * omega[None]
    gx = xs[:, None] * omega[None]
    py = torch.cat([gy.sin(), gy.cos()], dim=1)[:, None, :].expand(h, w, 2 * quarter)
    px = torch.cat([gx.sin(), gx.cos()], dim=1)[None, :, :].expand(h, w, 2 * quarter)
    return torch.cat([py, px], dim=-1).reshape(h * w, dim).to(dtype)
