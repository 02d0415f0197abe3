"""End-to-end segmentation model: pixel features, text table, CGD queries, logits and masks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .backbone import PixelFeatureExtractor, mask_logits
from .cgd import CGDLayerConfig, CGDStack
from .losses import alignment_logits
from .taxonomy import DatasetTaxonomy
from .text_encoder import (Adapter, FrozenTextEncoder, PromptContext, SyntheticTextEncoder,
                           TextEmbeddingTable, encode_classes)


@dataclass
class ModelConfig:
    dim: int = 32  # C, query / adapted text width
    text_dim: int = 64  # C_t
    token_dim: int = 64  # prompt vector width
    embed_dim: int = 32  # C_eps
    encoder_widths: Tuple[int, ...] = (16, 32, 64, 128)  # last entry is C_F
    num_queries: int = 100
    layers: int = 6
    heads: int = 4
    ffn_dim: int = 128
    prompt_length: int = 8
    order: str = "visual-text"
    text_seed: int = 1234

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.dim % 4:
            raise ValueError("dim must be divisible by 4 for the 2-D positional encoding")

    def cgd(self) -> CGDLayerConfig:
        return CGDLayerConfig(self.dim, self.heads, self.ffn_dim, self.order, self.layers)


@dataclass
class Prediction:
    logits: Tensor  # (B, N, K+1)
    mask_logits: Tensor  # (B, N, H, W)
    queries: Tensor  # (B, N, C) after the output norm

    @property
    def masks(self) -> Tensor:
        return self.mask_logits.sigmoid()


class SegmentationModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), text_encoder: Optional[FrozenTextEncoder] = None,
                 tau: float = 0.07):
        super().__init__()
        self.cfg = cfg
        self.tau = tau
        self.pixel = PixelFeatureExtractor(cfg.encoder_widths, cfg.embed_dim)
        self.text_encoder = (text_encoder or SyntheticTextEncoder(cfg.token_dim, cfg.text_dim, cfg.text_seed)).freeze()
        self.prompt = PromptContext(cfg.prompt_length, self.text_encoder.token_dim)
        self.adapter = Adapter(self.text_encoder.out_dim, cfg.dim)
        self.decoder = CGDStack(cfg.cgd(), cfg.num_queries, self.pixel.feature_dim)
        self.query_norm = nn.LayerNorm(cfg.dim)
        self.mask_proj = nn.Linear(cfg.dim, cfg.embed_dim)

    def text_table(self, taxonomy: DatasetTaxonomy) -> TextEmbeddingTable:
        return encode_classes(taxonomy, self.prompt, self.text_encoder, self.adapter)

    def forward(self, images: Tensor, text: Tensor, detach_logits: bool = False) -> Prediction:
        """``text`` is one dataset's (K+1, C) table; every image in the batch shares it."""
        f, pix = self.pixel(images)
        q = self.decoder(f, text).content
        q = self.query_norm(q)
        logits = alignment_logits(q, text, self.tau)
        if detach_logits:
            logits = logits.detach()
        return Prediction(logits, mask_logits(q, pix, self.mask_proj), q)

    @torch.no_grad()
    def predict(self, images: Tensor, taxonomy: DatasetTaxonomy,
                tables: Optional[Mapping[str, TextEmbeddingTable]] = None) -> Prediction:
        """Inference under one taxonomy; ``tables`` (an exported cache) skips the text encoder."""
        if tables is not None:
            table = tables[taxonomy.dataset_id]
            if table.num_categories != taxonomy.num_categories:
                raise ValueError(f"cached table for {taxonomy.dataset_id} has "
                                 f"{table.num_categories} rows, taxonomy needs {taxonomy.num_categories}")
            text = table.embeddings.to(self.adapter.weight.dtype)
        else:
            text = self.text_table(taxonomy).embeddings
        return self(images, text)

    def trainable_groups(self) -> Dict[str, Sequence[nn.Parameter]]:
        groups = {
            "backbone": list(self.pixel.parameters()),
            "prompt": list(self.prompt.parameters()),
            "adapter": list(self.adapter.parameters()),
            "decoder": list(self.decoder.parameters()) + list(self.query_norm.parameters())
            + list(self.mask_proj.parameters()),
        }
        return {k: [p for p in v if p.requires_grad] for k, v in groups.items()}
