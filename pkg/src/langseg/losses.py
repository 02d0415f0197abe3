"""Alignment logits, contrastive classification loss, focal/dice mask losses, total objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import torch
from torch import Tensor
import torch.nn.functional as F


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.07
    lambda_focal: float = 20.0
    lambda_dice: float = 1.0
    no_object_weight: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0:
            raise LossConfigError(f"temperature must be positive, got {self.tau}")
        if self.lambda_focal < 0 or self.lambda_dice < 0:
            raise LossConfigError("loss weights must be non-negative")
        if not 0 < self.no_object_weight <= 1:
            raise LossConfigError("no-object weight must lie in (0, 1]")


def alignment_logits(queries: Tensor, text: Tensor, tau: float = 0.07) -> Tensor:
    """``queries @ text.T / tau``; works on (N, C) or batched (B, N, C) queries."""
    if tau <= 0:
        raise LossConfigError(f"temperature must be positive, got {tau}")
    if queries.shape[-1] != text.shape[-1]:
        raise ValueError(f"query dim {queries.shape[-1]} != text dim {text.shape[-1]}")
    return queries @ text.transpose(-1, -2) / tau


def contrastive_loss(logits: Tensor, labels: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Softmax cross-entropy per query; the background column is the last one.

    Queries labelled with the background index are down-weighted by
    ``cfg.no_object_weight``; the weighted sum is divided by N.
    """
    n, k1 = logits.shape
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k1):
        raise ValueError(f"labels must lie in [0, {k1 - 1}]")
    ce = F.cross_entropy(logits, labels, reduction="none")
    weight = torch.ones_like(ce).masked_fill(labels == k1 - 1, cfg.no_object_weight)
    return (weight * ce).sum() / n


def _p_t(pred: Tensor, gt: Tensor, eps: float) -> Tensor:
    return torch.where(gt > 0.5, pred, 1 - pred).clamp_min(eps)


def _focal_map(pred: Tensor, gt: Tensor, gamma: float, alpha: float, eps: float) -> Tensor:
    p_t = _p_t(pred, gt, eps)
    alpha_t = alpha * gt + (1 - alpha) * (1 - gt)
    return -alpha_t * (1 - p_t) ** gamma * torch.log(p_t)


def focal_loss(pred: Tensor, gt: Tensor, gamma: float = 2.0, alpha: float = 0.25,
               eps: float = 1e-8) -> Tensor:
    """Alpha-balanced focal loss on probabilities, averaged over pixels."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return _focal_map(pred, gt.to(pred.dtype), gamma, alpha, eps).mean()


def dice_loss(pred: Tensor, gt: Tensor, smooth: float = 1.0) -> Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum()
    return 1 - (2 * inter + smooth) / (pred.sum() + gt.sum() + smooth)


def _batched_focal(pred: Tensor, gt: Tensor, cfg: "LossConfig") -> Tensor:
    return _focal_map(pred, gt, cfg.focal_gamma, cfg.focal_alpha, cfg.eps).flatten(1).mean(1)


def _batched_dice(pred: Tensor, gt: Tensor, smooth: float) -> Tensor:
    pred, gt = pred.flatten(1), gt.flatten(1)
    return 1 - (2 * (pred * gt).sum(1) + smooth) / (pred.sum(1) + gt.sum(1) + smooth)


def pairwise_focal(pred: Tensor, gt: Tensor, gamma: float = 2.0, alpha: float = 0.25,
                   eps: float = 1e-8) -> Tensor:
    """(N, HW) predictions x (M, HW) targets -> (N, M) matrix of ``focal_loss`` values."""
    pred = pred.flatten(1)
    gt = gt.flatten(1).to(pred.dtype)
    hw = pred.shape[1]
    pos = -alpha * (1 - pred) ** gamma * torch.log(pred.clamp_min(eps))
    neg = -(1 - alpha) * pred ** gamma * torch.log((1 - pred).clamp_min(eps))
    return (pos @ gt.T + neg @ (1 - gt).T) / hw


def pairwise_dice(pred: Tensor, gt: Tensor, smooth: float = 1.0) -> Tensor:
    pred = pred.flatten(1)
    gt = gt.flatten(1).to(pred.dtype)
    inter = pred @ gt.T
    return 1 - (2 * inter + smooth) / (pred.sum(1)[:, None] + gt.sum(1)[None, :] + smooth)


@dataclass
class SampleLossInput:
    """Predictions for one image plus its ground truth and fixed assignment."""

    logits: Tensor  # (N, K+1)
    masks: Tensor  # (N, H, W) probabilities
    gt_labels: Tensor  # (M,)
    gt_masks: Tensor  # (M, H, W)
    pred_idx: Tensor  # (m,) matched prediction slots
    gt_idx: Tensor  # (m,) matched GT slots
    dataset_id: str = ""


def sample_loss(s: SampleLossInput, cfg: LossConfig = LossConfig()) -> Dict[str, Tensor]:
    n, k1 = s.logits.shape
    labels = torch.full((n,), k1 - 1, dtype=torch.long, device=s.logits.device)
    pred_idx = torch.as_tensor(s.pred_idx, dtype=torch.long)
    gt_idx = torch.as_tensor(s.gt_idx, dtype=torch.long)
    if pred_idx.numel():
        labels[pred_idx] = torch.as_tensor(s.gt_labels, dtype=torch.long)[gt_idx]
    cl = contrastive_loss(s.logits, labels, cfg)
    zero = cl.new_zeros(())
    if pred_idx.numel() == 0:
        return {"cl": cl, "focal": zero, "dice": zero}
    pm = s.masks[pred_idx]
    gm = s.gt_masks[gt_idx].to(pm.dtype)
    focal = _batched_focal(pm, gm, cfg).mean()
    dice = _batched_dice(pm, gm, cfg.dice_smooth).mean()
    return {"cl": cl, "focal": focal, "dice": dice}


def total_loss(samples: Iterable[SampleLossInput], cfg: LossConfig = LossConfig()
               ) -> Tuple[Tensor, Dict[str, float]]:
    """Sum over samples of ``L_cl + lambda_focal * L_focal + lambda_dice * L_dice``.

    Returns the scalar loss and detached per-term sums for logging.
    """
    total = None
    terms = {"cl": 0.0, "focal": 0.0, "dice": 0.0}
    for s in samples:
        parts = sample_loss(s, cfg)
        loss = parts["cl"] + cfg.lambda_focal * parts["focal"] + cfg.lambda_dice * parts["dice"]
        total = loss if total is None else total + loss
        for k, v in parts.items():
            terms[k] += float(v.detach())
    if total is None:
        raise ValueError("total_loss needs at least one sample")
    return total, terms
