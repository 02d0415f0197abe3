"""Bipartite assignment of ground-truth segments to prediction slots."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .losses import LossConfig, dice_loss, focal_loss, pairwise_dice, pairwise_focal

NO_OBJECT = -1
BRUTE_FORCE_LIMIT = 7


class MatchingError(ValueError):
    pass


@dataclass
class GroundTruthSet:
    labels: Tensor  # (M,) class indices < background index
    masks: Tensor  # (M, H, W) binary

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long).reshape(-1)
        self.masks = torch.as_tensor(self.masks)
        if self.masks.ndim != 3 or self.masks.shape[0] != self.labels.shape[0]:
            raise ValueError(f"labels {tuple(self.labels.shape)} / masks {tuple(self.masks.shape)} mismatch")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def check(self, background_index: int, max_slots: Optional[int] = None) -> None:
        if len(self) and int(self.labels.max()) >= background_index:
            raise ValueError("ground-truth label uses the background index")
        if len(self) and bool((self.masks.flatten(1).sum(1) == 0).any()):
            raise ValueError("ground-truth mask is empty")
        if max_slots is not None and len(self) > max_slots:
            raise MatchingError(f"{len(self)} ground-truth segments exceed {max_slots} queries")


@dataclass
class MatchingResult:
    """``assignment[i]`` is the GT slot matched to prediction i, or ``NO_OBJECT``."""

    assignment: np.ndarray
    total_cost: float
    pred_idx: np.ndarray = field(default=None)
    gt_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.pred_idx is None:
            pred = np.flatnonzero(self.assignment != NO_OBJECT)
            gt = self.assignment[pred]
            order = np.argsort(gt, kind="stable")
            self.pred_idx, self.gt_idx = pred[order], gt[order]


def _result(n: int, rows: Sequence[int], cols: Sequence[int], cost: np.ndarray) -> MatchingResult:
    assignment = np.full(n, NO_OBJECT, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    assignment[rows] = cols
    total = float(cost[rows, cols].sum()) if rows.size else 0.0
    return MatchingResult(assignment, total)


def _check_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError("cost matrix must be 2-D (predictions x ground truth)")
    n, m = cost.shape
    if m > n:
        raise MatchingError(f"{m} ground-truth segments exceed {n} predictions")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix must be finite")
    return cost


def hungarian_match(cost) -> MatchingResult:
    """Minimum-cost injective assignment of every GT column to a prediction row."""
    cost = _check_cost(cost)
    n, m = cost.shape
    if m == 0:
        return _result(n, [], [], cost)
    rows, cols = linear_sum_assignment(cost)
    return _result(n, rows, cols, cost)


def brute_force_match(cost) -> MatchingResult:
    """Exhaustive search over injections; for testing small problems only."""
    cost = _check_cost(cost)
    n, m = cost.shape
    if m > BRUTE_FORCE_LIMIT:
        raise MatchingError(f"brute force limited to {BRUTE_FORCE_LIMIT} ground-truth segments")
    if m == 0:
        return _result(n, [], [], cost)
    best, best_rows = np.inf, None
    cols = np.arange(m)
    # permutations come out in lexicographic order, so ties keep the lowest rows
    for rows in itertools.permutations(range(n), m):
        c = cost[list(rows), cols].sum()
        if c < best:
            best, best_rows = c, rows
    return _result(n, best_rows, cols, cost)


def match_cost_matrix(logits: Tensor, masks: Tensor, gt: GroundTruthSet,
                      cfg: LossConfig = LossConfig()) -> Tensor:
    """(N, M) cost ``-p(c) + lambda_focal * focal + lambda_dice * dice``.

    Background GT slots are never columns, which is how the infinite cost
    for no-object pairings is realised.
    """
    with torch.no_grad():
        prob = logits.softmax(-1)
        n = logits.shape[0]
        if len(gt) == 0:
            return logits.new_zeros(n, 0)
        gm = gt.masks.to(masks.dtype)
        cost_class = -prob[:, gt.labels]
        cost_focal = pairwise_focal(masks, gm, cfg.focal_gamma, cfg.focal_alpha, cfg.eps)
        cost_dice = pairwise_dice(masks, gm, cfg.dice_smooth)
        return cost_class + cfg.lambda_focal * cost_focal + cfg.lambda_dice * cost_dice


def combine_match_terms(prob_of_class: float, focal: float, dice: float,
                        cfg: LossConfig = LossConfig()) -> float:
    return -prob_of_class + cfg.lambda_focal * focal + cfg.lambda_dice * dice


def match_cost(prob: Tensor, mask: Tensor, gt_label: int, gt_mask: Tensor,
               cfg: LossConfig = LossConfig()) -> float:
    """Single-pair cost; ``gt_label=None`` denotes a no-object slot (infinite cost)."""
    if gt_label is None or gt_label == NO_OBJECT:
        return float("inf")
    focal = focal_loss(mask, gt_mask, cfg.focal_gamma, cfg.focal_alpha, cfg.eps)
    dice = dice_loss(mask, gt_mask, cfg.dice_smooth)
    return combine_match_terms(float(prob[gt_label]), float(focal), float(dice), cfg)


def match_sample(logits: Tensor, masks: Tensor, gt: GroundTruthSet,
                 cfg: LossConfig = LossConfig()) -> MatchingResult:
    cost = match_cost_matrix(logits.detach(), masks.detach(), gt, cfg)
    return hungarian_match(cost.cpu().double().numpy())
