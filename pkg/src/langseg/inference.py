"""Semantic / panoptic assembly from query predictions, mIoU and PQ."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from .taxonomy import DatasetTaxonomy

IGNORE = -1
VOID_ID = 0


@dataclass
class InferenceConfig:
    background_threshold: float = 0.0
    score_threshold: float = 0.5
    overlap_threshold: float = 0.5
    batch_size: int = 16


@dataclass
class PanopticMap:
    ids: np.ndarray  # (H, W) int, 0 = void
    segments: Dict[int, Tuple[int, bool]]  # id -> (class index, is_thing)


def _check_columns(logits: Tensor, taxonomy: DatasetTaxonomy) -> None:
    if logits.shape[-1] != taxonomy.num_categories:
        raise ValueError(f"logits have {logits.shape[-1]} columns, {taxonomy.dataset_id} "
                         f"needs {taxonomy.num_categories}")


def semantic_inference(logits: Tensor, masks: Tensor, taxonomy: DatasetTaxonomy,
                       background_threshold: float = 0.0) -> np.ndarray:
    """``argmax_c sum_i softmax(p_i)[c] * m_i`` over real classes; weak pixels fall to background."""
    _check_columns(logits, taxonomy)
    prob = logits.softmax(-1)[..., :-1]
    scores = torch.einsum("nk,nhw->khw", prob, masks)
    best, label = scores.max(0)
    label = label.cpu().numpy().astype(np.int64)
    label[best.cpu().numpy() < background_threshold] = taxonomy.background_index
    return label


def panoptic_inference(logits: Tensor, masks: Tensor, taxonomy: DatasetTaxonomy,
                       score_threshold: float = 0.5, overlap_threshold: float = 0.5) -> PanopticMap:
    _check_columns(logits, taxonomy)
    h, w = masks.shape[-2:]
    scores, classes = logits.softmax(-1).max(-1)
    keep = (classes != taxonomy.background_index) & (scores >= score_threshold)
    ids = np.zeros((h, w), dtype=np.int64)
    segments: Dict[int, Tuple[int, bool]] = {}
    if not bool(keep.any()):
        return PanopticMap(ids, segments)
    cur_scores, cur_classes, cur_masks = scores[keep], classes[keep], masks[keep]
    owner = (cur_scores[:, None, None] * cur_masks).argmax(0)
    stuff_ids: Dict[int, int] = {}
    next_id = 1
    for k in range(cur_classes.shape[0]):
        cls = int(cur_classes[k])
        original = cur_masks[k] >= 0.5
        claimed = (owner == k) & original
        orig_area = int(original.sum())
        area = int(claimed.sum())
        if orig_area == 0 or area == 0 or area / orig_area < overlap_threshold:
            continue
        claimed = claimed.cpu().numpy()
        thing = taxonomy.is_thing(cls)
        if not thing and cls in stuff_ids:
            ids[claimed] = stuff_ids[cls]
            continue
        ids[claimed] = next_id
        segments[next_id] = (cls, thing)
        if not thing:
            stuff_ids[cls] = next_id
        next_id += 1
    return PanopticMap(ids, segments)


# ------------------------------------------------------------------ ground truth maps


def semantic_target(labels: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Label map from region masks; uncovered pixels are ``IGNORE``."""
    h, w = masks.shape[-2:]
    out = np.full((h, w), IGNORE, dtype=np.int64)
    for label, m in zip(labels, masks):
        out[m] = label
    return out


def panoptic_target(labels: np.ndarray, masks: np.ndarray, is_thing: np.ndarray) -> PanopticMap:
    h, w = masks.shape[-2:]
    ids = np.zeros((h, w), dtype=np.int64)
    segments = {}
    for i, (label, m, thing) in enumerate(zip(labels, masks, is_thing), start=1):
        ids[m] = i
        segments[i] = (int(label), bool(thing))
    return PanopticMap(ids, segments)


# ---------------------------------------------------------------------------- mIoU


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_categories: int) -> np.ndarray:
    valid = gt != IGNORE
    idx = gt[valid] * num_categories + pred[valid]
    return np.bincount(idx, minlength=num_categories ** 2).reshape(num_categories, num_categories)


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], taxonomy: DatasetTaxonomy) -> dict:
    """Per-class IoU accumulated over the split; the mean skips background and absent classes."""
    if len(preds) == 0:
        raise ValueError("cannot compute mIoU of an empty split")
    if len(preds) != len(gts):
        raise ValueError("prediction / ground-truth count mismatch")
    k1 = taxonomy.num_categories
    cm = np.zeros((k1, k1), dtype=np.int64)
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        if p.max(initial=0) >= k1 or g.max(initial=0) >= k1:
            raise ValueError("label outside the taxonomy")
        cm += confusion_matrix(p, g, k1)
    tp = np.diag(cm)
    fp = cm.sum(0) - tp
    fn = cm.sum(1) - tp
    present = cm.sum(1) > 0
    per_class = {}
    ious = []
    for c, name in enumerate(taxonomy.class_names):
        denom = tp[c] + fp[c] + fn[c]
        iou = float(tp[c] / denom) if denom else float("nan")
        per_class[name] = {"iou": iou, "tp": int(tp[c]), "fp": int(fp[c]), "fn": int(fn[c]),
                           "present": bool(present[c])}
        if present[c]:
            ious.append(iou)
    return {"miou": float(np.mean(ious)) if ious else float("nan"), "per_class": per_class}


# ----------------------------------------------------------------------------- PQ


@dataclass
class _ClassStat:
    iou: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def pq(self) -> Tuple[float, float, float]:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return float("nan"), float("nan"), float("nan")
        sq = self.iou / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return self.iou / denom, sq, rq


def _pq_accumulate(pred: PanopticMap, gt: PanopticMap, stats: Dict[int, _ClassStat]) -> None:
    if pred.ids.shape != gt.ids.shape:
        raise ValueError(f"shape mismatch {pred.ids.shape} vs {gt.ids.shape}")
    # joint histogram of (gt id, pred id)
    offset = max(int(pred.ids.max(initial=0)), 0) + 1
    pairs, counts = np.unique(gt.ids.astype(np.int64) * offset + pred.ids, return_counts=True)
    inter = {(int(p // offset), int(p % offset)): int(c) for p, c in zip(pairs, counts)}
    gt_area = {i: int((gt.ids == i).sum()) for i in gt.segments}
    pred_area = {i: int((pred.ids == i).sum()) for i in pred.segments}

    gt_matched, pred_matched = set(), set()
    for (g, p), n in inter.items():
        if g == VOID_ID or p == VOID_ID or g not in gt.segments or p not in pred.segments:
            continue
        if gt.segments[g][0] != pred.segments[p][0]:
            continue
        union = pred_area[p] + gt_area[g] - n - inter.get((VOID_ID, p), 0)
        iou = n / union
        if iou > 0.5:
            if g in gt_matched or p in pred_matched:
                raise AssertionError("PQ matching is not unique")
            gt_matched.add(g)
            pred_matched.add(p)
            st = stats.setdefault(gt.segments[g][0], _ClassStat())
            st.iou += iou
            st.tp += 1
    for g, (cls, _) in gt.segments.items():
        if g not in gt_matched:
            stats.setdefault(cls, _ClassStat()).fn += 1
    for p, (cls, _) in pred.segments.items():
        if p in pred_matched:
            continue
        # predictions lying mostly on void pixels are not penalised
        if pred_area[p] and inter.get((VOID_ID, p), 0) / pred_area[p] > 0.5:
            continue
        stats.setdefault(cls, _ClassStat()).fp += 1


def panoptic_quality(preds: Sequence[PanopticMap], gts: Sequence[PanopticMap],
                     taxonomy: Optional[DatasetTaxonomy] = None) -> dict:
    if len(preds) != len(gts):
        raise ValueError("prediction / ground-truth count mismatch")
    stats: Dict[int, _ClassStat] = {}
    for p, g in zip(preds, gts):
        _pq_accumulate(p, g, stats)
    per_class = {}
    pqs, sqs, rqs = [], [], []
    for cls in sorted(stats):
        st = stats[cls]
        pq, sq, rq = st.pq()
        name = taxonomy.class_names[cls] if taxonomy is not None else str(cls)
        per_class[name] = {"pq": pq, "sq": sq, "rq": rq, "tp": st.tp, "fp": st.fp, "fn": st.fn}
        if not np.isnan(pq):
            pqs.append(pq)
            sqs.append(sq)
            rqs.append(rq)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return {"pq": mean(pqs), "sq": mean(sqs), "rq": mean(rqs), "per_class": per_class}


# ----------------------------------------------------------------------- evaluation


def run_model(model, samples, taxonomy: DatasetTaxonomy, tables=None, batch_size: int = 16):
    """Yield (sample, logits, masks) per image, batching images of equal size."""
    model.eval()
    dtype = next(model.parameters()).dtype
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        by_size: Dict[Tuple[int, int], List[int]] = {}
        for i, s in enumerate(chunk):
            by_size.setdefault(s.size, []).append(i)
        outputs = [None] * len(chunk)
        for idxs in by_size.values():
            images = torch.from_numpy(np.stack([chunk[i].image for i in idxs])).to(dtype)
            pred = model.predict(images, taxonomy, tables)
            masks = pred.masks
            for j, i in enumerate(idxs):
                outputs[i] = (pred.logits[j], masks[j])
        for s, (lg, mk) in zip(chunk, outputs):
            yield s, lg, mk


def evaluate(model, samples, taxonomy: DatasetTaxonomy, task: str = "semantic",
             cfg: InferenceConfig = InferenceConfig(), tables=None) -> dict:
    if task not in ("semantic", "panoptic"):
        raise ValueError(f"unknown task {task!r}")
    if len(samples) == 0:
        raise ValueError("empty evaluation split")
    preds, gts = [], []
    for s, lg, mk in run_model(model, samples, taxonomy, tables, cfg.batch_size):
        if task == "semantic":
            preds.append(semantic_inference(lg, mk, taxonomy, cfg.background_threshold))
            gts.append(semantic_target(s.labels, s.masks))
        else:
            preds.append(panoptic_inference(lg, mk, taxonomy, cfg.score_threshold, cfg.overlap_threshold))
            gts.append(panoptic_target(s.labels, s.masks, s.is_thing))
    metrics = miou(preds, gts, taxonomy) if task == "semantic" else panoptic_quality(preds, gts, taxonomy)
    metrics.update({"dataset_id": taxonomy.dataset_id, "task": task, "num_images": len(samples)})
    return metrics


def write_report(metrics: dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True, allow_nan=True), encoding="utf-8")
    return path


def save_label_png(labels: np.ndarray, path: Union[str, Path]) -> None:
    """Dump a label map as a palette PNG; ignore pixels become index 255."""
    from PIL import Image

    rng = np.random.default_rng(0)
    palette = rng.integers(0, 256, (256, 3), dtype=np.uint8)
    palette[255] = 0
    img = Image.fromarray(np.where(labels < 0, 255, labels).astype(np.uint8), mode="P")
    img.putpalette(palette.flatten().tolist())
    img.save(path)
