"""Multi-dataset training loop, poly schedule, checkpoints and the loss log."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .config import ExperimentConfig
from .data import Sample, sample_batch
from .losses import SampleLossInput, total_loss
from .matching import GroundTruthSet, MatchingError, match_sample
from .model import SegmentationModel
from .taxonomy import DatasetTaxonomy, TaxonomyRegistry

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "langseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


def poly_lr(step: int, total: int, base: float, power: float = 0.9) -> float:
    """``base * (1 - step/total) ** power``; reaches 0 at ``step == total``."""
    if total <= 0:
        raise ValueError("total iterations must be positive")
    frac = min(max(step, 0), total) / total
    return base * (1.0 - frac) ** power


def build_model(cfg: ExperimentConfig) -> SegmentationModel:
    torch.manual_seed(cfg.seed)
    return SegmentationModel(cfg.model, tau=cfg.loss.tau)


def build_optimizer(model: SegmentationModel, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    groups = model.trainable_groups()
    o = cfg.optim
    param_groups = [{"params": v, "lr": o.lr * (o.backbone_lr_mult if k == "backbone" else 1.0),
                     "base_lr": o.lr * (o.backbone_lr_mult if k == "backbone" else 1.0), "name": k}
                    for k, v in groups.items() if v]
    return torch.optim.AdamW(param_groups, lr=o.lr, weight_decay=o.weight_decay)


def _to_tensor(a: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def forward_batch(model: SegmentationModel, samples: Sequence[Sample], registry: TaxonomyRegistry,
                  detach_logits: bool = False):
    """Run the model on a mixed-dataset batch.

    Samples are grouped by (dataset, image size); each group uses its own
    dataset's text table. Returns one ``(logits, mask_logits)`` pair per sample.
    """
    dtype = next(model.parameters()).dtype
    groups: Dict[Tuple[str, Tuple[int, int]], List[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.dataset_id, s.size), []).append(i)
    tables: Dict[str, torch.Tensor] = {}
    out = [None] * len(samples)
    for (ds, _), idxs in groups.items():
        if ds not in tables:
            tables[ds] = model.text_table(registry[ds]).embeddings
        images = _to_tensor(np.stack([samples[i].image for i in idxs]), dtype)
        pred = model(images, tables[ds], detach_logits=detach_logits)
        for j, i in enumerate(idxs):
            out[i] = (pred.logits[j], pred.mask_logits[j])
    return out


def batch_loss_inputs(model, samples, registry, loss_cfg, detach_logits: bool = False,
                      matchings=None):
    """Predictions, per-sample matchings (unless given) and loss inputs for one batch."""
    outputs = forward_batch(model, samples, registry, detach_logits)
    inputs, matches = [], []
    for k, (s, (logits, mlogits)) in enumerate(zip(samples, outputs)):
        masks = mlogits.sigmoid()
        gt = GroundTruthSet(s.labels, s.masks)
        m = matchings[k] if matchings is not None else match_sample(logits, masks, gt, loss_cfg)
        matches.append(m)
        inputs.append(SampleLossInput(logits, masks, gt.labels, _to_tensor(s.masks, masks.dtype),
                                      torch.from_numpy(m.pred_idx), torch.from_numpy(m.gt_idx),
                                      s.dataset_id))
    return inputs, matches


@dataclass
class TrainResult:
    history: List[dict]
    model: SegmentationModel


def train(cfg: ExperimentConfig, train_sets: Mapping[str, Sequence[Sample]], registry: TaxonomyRegistry,
          model: Optional[SegmentationModel] = None, loss_log: Optional[Union[str, Path]] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimise the total objective on batches drawn across all datasets."""
    model = model or build_model(cfg)
    opt = build_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    policies = cfg.policies()
    total = cfg.optim.iterations
    history: List[dict] = []
    fh = None
    if loss_log is not None:
        Path(loss_log).parent.mkdir(parents=True, exist_ok=True)
        fh = open(loss_log, "a", encoding="utf-8")
    try:
        model.train()
        for step in range(total):
            for g in opt.param_groups:
                g["lr"] = poly_lr(step, total, g["base_lr"], cfg.optim.poly_power)
            batch = sample_batch(train_sets, cfg.optim.batch_size, rng, policies, cfg.data.sampling)
            try:
                inputs, _ = batch_loss_inputs(model, batch.samples, registry, cfg.loss)
                loss, terms = total_loss(inputs, cfg.loss)
            except MatchingError as exc:
                # non-finite predictions surface here first
                loss, terms, detail = torch.tensor(float("nan")), {}, str(exc)
            else:
                detail = None
            record = {"step": step, "loss": float(loss.detach()), **terms,
                      "lr": opt.param_groups[0]["lr"], "counts": batch.counts}
            if not math.isfinite(record["loss"]):
                record["error"] = "non-finite loss"
                if detail:
                    record["detail"] = detail
                if fh:
                    fh.write(json.dumps(record) + "\n")
                raise TrainingDiverged(f"non-finite loss at step {step}: {terms}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]],
                                               cfg.optim.grad_clip)
            opt.step()
            history.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
            if progress is not None:
                progress(record)
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(history, model)


# ---------------------------------------------------------------------- checkpoints


def save_checkpoint(model: SegmentationModel, cfg: ExperimentConfig, registry: TaxonomyRegistry,
                    path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "config": json.dumps(cfg.to_dict()),
        "taxonomies": [t.to_manifest() for t in registry],
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[SegmentationModel, ExperimentConfig, TaxonomyRegistry]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ExperimentConfig.from_dict(json.loads(payload["config"]))
    registry = TaxonomyRegistry(DatasetTaxonomy.from_manifest(t) for t in payload["taxonomies"])
    model = SegmentationModel(cfg.model, tau=cfg.loss.tau)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the model: {exc}") from exc
    model.eval()
    return model, cfg, registry
