"""Acceptance criteria, one test per criterion.

Each test prints a ``criterion N PASS|FAIL`` line (also collected in the
terminal summary). The training-based criteria share two session-scoped runs:
a joint semantic model over toyA/toyB/toyC and a panoptic model.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from langseg.cgd import CGDLayerConfig, CGDStack, cgd_stack
from langseg.backbone import ImageEncoder
from langseg.cli import cmd_generate_data, cmd_train
from langseg.config import load_config
from langseg.data import (AugmentationPolicy, build_corpus, default_toy_datasets, project_labels,
                          generate_scene, registry_of, sample_batch, scene_seed)
from langseg.inference import PanopticMap, evaluate, panoptic_quality, semantic_inference
from langseg.losses import LossConfig, contrastive_loss, dice_loss, focal_loss, total_loss
from langseg.matching import brute_force_match, hungarian_match
from langseg.text_encoder import export_embeddings, load_embeddings
from langseg.training import batch_loss_inputs, build_model, load_checkpoint, save_checkpoint, train

SEMANTIC_STEPS = 5000
PANOPTIC_STEPS = 5000
TIME_BUDGET = 30 * 60
# single-dataset models (2000 steps each, see demos/joint_vs_single.py) reach these
SINGLE_DATASET_MIOU = {"toyA": 1.0000, "toyB": 0.9999, "toyC": 1.0000}
# frozen once from the baseline: joint training may trail it by at most 0.03
MIOU_THRESHOLD = 0.97
PQ_THRESHOLD = 0.5


def _fit(task: str, steps: int):
    datasets = default_toy_datasets()
    registry = registry_of(datasets)
    corpus = build_corpus(datasets, seed=0, n_train=500, n_val=100, task=task)
    cfg = load_config(overrides=[f"optim.iterations={steps}", f"data.task={task}"])
    start = time.perf_counter()
    result = train(cfg, {k: v["train"] for k, v in corpus.items()}, registry)
    return {"model": result.model, "cfg": cfg, "registry": registry, "corpus": corpus,
            "history": result.history, "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def joint_semantic():
    return _fit("semantic", SEMANTIC_STEPS)


@pytest.fixture(scope="session")
def panoptic_run():
    return _fit("panoptic", PANOPTIC_STEPS)


# ------------------------------------------------------------------------------ 1


def test_criterion_01_matching_oracle(acceptance):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, n + 1))
        cost = rng.normal(size=(n, m)) * rng.choice([0.1, 1.0, 100.0])
        worst = max(worst, abs(hungarian_match(cost).total_cost - brute_force_match(cost).total_cost))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    acceptance(1, "Hungarian == brute force on 200 matrices", ok, f"max |diff| {worst:.1e}, {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------------------ 2


def _flat_params(model):
    return {
        "prompt": model.prompt.vectors,
        "adapter": model.adapter.weight,
        "query_pos": model.decoder.query_pos,
        "backbone_final": model.pixel.decoder.out_conv.weight,
    }


def test_criterion_02_gradient_check(acceptance):
    start = time.perf_counter()
    cfg = load_config()
    torch.manual_seed(0)
    model = build_model(cfg).double()
    model.train()
    datasets = default_toy_datasets()
    registry = registry_of(datasets)
    corpus = build_corpus(datasets, seed=5, n_train=1, n_val=0)
    samples = [corpus["toyA"]["train"][0], corpus["toyB"]["train"][0]]
    _, sigma = batch_loss_inputs(model, samples, registry, cfg.loss)  # fixed assignment

    def objective():
        inputs, _ = batch_loss_inputs(model, samples, registry, cfg.loss, matchings=sigma)
        return total_loss(inputs, cfg.loss)[0]

    model.zero_grad()
    objective().backward()
    rng = np.random.default_rng(0)
    h = 1e-4  # near the cube-root-of-epsilon optimum for central differences
    worst = {}
    for name, p in _flat_params(model).items():
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        errs = []
        for i in rng.choice(flat.numel(), size=20, replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = objective().item()
                flat[i] = orig - h
                down = objective().item()
                flat[i] = orig
            fd = (up - down) / (2 * h)
            a = analytic[i].item()
            errs.append(abs(fd - a) / max(abs(fd), abs(a), 1e-12))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    acceptance(2, "finite differences vs autograd, fixed matching", ok,
               ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------------------ 3


def test_criterion_03_loss_closed_forms(acceptance):
    cfg = LossConfig()
    checks = {}
    for k in (1, 4, 9):
        logits = torch.zeros(6, k + 1, dtype=torch.float64)
        labels = torch.tensor([0, 0, 0, 0, 0, 0])
        checks[f"ln(K+1) K={k}"] = abs(contrastive_loss(logits, labels, cfg).item() - math.log(k + 1)) <= 1e-6

    # one real-class query and one no-object query with the same row of logits
    row = torch.tensor([[1.3, -0.4, 0.7]], dtype=torch.float64)
    logits = row.repeat(2, 1)
    ce = torch.nn.functional.cross_entropy(row, torch.tensor([2])).item()
    ce_real = torch.nn.functional.cross_entropy(row, torch.tensor([0])).item()
    both = contrastive_loss(logits, torch.tensor([0, 2]), cfg).item() * 2
    checks["no-object weight 0.1"] = abs((both - ce_real) - 0.1 * ce) <= 1e-12

    one = torch.ones(8, 8)
    half_pred = torch.zeros(8, 8); half_pred[:, :4] = 1
    checks["dice identical=0"] = abs(dice_loss(one, one, smooth=0).item()) <= 1e-6
    checks["dice disjoint=1"] = abs(dice_loss(half_pred, 1 - half_pred, smooth=0).item() - 1) <= 1e-6
    # equal-area masks sharing half their pixels
    a = torch.zeros(8, 8); a[:, :4] = 1
    b = torch.zeros(8, 8); b[:, 2:6] = 1
    checks["dice half overlap=0.5"] = abs(dice_loss(a, b, smooth=0).item() - 0.5) <= 1e-6
    focal = focal_loss(torch.tensor([[0.5]]), torch.tensor([[1.0]])).item()
    checks["focal p_t=0.5"] = abs(focal - 0.04332) <= 1e-5
    ok = all(checks.values())
    acceptance(3, "loss closed forms", ok, ", ".join(k for k, v in checks.items() if not v) or "all hold")
    assert ok


# ------------------------------------------------------------------------------ 4


def _redirection_stats(run, n_images: int = 50):
    model, registry, corpus = run["model"], run["registry"], run["corpus"]
    tax_a, tax_b = registry["toyA"], registry["toyB"]
    images = corpus["toyA"]["val"][:n_images]
    batch = torch.from_numpy(np.stack([s.image for s in images]))
    pa, pb = model.predict(batch, tax_a), model.predict(batch, tax_b)
    violations = 0
    for k in range(len(images)):
        la = semantic_inference(pa.logits[k], pa.masks[k], tax_a)
        lb = semantic_inference(pb.logits[k], pb.masks[k], tax_b)
        violations += int(np.isin(la, np.arange(tax_a.num_categories), invert=True).sum())
        violations += int(np.isin(lb, np.arange(tax_b.num_categories), invert=True).sum())
        violations += int(pa.logits.shape[-1] != tax_a.num_categories) + int(pb.logits.shape[-1] != tax_b.num_categories)
    mask_diff = (pa.masks - pb.masks).abs().max().item()
    return violations, torch.equal(pa.masks, pb.masks), mask_diff


def _split_accuracy(run, n_images: int = 50):
    """Circle pixels of toyA images labelled with toyB's size classes."""
    model, registry = run["model"], run["registry"]
    toy = {d.taxonomy.dataset_id: d for d in default_toy_datasets()}
    tax_b = registry["toyB"]
    correct = total = 0
    for i in range(n_images):
        scene = generate_scene(scene_seed(0, 0, "val", i))
        gt = project_labels(scene, toy["toyB"].projection, tax_b)
        pred = model.predict(torch.from_numpy(scene.image[None]), tax_b)
        labels = semantic_inference(pred.logits[0], pred.masks[0], tax_b)
        for lab, m in zip(gt.labels, gt.masks):
            if "circle" in tax_b.class_names[lab]:
                correct += int((labels[m] == lab).sum())
                total += int(m.sum())
    return correct / max(total, 1)


@pytest.mark.slow
def test_criterion_04_taxonomy_redirection(joint_semantic, acceptance):
    violations, identical, diff = _redirection_stats(joint_semantic)
    split_acc = _split_accuracy(joint_semantic)
    fast = joint_semantic["seconds"] < TIME_BUDGET
    ok = violations == 0 and identical and fast and SEMANTIC_STEPS <= 5000
    acceptance(4, "taxonomy redirection (labels + bitwise-identical masks)", ok,
               f"label violations {violations}, masks identical {identical} (max |diff| {diff:.3g}), "
               f"toyB size labels on toyA images {split_acc:.3f}, train {joint_semantic['seconds']:.0f}s")
    assert violations == 0
    assert fast
    assert identical, f"masks differ between taxonomies by up to {diff}"


# ------------------------------------------------------------------------------ 5


@pytest.mark.slow
def test_criterion_05_joint_accuracy(joint_semantic, acceptance):
    run = joint_semantic
    scores = {ds: evaluate(run["model"], run["corpus"][ds]["val"], run["registry"][ds], "semantic",
                           run["cfg"].inference)["miou"]
              for ds in run["registry"].dataset_ids}
    ok = all(v >= MIOU_THRESHOLD for v in scores.values())
    acceptance(5, f"joint model mIoU >= {MIOU_THRESHOLD} on every toy split", ok,
               ", ".join(f"{k} {v:.4f} (single {SINGLE_DATASET_MIOU[k]:.4f})" for k, v in scores.items()))
    assert ok


# ------------------------------------------------------------------------------ 6


def _pm(ids, segments):
    return PanopticMap(np.asarray(ids), segments)


@pytest.mark.slow
def test_criterion_06_panoptic(panoptic_run, acceptance):
    ids = np.zeros((8, 8), int); ids[:4] = 1; ids[4:, :4] = 2
    same = _pm(ids, {1: (0, False), 2: (2, True)})
    identical = panoptic_quality([same], [same])["pq"]

    gt = np.zeros((10, 10), int); pred = np.zeros((10, 10), int)
    gt[0, :] = 1; pred[0, :8] = 1  # IoU 0.8
    gt[5:7, :3] = 2  # unmatched ground truth
    gt[8:, :] = 3; pred[8:, 5:8] = 2  # unmatched prediction on another class
    hand = panoptic_quality([_pm(pred, {1: (2, True), 2: (2, True)})],
                            [_pm(gt, {1: (2, True), 2: (2, True), 3: (0, False)})])["per_class"]["2"]["pq"]

    run = panoptic_run
    pqs = {ds: evaluate(run["model"], run["corpus"][ds]["val"], run["registry"][ds], "panoptic",
                        run["cfg"].inference)["pq"]
           for ds in run["registry"].dataset_ids}
    ok = identical == 1.0 and hand == 0.4 and all(v >= PQ_THRESHOLD for v in pqs.values()) \
        and run["seconds"] < TIME_BUDGET
    acceptance(6, f"PQ hand cases, {PANOPTIC_STEPS}-step panoptic PQ >= {PQ_THRESHOLD}", ok,
               f"identical {identical}, hand {hand}, " + ", ".join(f"{k} {v:.4f}" for k, v in pqs.items())
               + f", train {run['seconds']:.0f}s")
    assert identical == 1.0 and hand == 0.4
    assert all(v >= PQ_THRESHOLD for v in pqs.values()), pqs


# ------------------------------------------------------------------------------ 7


def test_criterion_07_cgd_equivariance(acceptance):
    worst = 0.0
    for seed in range(20):
        torch.manual_seed(seed)
        stack = CGDStack(CGDLayerConfig(dim=32, heads=4, ffn_dim=64, layers=3), num_queries=12, feature_dim=16)
        encoder = ImageEncoder((4, 8, 8, 16))
        f = encoder(torch.rand(2, 3, 32, 32))
        mem, mem_pos = stack.memory(f)
        text = torch.randn(int(torch.randint(2, 8, ())), 32)
        q = stack.initial_queries(2)
        q.content = torch.randn_like(q.content)
        perm = torch.randperm(12)
        with torch.no_grad():
            ref = cgd_stack(q, mem, mem_pos, text, stack.layers).content
            out = cgd_stack(q.permute(perm), mem, mem_pos, text, stack.layers).content
        worst = max(worst, (out - ref[:, perm]).abs().max().item())
    ok = worst < 1e-5
    acceptance(7, "CGD query-permutation equivariance, 20 seeds", ok, f"max |dev| {worst:.1e}")
    assert ok


# ------------------------------------------------------------------------------ 8


def test_criterion_08_dataset_aware_augmentation(acceptance):
    datasets = default_toy_datasets()
    corpus = build_corpus(datasets, seed=2, n_train=20, n_val=0)
    sets = {k: v["train"] for k, v in corpus.items()}
    policies = {d.taxonomy.dataset_id: d.policy for d in datasets}
    policies["toyB"] = AugmentationPolicy("toyB", (48, 96), (1.5, 1.8), 0.5, 0.1)
    rng = np.random.default_rng(0)
    violations = 0
    seen = 0
    while seen < 1000:
        batch = sample_batch(sets, 50, rng, policies)
        for s in batch.samples:
            violations += int(s.size != policies[s.dataset_id].crop or s.image.shape[1:] != s.masks.shape[1:])
        seen += len(batch.samples)

    freq_sets = {"toyA": sets["toyA"][:2], "toyB": sets["toyB"], "toyC": sets["toyC"][:7]}
    counts = sample_batch(freq_sets, 10_000, np.random.default_rng(1)).counts
    dev = max(abs(c / 10_000 - 1 / 3) for c in counts.values())
    ok = violations == 0 and dev <= 0.02
    acceptance(8, "per-dataset crop sizes and uniform sampling", ok,
               f"{seen} elements, {violations} violations, max freq deviation {dev:.4f}")
    assert ok


# ------------------------------------------------------------------------------ 9


DETERMINISM_STEPS = 200


@pytest.mark.slow
def test_criterion_09_determinism(joint_semantic, tmp_path, acceptance):
    logs = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        cfg = load_config(overrides=[f"data.root={root / 'data'}", f"checkpoint={root / 'model.ckpt'}",
                                     f"loss_log={root / 'loss_log.jsonl'}", f"optim.iterations={DETERMINISM_STEPS}",
                                     "data.n_train=100", "data.n_val=10"])
        cmd_generate_data(cfg, root / "data")
        cmd_train(cfg)
        logs.append((root / "loss_log.jsonl").read_text())
    same_logs = logs[0] == logs[1] and len(logs[0].splitlines()) == DETERMINISM_STEPS

    run = joint_semantic
    path = save_checkpoint(run["model"], run["cfg"], run["registry"], tmp_path / "joint.ckpt")
    loaded, cfg2, reg2 = load_checkpoint(path)
    same_metrics = True
    for ds in run["registry"].dataset_ids:
        val = run["corpus"][ds]["val"]
        a = evaluate(run["model"], val, run["registry"][ds], "semantic", run["cfg"].inference)
        b = evaluate(loaded, val, reg2[ds], "semantic", cfg2.inference)
        same_metrics &= json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    ok = same_logs and same_metrics
    acceptance(9, "identical loss logs across runs, exact checkpoint round-trip", ok,
               f"logs identical {same_logs} ({DETERMINISM_STEPS} steps each), metrics identical {same_metrics}")
    assert ok


# ----------------------------------------------------------------------------- 10


@pytest.mark.slow
def test_criterion_10_embedding_cache(joint_semantic, tmp_path, acceptance):
    run = joint_semantic
    model, registry = run["model"], run["registry"]
    with torch.no_grad():
        tables = {t.dataset_id: model.text_table(t) for t in registry}
    cache = load_embeddings(export_embeddings(tables, tmp_path / "emb.npz"), model.cfg.dim)
    mismatches = 0
    for ds in registry.dataset_ids:
        images = torch.from_numpy(np.stack([s.image for s in run["corpus"][ds]["val"][:20]]))
        live = model.predict(images, registry[ds])
        cached = model.predict(images, registry[ds], cache)
        mismatches += int(not (torch.equal(live.logits, cached.logits) and torch.equal(live.masks, cached.masks)))
    ok = mismatches == 0
    acceptance(10, "cached embeddings reproduce live inference bit-exactly (20 images)", ok,
               f"{mismatches} of {len(registry.dataset_ids)} datasets differ")
    assert ok
