"""Command-line entry points.

    langseg generate-data --out data
    langseg train --set optim.iterations=2000
    langseg eval --checkpoint runs/model.ckpt --dataset toyA
    langseg embed-viz --checkpoint runs/model.ckpt --out-png emb.png --out-csv emb.csv
    langseg export-embeddings --checkpoint runs/model.ckpt --out emb.npz

Every subcommand takes ``--config FILE``, ``--profile toy|full`` and any number
of ``--set key=value`` overrides.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .data import build_corpus, default_toy_datasets, read_dataset, write_dataset
from .inference import evaluate, write_report
from .taxonomy import TaxonomyError, TaxonomyRegistry
from .text_encoder import TextEmbeddingTable, export_embeddings, load_embeddings
from .training import CheckpointError, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("langseg")


class CLIError(RuntimeError):
    pass


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set or (), args.profile)


# ------------------------------------------------------------------ generate-data


def cmd_generate_data(cfg: ExperimentConfig, out_dir: Path, force: bool = False) -> List[Path]:
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise CLIError(f"parent directory {out_dir.parent} does not exist")
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise CLIError(f"{out_dir} is not empty; pass --force to overwrite")
        shutil.rmtree(out_dir)
    out_dir.mkdir(exist_ok=True)
    toy = {d.taxonomy.dataset_id: d for d in default_toy_datasets()}
    wanted = [e.dataset_id for e in cfg.data.datasets] or list(toy)
    missing = [d for d in wanted if d not in toy]
    if missing:
        raise CLIError(f"no generator for datasets {missing}; known: {sorted(toy)}")
    datasets = [toy[d] for d in wanted]
    corpus = build_corpus(datasets, cfg.seed, cfg.data.n_train, cfg.data.n_val, cfg.data.task)
    return [write_dataset(out_dir, d.taxonomy, corpus[d.taxonomy.dataset_id], cfg.data.task)
            for d in datasets]


# ------------------------------------------------------------------------- train


def load_datasets(root: Path, dataset_ids: Sequence[str]):
    """Read the listed datasets from ``root``; returns (registry, {id: {split: samples}})."""
    root = Path(root)
    taxonomies, splits = [], {}
    for ds in dataset_ids:
        path = root / ds
        if not (path / "manifest.json").exists():
            raise CLIError(f"dataset {ds!r} not found under {root}; run generate-data first")
        tax, data, _ = read_dataset(path)
        taxonomies.append(tax)
        splits[ds] = data
    return TaxonomyRegistry(taxonomies), splits


def cmd_train(cfg: ExperimentConfig) -> Path:
    ids = [e.dataset_id for e in cfg.data.datasets]
    if not ids:
        raise CLIError("config lists no datasets")
    registry, data = load_datasets(Path(cfg.data.root), ids)
    train_sets = {k: v["train"] for k, v in data.items()}

    def progress(rec):
        if rec["step"] % 100 == 0:
            log.info("step %d loss %.4f lr %.2e", rec["step"], rec["loss"], rec["lr"])

    result = train(cfg, train_sets, registry, loss_log=cfg.loss_log, progress=progress)
    return save_checkpoint(result.model, cfg, registry, cfg.checkpoint)


# -------------------------------------------------------------------------- eval


def cmd_eval(checkpoint: Path, dataset_ids: Sequence[str] = (), task: Optional[str] = None,
             split: str = "val", data_root: Optional[Path] = None, report_dir: Optional[Path] = None,
             embeddings: Optional[Path] = None) -> Dict[str, dict]:
    model, cfg, registry = load_checkpoint(checkpoint)
    dataset_ids = list(dataset_ids) or registry.dataset_ids
    for ds in dataset_ids:
        if ds not in registry:
            raise CLIError(f"unknown dataset {ds!r}; registered: {', '.join(registry.dataset_ids)}")
    task = task or cfg.data.task
    tables = load_embeddings(embeddings, cfg.model.dim) if embeddings else None
    _, data = load_datasets(Path(data_root or cfg.data.root), dataset_ids)
    out_dir = Path(report_dir or cfg.report_dir)
    reports = {}
    for ds in dataset_ids:
        metrics = evaluate(model, data[ds][split], registry[ds], task, cfg.inference, tables)
        metrics["split"] = split
        write_report(metrics, out_dir / f"{ds}_{task}.json")
        reports[ds] = metrics
    return reports


# --------------------------------------------------------------------- embeddings


def class_tables(model, registry: TaxonomyRegistry) -> Dict[str, TextEmbeddingTable]:
    import torch

    with torch.no_grad():
        return {t.dataset_id: model.text_table(t) for t in registry}


def project_2d(vectors: np.ndarray, method: str = "pca", seed: int = 0) -> np.ndarray:
    """2-D coordinates; identical input rows always land on the same point."""
    uniq, inverse = np.unique(vectors, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if method == "pca":
        from sklearn.decomposition import PCA

        xy = PCA(n_components=2, svd_solver="full").fit_transform(uniq)
    elif method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (len(uniq) - 1) / 3))
        xy = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(uniq)
    else:
        raise CLIError(f"unknown projection {method!r}")
    return xy[inverse]


def cmd_embed_viz(checkpoint: Path, out_png: Path, out_csv: Path, method: str = "pca",
                  seed: int = 0) -> List[dict]:
    model, _, registry = load_checkpoint(checkpoint)
    tables = class_tables(model, registry)
    rows, vecs = [], []
    for tax in registry:
        emb = tables[tax.dataset_id].embeddings.numpy().astype(np.float64)
        for name, v in zip(tax.category_names, emb):
            rows.append({"dataset": tax.dataset_id, "class": name})
            vecs.append(v)
    xy = project_2d(np.stack(vecs), method, seed)
    for r, (x, y) in zip(rows, xy):
        r["x"], r["y"] = float(x), float(y)
    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["dataset", "class", "x", "y"])
        w.writeheader()
        w.writerows(rows)
    _scatter(rows, Path(out_png), method)
    return rows


def _scatter(rows: List[dict], path: Path, method: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    markers = "os^Dvx"
    for k, ds in enumerate(dict.fromkeys(r["dataset"] for r in rows)):
        pts = [r for r in rows if r["dataset"] == ds]
        ax.scatter([p["x"] for p in pts], [p["y"] for p in pts], marker=markers[k % len(markers)],
                   s=60, alpha=0.6, label=ds)
        for p in pts:
            ax.annotate(p["class"], (p["x"], p["y"]), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_title(f"class embeddings ({method})")
    ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_export_embeddings(checkpoint: Path, out_file: Path) -> Path:
    model, _, registry = load_checkpoint(checkpoint)
    return export_embeddings(class_tables(model, registry), out_file)


# --------------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--profile", default="toy", choices=("toy", "full"))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="langseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="write the toy datasets to disk")
    g.add_argument("--out", type=Path, help="output directory (default: data.root)")
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    sub.add_parser("train", parents=[common], help="train one model on all configured datasets")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint per dataset")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", action="append", default=[], help="dataset id (repeatable; default all)")
    e.add_argument("--task", choices=("semantic", "panoptic"))
    e.add_argument("--split", default="val")
    e.add_argument("--data-root", type=Path)
    e.add_argument("--report-dir", type=Path)
    e.add_argument("--embeddings", type=Path, help="use an exported embedding cache")

    v = sub.add_parser("embed-viz", parents=[common], help="2-D projection of all class embeddings")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("--out-png", type=Path, required=True)
    v.add_argument("--out-csv", type=Path, required=True)
    v.add_argument("--tsne", action="store_true", help="use t-SNE instead of PCA")
    v.add_argument("--seed", type=int, default=0)

    x = sub.add_parser("export-embeddings", parents=[common], help="write the class embedding cache")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--out", type=Path, required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "generate-data":
            cfg = _config(args)
            for d in cmd_generate_data(cfg, args.out or Path(cfg.data.root), args.force):
                print(d)
        elif args.command == "train":
            print(cmd_train(_config(args)))
        elif args.command == "eval":
            reports = cmd_eval(args.checkpoint, args.dataset, args.task, args.split, args.data_root,
                               args.report_dir, args.embeddings)
            for ds, m in reports.items():
                key = "miou" if m["task"] == "semantic" else "pq"
                print(f"{ds}\t{m['task']}\t{key}={m[key]:.4f}")
        elif args.command == "embed-viz":
            rows = cmd_embed_viz(args.checkpoint, args.out_png, args.out_csv,
                                 "tsne" if args.tsne else "pca", args.seed)
            print(f"{len(rows)} classes -> {args.out_csv}, {args.out_png}")
        elif args.command == "export-embeddings":
            print(cmd_export_embeddings(args.checkpoint, args.out))
    except (CLIError, ConfigError, CheckpointError, TaxonomyError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"langseg: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
