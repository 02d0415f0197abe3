"""Synthetic multi-dataset corpora with conflicting taxonomies.

Scenes are colored shapes over a two-part textured background. Every toy
dataset starts from the same base ontology and relabels it through a
``TaxonomyProjection`` (merge, split, rename or drop), so the datasets
disagree about names and granularity while sharing the visual world.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .taxonomy import DatasetTaxonomy, TaxonomyRegistry, normalize_class_name

DATASET_FORMAT_VERSION = 1


class ProjectionError(ValueError):
    pass


class AugmentationError(KeyError):
    pass


# --------------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class ThingSpec:
    name: str
    kind: str  # circle | square | triangle
    sizes: Tuple[Tuple[float, float], ...]  # one or more (lo, hi) bands for the radius / half-side
    color: Tuple[float, float, float]


@dataclass(frozen=True)
class StuffSpec:
    name: str
    region: str  # "top" | "bottom" of the horizon
    color: Tuple[float, float, float]


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 64
    width: int = 64
    object_count: Tuple[int, int] = (1, 4)
    things: Tuple[ThingSpec, ...] = (
        ThingSpec("circle", "circle", ((6.0, 9.0), (12.0, 15.0)), (0.90, 0.20, 0.20)),
        ThingSpec("square", "square", ((6.0, 11.0),), (0.95, 0.85, 0.15)),
        ThingSpec("triangle", "triangle", ((8.0, 13.0),), (0.65, 0.20, 0.85)),
    )
    stuff: Tuple[StuffSpec, ...] = (
        StuffSpec("sky", "top", (0.55, 0.75, 0.95)),
        StuffSpec("ground", "bottom", (0.45, 0.35, 0.20)),
    )
    horizon: Tuple[float, float] = (0.3, 0.7)
    color_jitter: float = 0.08
    noise: float = 0.04
    max_tries: int = 200

    @property
    def base_classes(self) -> Tuple[str, ...]:
        return tuple(s.name for s in self.stuff) + tuple(t.name for t in self.things)

    def median_size(self, name: str) -> float:
        """Midpoint of the full size range of one thing class."""
        spec = next(t for t in self.things if t.name == name)
        return 0.5 * (min(lo for lo, _ in spec.sizes) + max(hi for _, hi in spec.sizes))


@dataclass
class Instance:
    base_class: str
    mask: np.ndarray  # (H, W) bool
    is_thing: bool
    size: float = 0.0

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class BaseScene:
    image: np.ndarray  # (3, H, W) float32, values on the uint8 grid / 255
    instances: List[Instance]
    seed: int


def _from_uint8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32) / np.float32(255)


def _shape_mask(kind: str, cy: float, cx: float, size: float, angle: float,
                yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if kind == "square":
        return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
    if kind == "triangle":
        verts = [(cy + size * math.sin(angle + k * 2 * math.pi / 3),
                  cx + size * math.cos(angle + k * 2 * math.pi / 3)) for k in range(3)]
        signs = []
        for (y1, x1), (y2, x2) in zip(verts, verts[1:] + verts[:1]):
            signs.append((xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1))
        s = np.stack(signs)
        return (s >= 0).all(0) | (s <= 0).all(0)
    raise ValueError(f"unknown shape kind {kind!r}")


def _texture(rng: np.random.Generator, h: int, w: int, color, cfg: GeneratorConfig) -> np.ndarray:
    base = np.clip(np.asarray(color) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
    fy, fx = rng.uniform(0.1, 0.5, 2)
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    wave = 0.05 * np.sin(fy * yy + fx * xx + phase)
    tex = base[:, None, None] + wave[None] + rng.normal(0, cfg.noise, (3, h, w))
    return tex


def generate_scene(seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> BaseScene:
    if not cfg.things and not cfg.stuff:
        raise ValueError("generator config has no classes")
    lo, hi = cfg.object_count
    if lo < 0 or hi < lo:
        raise ValueError(f"bad object count range {cfg.object_count}")
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.zeros((3, h, w))
    instances: List[Instance] = []

    if cfg.stuff:
        horizon = int(round(rng.uniform(*cfg.horizon) * h))
        regions = {"top": yy < horizon, "bottom": yy >= horizon}
        if len(cfg.stuff) == 1:
            regions = {s.region: np.ones((h, w), bool) for s in cfg.stuff}
        for s in cfg.stuff:
            m = regions[s.region].copy()
            image = np.where(m[None], _texture(rng, h, w, s.color, cfg), image)
            if m.any():
                instances.append(Instance(s.name, m, False))

    occupied = np.zeros((h, w), bool)
    n_obj = int(rng.integers(lo, hi + 1)) if cfg.things else 0
    placed = 0
    for _ in range(cfg.max_tries):
        if placed == n_obj:
            break
        spec = cfg.things[int(rng.integers(len(cfg.things)))]
        band = spec.sizes[int(rng.integers(len(spec.sizes)))]
        size = float(rng.uniform(*band))
        margin = size + 1
        if 2 * margin >= min(h, w):
            continue
        cy, cx = rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)
        m = _shape_mask(spec.kind, cy, cx, size, float(rng.uniform(0, 2 * math.pi)), yy, xx)
        grown = m.copy()
        grown[1:] |= m[:-1]; grown[:-1] |= m[1:]; grown[:, 1:] |= m[:, :-1]; grown[:, :-1] |= m[:, 1:]
        if not m.any() or (grown & occupied).any():
            continue
        occupied |= m
        color = np.clip(np.asarray(spec.color) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        shade = color[:, None, None] + rng.normal(0, cfg.noise, (3, h, w))
        image = np.where(m[None], shade, image)
        instances.append(Instance(spec.name, m, True, size))
        placed += 1
    if placed < lo:
        raise RuntimeError(f"could not place {lo} objects on a {h}x{w} canvas")

    for inst in instances:
        if not inst.is_thing:
            inst.mask = inst.mask & ~occupied
    instances = [i for i in instances if i.mask.any()]
    return BaseScene(_from_uint8(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)), instances, seed)


# ---------------------------------------------------------------------- projections


@dataclass(frozen=True)
class SplitRule:
    """Choose ``small`` or ``large`` by comparing the base mask area to ``area_threshold``."""

    small: str
    large: str
    area_threshold: float


@dataclass
class TaxonomyProjection:
    """Maps every base class to a target class name, a ``SplitRule``, or ``None`` (drop)."""

    dataset_id: str
    rules: Dict[str, Union[str, SplitRule, None]]

    def mode(self, base_class: str) -> str:
        rule = self.rules[base_class]
        if rule is None:
            return "drop"
        if isinstance(rule, SplitRule):
            return "split"
        if sum(1 for r in self.rules.values() if r == rule) > 1:
            return "merge"
        return "rename" if normalize_class_name(rule) != normalize_class_name(base_class) else "identity"

    def target(self, inst: Instance) -> Optional[str]:
        if inst.base_class not in self.rules:
            raise ProjectionError(f"{self.dataset_id}: projection does not cover {inst.base_class!r}")
        rule = self.rules[inst.base_class]
        if isinstance(rule, SplitRule):
            return rule.large if inst.area >= rule.area_threshold else rule.small
        return rule

    def target_names(self) -> List[str]:
        out: List[str] = []
        for rule in self.rules.values():
            names = [] if rule is None else [rule.small, rule.large] if isinstance(rule, SplitRule) else [rule]
            for n in names:
                if n not in out:
                    out.append(n)
        return out


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32
    labels: np.ndarray  # (M,) int64
    masks: np.ndarray  # (M, H, W) bool
    dataset_id: str
    is_thing: np.ndarray = None  # (M,) bool

    def __post_init__(self):
        if self.is_thing is None:
            self.is_thing = np.ones(len(self.labels), bool)

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def void(self) -> np.ndarray:
        """Pixels covered by no ground-truth segment."""
        if len(self.masks) == 0:
            return np.ones(self.size, bool)
        return ~self.masks.any(0)


def project_labels(scene: BaseScene, proj: TaxonomyProjection, tax: DatasetTaxonomy,
                   task: str = "semantic") -> Sample:
    """Annotate a base scene in one dataset's own taxonomy.

    ``semantic`` fuses all segments of a class into one region mask;
    ``panoptic`` keeps thing instances separate and fuses stuff per class.
    Dropped classes leave their pixels unlabeled.
    """
    if task not in ("semantic", "panoptic"):
        raise ValueError(f"unknown task {task!r}")
    segments: List[Tuple[int, np.ndarray, bool]] = []
    for inst in scene.instances:
        name = proj.target(inst)
        if name is None:
            continue
        label = tax.index(name)
        segments.append((label, inst.mask, tax.is_thing(label)))

    fused: Dict[int, np.ndarray] = {}
    kept: List[Tuple[int, np.ndarray, bool]] = []
    for label, mask, thing in segments:
        if task == "panoptic" and thing:
            kept.append((label, mask, True))
        else:
            fused[label] = fused.get(label, np.zeros_like(mask)) | mask
    kept.extend((label, m, tax.is_thing(label)) for label, m in fused.items())
    kept.sort(key=lambda t: t[0])
    h, w = scene.image.shape[1:]
    labels = np.array([k[0] for k in kept], dtype=np.int64)
    masks = np.stack([k[1] for k in kept]) if kept else np.zeros((0, h, w), bool)
    things = np.array([k[2] for k in kept], dtype=bool)
    return Sample(scene.image, labels, masks.astype(bool), tax.dataset_id, things)


# --------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    dataset_id: str
    crop: Tuple[int, int] = (64, 64)
    scale_range: Tuple[float, float] = (1.0, 1.0)
    flip_prob: float = 0.5
    color_jitter: float = 0.0

    def validate(self, image_size: Tuple[int, int]) -> None:
        h, w = image_size
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"{self.dataset_id}: bad scale range {self.scale_range}")
        if math.floor(h * lo) < self.crop[0] or math.floor(w * lo) < self.crop[1]:
            raise ValueError(
                f"{self.dataset_id}: crop {self.crop} does not fit a {h}x{w} image scaled by {lo}")


def _resize_index(n: int, scale: float) -> np.ndarray:
    out = max(1, int(math.floor(n * scale)))
    return np.minimum(((np.arange(out) + 0.5) / scale).astype(np.int64), n - 1)


def dataset_aware_augment(sample: Sample, policies: Mapping[str, AugmentationPolicy],
                          rng: np.random.Generator) -> Sample:
    """Apply the source dataset's policy; image and masks share one pixel mapping."""
    try:
        policy = policies[sample.dataset_id]
    except KeyError:
        raise AugmentationError(f"no augmentation policy for dataset {sample.dataset_id!r}") from None
    h, w = sample.size
    policy.validate((h, w))
    ch, cw = policy.crop
    s = float(rng.uniform(*policy.scale_range))
    rows, cols = _resize_index(h, s), _resize_index(w, s)
    top = int(rng.integers(0, len(rows) - ch + 1))
    left = int(rng.integers(0, len(cols) - cw + 1))
    rows, cols = rows[top:top + ch], cols[left:left + cw]
    if rng.random() < policy.flip_prob:
        cols = cols[::-1]
    image = sample.image[:, rows[:, None], cols[None, :]]
    masks = sample.masks[:, rows[:, None], cols[None, :]]
    if policy.color_jitter > 0:
        j = policy.color_jitter
        b, c = rng.uniform(1 - j, 1 + j, 2)
        mean = image.mean()
        image = np.clip((image - mean) * c + mean * b, 0, 1).astype(np.float32)
    keep = masks.reshape(len(masks), -1).any(1)
    return Sample(np.ascontiguousarray(image), sample.labels[keep], np.ascontiguousarray(masks[keep]),
                  sample.dataset_id, sample.is_thing[keep])


# -------------------------------------------------------------------------- batches


@dataclass
class TrainingBatch:
    samples: List[Sample]
    counts: Dict[str, int]


def sample_batch(datasets: Mapping[str, Sequence[Sample]], batch_size: int,
                 rng: np.random.Generator, policies: Optional[Mapping[str, AugmentationPolicy]] = None,
                 mode: str = "uniform") -> TrainingBatch:
    """Draw a dataset per slot (uniformly, or proportional to size), then a sample within it."""
    ids = [k for k, v in datasets.items() if len(v)]
    if not ids:
        raise ValueError("no non-empty dataset to sample from")
    if mode == "uniform":
        p = None
    elif mode == "proportional":
        sizes = np.array([len(datasets[k]) for k in ids], dtype=float)
        p = sizes / sizes.sum()
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    samples, counts = [], {k: 0 for k in datasets}
    for _ in range(batch_size):
        k = ids[int(rng.choice(len(ids), p=p))]
        s = datasets[k][int(rng.integers(len(datasets[k])))]
        if policies is not None:
            s = dataset_aware_augment(s, policies, rng)
        samples.append(s)
        counts[k] += 1
    return TrainingBatch(samples, counts)


# ------------------------------------------------------------------- toy corpora


@dataclass
class ToyDataset:
    taxonomy: DatasetTaxonomy
    projection: TaxonomyProjection
    policy: AugmentationPolicy


def default_toy_datasets(gen: GeneratorConfig = GeneratorConfig()) -> List[ToyDataset]:
    """toyA merges circle sizes; toyB splits them; toyC renames square and drops triangle."""
    threshold = math.pi * gen.median_size("circle") ** 2
    stuff = ("sky", "ground")
    a = DatasetTaxonomy("toyA", stuff + ("circle", "square", "triangle"), frozenset(stuff))
    b = DatasetTaxonomy("toyB", stuff + ("small-circle", "large-circle", "square", "triangle"),
                        frozenset(stuff))
    c = DatasetTaxonomy("toyC", stuff + ("circle", "box"), frozenset(stuff))
    ident = {"sky": "sky", "ground": "ground"}
    return [
        ToyDataset(a, TaxonomyProjection("toyA", {**ident, "circle": "circle", "square": "square",
                                                  "triangle": "triangle"}),
                   AugmentationPolicy("toyA", (64, 64), (1.0, 1.2), 0.5, 0.1)),
        ToyDataset(b, TaxonomyProjection("toyB", {**ident, "circle": SplitRule("small-circle", "large-circle",
                                                                               threshold),
                                                  "square": "square", "triangle": "triangle"}),
                   AugmentationPolicy("toyB", (48, 64), (1.0, 1.15), 0.5, 0.1)),
        ToyDataset(c, TaxonomyProjection("toyC", {**ident, "circle": "circle", "square": "box",
                                                  "triangle": None}),
                   AugmentationPolicy("toyC", (64, 48), (1.0, 1.2), 0.0, 0.1)),
    ]


def scene_seed(base_seed: int, dataset_index: int, split: str, index: int) -> int:
    split_code = {"train": 0, "val": 1}.get(split, 2)
    ss = np.random.SeedSequence([base_seed, dataset_index, split_code, index])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def build_corpus(datasets: Sequence[ToyDataset], seed: int = 0, n_train: int = 500, n_val: int = 100,
                 task: str = "semantic", gen: GeneratorConfig = GeneratorConfig()
                 ) -> Dict[str, Dict[str, List[Sample]]]:
    """Each dataset gets its own scenes; the corpus is a pure function of its arguments."""
    corpus: Dict[str, Dict[str, List[Sample]]] = {}
    for d_idx, ds in enumerate(datasets):
        splits = {}
        for split, n in (("train", n_train), ("val", n_val)):
            splits[split] = [
                project_labels(generate_scene(scene_seed(seed, d_idx, split, i), gen),
                               ds.projection, ds.taxonomy, task)
                for i in range(n)
            ]
        corpus[ds.taxonomy.dataset_id] = splits
    return corpus


# ------------------------------------------------------------------------ on disk


def _to_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def write_dataset(root: Union[str, Path], taxonomy: DatasetTaxonomy,
                  splits: Mapping[str, Sequence[Sample]], task: str = "semantic") -> Path:
    """``<root>/<dataset_id>/{manifest.json, taxonomy.txt, images/, masks/}``."""
    d = Path(root) / taxonomy.dataset_id
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(exist_ok=True)
    (d / "taxonomy.txt").write_text(taxonomy.to_manifest(), encoding="utf-8")
    manifest = {"format_version": DATASET_FORMAT_VERSION, "dataset_id": taxonomy.dataset_id,
                "taxonomy": "taxonomy.txt", "task": task, "splits": {}}
    for split, samples in splits.items():
        records = []
        for i, s in enumerate(samples):
            stem = f"{split}_{i:05d}"
            img = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
            _to_png(img, d / "images" / f"{stem}.png")
            segs = []
            for j, (label, mask, thing) in enumerate(zip(s.labels, s.masks, s.is_thing)):
                name = f"{stem}_{j:02d}.png"
                _to_png(mask.astype(np.uint8) * 255, d / "masks" / name)
                segs.append({"mask": f"masks/{name}", "class": taxonomy.class_names[int(label)],
                             "label": int(label), "is_thing": bool(thing)})
            records.append({"image": f"images/{stem}.png", "segments": segs})
        manifest["splits"][split] = records
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return d


def read_dataset(path: Union[str, Path]) -> Tuple[DatasetTaxonomy, Dict[str, List[Sample]], str]:
    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"{d}: unsupported dataset format {manifest.get('format_version')}")
    tax = DatasetTaxonomy.from_manifest((d / manifest["taxonomy"]).read_text(encoding="utf-8"))
    splits: Dict[str, List[Sample]] = {}
    for split, records in manifest["splits"].items():
        samples = []
        for rec in records:
            img = _from_uint8(np.asarray(Image.open(d / rec["image"]).convert("RGB")))
            h, w = img.shape[:2]
            segs = rec["segments"]
            masks = np.stack([np.asarray(Image.open(d / s["mask"])) > 127 for s in segs]) if segs \
                else np.zeros((0, h, w), bool)
            labels = np.array([tax.index(s["class"]) for s in segs], dtype=np.int64)
            things = np.array([s["is_thing"] for s in segs], dtype=bool)
            samples.append(Sample(np.ascontiguousarray(img.transpose(2, 0, 1)), labels, masks,
                                  tax.dataset_id, things))
        splits[split] = samples
    return tax, splits, manifest.get("task", "semantic")


def registry_of(datasets: Sequence[ToyDataset]) -> TaxonomyRegistry:
    return TaxonomyRegistry(d.taxonomy for d in datasets)
