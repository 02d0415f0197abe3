"""Class-name text embeddings: learnable prompt, frozen encoder, linear adapter."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .taxonomy import DatasetTaxonomy, TaxonomyError, normalize_class_name

CACHE_FORMAT_VERSION = 1


class EmbeddingCacheError(IOError):
    pass


class PromptContext(nn.Module):
    """L learnable context vectors ``[v]_1 ... [v]_L`` shared by every dataset."""

    def __init__(self, length: int = 8, token_dim: int = 64, init_std: float = 0.02):
        super().__init__()
        self.vectors = nn.Parameter(torch.randn(length, token_dim) * init_std)

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


class FrozenTextEncoder(nn.Module):
    """Interface: ``forward(prompt_vectors, names) -> (len(names), out_dim)``.

    Subclasses keep their weights out of the optimizer; only the prompt
    vectors passed in may carry gradients.
    """

    token_dim: int
    out_dim: int

    def forward(self, prompt_vectors: Tensor, names: Sequence[str]) -> Tensor:
        raise NotImplementedError

    def freeze(self) -> "FrozenTextEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # frozen encoders never switch to training behaviour
        return super().train(False)


def _name_seed(name: str, salt: int) -> int:
    digest = hashlib.sha256(f"{salt}:{normalize_class_name(name)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SyntheticTextEncoder(FrozenTextEncoder):
    """Deterministic stand-in for a pretrained text tower.

    Each canonical name hashes to a fixed token vector. The sequence
    ``[v_1..v_L, name]`` runs through a tanh recurrence with fixed random
    weights, so the prompt vectors influence (and receive gradient from)
    every embedding. Output rows are L2-normalized.
    """

    def __init__(self, token_dim: int = 64, out_dim: int = 64, seed: int = 1234,
                 recurrent_gain: float = 0.5):
        super().__init__()
        self.token_dim = token_dim
        self.out_dim = out_dim
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        w_h = torch.randn(out_dim, out_dim, generator=g)
        w_h = w_h / torch.linalg.matrix_norm(w_h, ord=2) * recurrent_gain
        w_x = torch.randn(out_dim, token_dim, generator=g) / token_dim ** 0.5
        w_name = torch.randn(out_dim, token_dim, generator=g) / token_dim ** 0.5
        self.register_buffer("w_h", w_h)
        self.register_buffer("w_x", w_x)
        self.register_buffer("w_name", w_name)
        self._token_cache: Dict[str, Tensor] = {}

    def name_token(self, name: str) -> Tensor:
        key = normalize_class_name(name)
        if not key:
            raise TaxonomyError("empty class name")
        tok = self._token_cache.get(key)
        if tok is None:
            rng = np.random.default_rng(_name_seed(key, self.seed))
            v = rng.standard_normal(self.token_dim)
            tok = torch.from_numpy(v / np.linalg.norm(v))
            self._token_cache[key] = tok
        return tok

    def forward(self, prompt_vectors: Tensor, names: Sequence[str]) -> Tensor:
        dtype = prompt_vectors.dtype
        tokens = torch.stack([self.name_token(n) for n in names]).to(dtype)  # (n, D)
        w_h, w_x, w_name = (w.to(dtype) for w in (self.w_h, self.w_x, self.w_name))
        h = prompt_vectors.new_zeros(self.out_dim)
        for v in prompt_vectors:
            h = torch.tanh(w_h @ h + w_x @ v)
        # the prompt state is shared; the name token is the final step
        out = torch.tanh(h @ w_h.T + tokens @ w_x.T) + tokens @ w_name.T
        return F.normalize(out, dim=-1)


class ExternalTextEncoder(FrozenTextEncoder):
    """Wraps a caller-supplied pretrained text model.

    ``fn(prompt_vectors, names)`` must return ``(len(names), out_dim)``; any
    ``nn.Module`` referenced by ``module`` is frozen and kept in eval mode.
    """

    def __init__(self, fn: Callable[[Tensor, Sequence[str]], Tensor], token_dim: int,
                 out_dim: int, module: Optional[nn.Module] = None, normalize: bool = True):
        super().__init__()
        self.fn = fn
        self.token_dim = token_dim
        self.out_dim = out_dim
        self.module = module
        self.normalize = normalize
        self.freeze()

    def forward(self, prompt_vectors: Tensor, names: Sequence[str]) -> Tensor:
        out = self.fn(prompt_vectors, list(names))
        if out.shape != (len(names), self.out_dim):
            raise ValueError(f"external encoder returned {tuple(out.shape)}")
        return F.normalize(out, dim=-1) if self.normalize else out


class Adapter(nn.Linear):
    """Single affine map from the text width C_t to the query width C."""


class TextEmbeddingTable:
    """Post-adapter embeddings of one dataset's K+1 categories."""

    def __init__(self, dataset_id: str, embeddings: Tensor):
        if embeddings.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        self.dataset_id = dataset_id
        self.embeddings = embeddings

    @property
    def num_categories(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __repr__(self) -> str:
        return f"TextEmbeddingTable({self.dataset_id!r}, shape={tuple(self.embeddings.shape)})"


def encode_classes(taxonomy: DatasetTaxonomy, prompt: PromptContext, encoder: FrozenTextEncoder,
                   adapter: Adapter) -> TextEmbeddingTable:
    names = taxonomy.category_names
    if any(not normalize_class_name(n) for n in names):
        raise TaxonomyError(f"{taxonomy.dataset_id}: empty class name")
    raw = encoder(prompt.vectors, names)
    emb = adapter(raw.to(adapter.weight.dtype))
    if not torch.isfinite(emb).all():
        raise FloatingPointError(f"non-finite text embeddings for {taxonomy.dataset_id}")
    return TextEmbeddingTable(taxonomy.dataset_id, emb)


def export_embeddings(tables: Mapping[str, TextEmbeddingTable] | Sequence[TextEmbeddingTable],
                      path: Union[str, Path]) -> Path:
    """Write float32 tables plus a (version, C, count) header as an ``.npz`` archive."""
    if isinstance(tables, Mapping):
        tables = list(tables.values())
    if not tables:
        raise EmbeddingCacheError("no tables to export")
    dims = {t.dim for t in tables}
    if len(dims) != 1:
        raise EmbeddingCacheError(f"tables disagree on dimension: {sorted(dims)}")
    arrays = {f"table/{t.dataset_id}": t.embeddings.detach().cpu().to(torch.float32).numpy()
              for t in tables}
    header = np.array([CACHE_FORMAT_VERSION, dims.pop(), len(tables)], dtype=np.int64)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, header=header, **arrays)
    except OSError as exc:
        raise EmbeddingCacheError(f"cannot write embedding cache {path}: {exc}") from exc
    return path


def load_embeddings(path: Union[str, Path], expected_dim: Optional[int] = None
                    ) -> Dict[str, TextEmbeddingTable]:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            header = data["header"]
            tables = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("table/")}
    except (OSError, KeyError, ValueError) as exc:
        raise EmbeddingCacheError(f"cannot read embedding cache {path}: {exc}") from exc
    version, dim, count = (int(x) for x in header)
    if version != CACHE_FORMAT_VERSION:
        raise EmbeddingCacheError(f"unsupported cache version {version}")
    if count != len(tables):
        raise EmbeddingCacheError(f"header lists {count} tables, file holds {len(tables)}")
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"embedding dimension mismatch: cache has C={dim}, model expects {expected_dim}")
    return {k: TextEmbeddingTable(k, torch.from_numpy(v.copy())) for k, v in tables.items()}
