"""Dataset taxonomies: class names, class counts and background slots."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, Union

BACKGROUND_NAME = "background"


class TaxonomyError(ValueError):
    """Invalid class list or registry misuse."""


def normalize_class_name(name: str) -> str:
    """Lowercase and trim; internal whitespace is kept as-is."""
    return name.strip().lower()


@dataclass(frozen=True)
class DatasetTaxonomy:
    dataset_id: str
    class_names: Tuple[str, ...]
    stuff_names: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.dataset_id:
            raise TaxonomyError("dataset_id must be non-empty")
        names = tuple(normalize_class_name(n) for n in self.class_names)
        if not names:
            raise TaxonomyError(f"{self.dataset_id}: class list is empty")
        if any(not n for n in names):
            raise TaxonomyError(f"{self.dataset_id}: empty class name")
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise TaxonomyError(f"{self.dataset_id}: duplicate class names {dup}")
        if BACKGROUND_NAME in names:
            raise TaxonomyError(f"{self.dataset_id}: '{BACKGROUND_NAME}' is reserved")
        stuff = frozenset(normalize_class_name(n) for n in self.stuff_names)
        unknown = stuff - set(names)
        if unknown:
            raise TaxonomyError(f"{self.dataset_id}: unknown stuff classes {sorted(unknown)}")
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "stuff_names", stuff)

    @property
    def num_classes(self) -> int:
        """K, the number of real classes."""
        return len(self.class_names)

    @property
    def background_index(self) -> int:
        return len(self.class_names)

    @property
    def num_categories(self) -> int:
        """K + 1, including the background slot."""
        return len(self.class_names) + 1

    @property
    def category_names(self) -> Tuple[str, ...]:
        """Names fed to the text encoder; background last."""
        return self.class_names + (BACKGROUND_NAME,)

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(normalize_class_name(name))
        except ValueError:
            raise TaxonomyError(f"{self.dataset_id}: unknown class {name!r}") from None

    def is_thing(self, index: int) -> bool:
        return self.class_names[index] not in self.stuff_names

    def to_manifest(self) -> str:
        lines = [f"dataset_id: {self.dataset_id}"]
        if self.stuff_names:
            stuff = [n for n in self.class_names if n in self.stuff_names]
            lines.append("stuff: " + ", ".join(stuff))
        lines.append("---")
        lines.extend(self.class_names)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "DatasetTaxonomy":
        """Parse the taxonomy manifest: ``key: value`` header, ``---``, one class per line."""
        header: Dict[str, str] = {}
        names: List[str] = []
        in_body = False
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not in_body:
                if line == "---":
                    in_body = True
                    continue
                key, sep, value = line.partition(":")
                if not sep:
                    raise TaxonomyError(f"bad manifest header line: {raw!r}")
                header[key.strip()] = value.strip()
            else:
                names.append(line)
        if "dataset_id" not in header:
            raise TaxonomyError("manifest lacks dataset_id")
        stuff = [s for s in header.get("stuff", "").split(",") if s.strip()]
        return cls(header["dataset_id"], tuple(names), frozenset(stuff))


class TaxonomyRegistry:
    """Ordered collection of dataset taxonomies, keyed by dataset id."""

    def __init__(self, taxonomies: Iterable[DatasetTaxonomy] = ()):
        self._datasets: Dict[str, DatasetTaxonomy] = {}
        for tax in taxonomies:
            self.add(tax)

    def add(self, taxonomy: DatasetTaxonomy) -> DatasetTaxonomy:
        if taxonomy.dataset_id in self._datasets:
            raise TaxonomyError(f"dataset {taxonomy.dataset_id!r} already registered")
        self._datasets[taxonomy.dataset_id] = taxonomy
        return taxonomy

    def register_dataset(
        self, dataset_id: str, class_names: Sequence[str], stuff_names: Iterable[str] = ()
    ) -> DatasetTaxonomy:
        return self.add(DatasetTaxonomy(dataset_id, tuple(class_names), frozenset(stuff_names)))

    def __getitem__(self, dataset_id: str) -> DatasetTaxonomy:
        try:
            return self._datasets[dataset_id]
        except KeyError:
            raise TaxonomyError(
                f"unknown dataset {dataset_id!r}; registered: {sorted(self._datasets)}"
            ) from None

    def __contains__(self, dataset_id: str) -> bool:
        return dataset_id in self._datasets

    def __iter__(self) -> Iterator[DatasetTaxonomy]:
        return iter(self._datasets.values())

    def __len__(self) -> int:
        return len(self._datasets)

    @property
    def M(self) -> int:
        return len(self._datasets)

    @property
    def dataset_ids(self) -> List[str]:
        return list(self._datasets)

    def save_manifests(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for tax in self:
            (directory / f"{tax.dataset_id}.txt").write_text(tax.to_manifest(), encoding="utf-8")


def load_taxonomy(path: Union[str, Path]) -> DatasetTaxonomy:
    return DatasetTaxonomy.from_manifest(Path(path).read_text(encoding="utf-8"))


def shared_classes(registry: TaxonomyRegistry) -> Dict[str, List[Tuple[str, int]]]:
    """Class names present in two or more datasets, with every (dataset, index) home."""
    if len(registry) == 0:
        raise TaxonomyError("registry is empty")
    homes: Dict[str, List[Tuple[str, int]]] = {}
    for tax in registry:
        for i, name in enumerate(tax.class_names):
            homes.setdefault(name, []).append((tax.dataset_id, i))
    return {name: h for name, h in homes.items() if len(h) >= 2}
