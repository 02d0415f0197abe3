import pytest

from langseg.taxonomy import (DatasetTaxonomy, TaxonomyError, TaxonomyRegistry, load_taxonomy,
                              normalize_class_name, shared_classes)


def test_register_sets_background_after_classes():
    reg = TaxonomyRegistry()
    a = reg.register_dataset("toyA", ["circle", "square"])
    b = reg.register_dataset("toyB", ["small-circle", "large-circle", "square"])
    assert (a.num_classes, a.background_index, a.num_categories) == (2, 2, 3)
    assert (b.num_classes, b.background_index) == (3, 3)
    assert reg.M == 2


def test_duplicate_dataset_rejected():
    reg = TaxonomyRegistry()
    reg.register_dataset("toyA", ["circle"])
    with pytest.raises(TaxonomyError, match="already registered"):
        reg.register_dataset("toyA", ["square"])


@pytest.mark.parametrize("names", [["circle", "circle"], ["Circle", " circle "], [], ["ok", "  "]])
def test_invalid_class_lists(names):
    with pytest.raises(TaxonomyError):
        DatasetTaxonomy("d", tuple(names))


def test_background_name_reserved():
    with pytest.raises(TaxonomyError):
        DatasetTaxonomy("d", ("background", "x"))


def test_normalization_keeps_internal_whitespace():
    assert normalize_class_name("  Traffic  Light ") == "traffic  light"


def test_lookup_round_trip_preserves_order():
    reg = TaxonomyRegistry()
    names = ["sky", "ground", "circle", "box"]
    reg.register_dataset("toyC", names)
    assert list(reg["toyC"].class_names) == names
    assert reg["toyC"].category_names[-1] == "background"


def test_unknown_dataset_lists_registered_ids():
    reg = TaxonomyRegistry([DatasetTaxonomy("toyA", ("a",))])
    with pytest.raises(TaxonomyError, match="toyA"):
        reg["nope"]


def test_shared_classes():
    reg = TaxonomyRegistry()
    reg.register_dataset("toyA", ["circle", "square"])
    reg.register_dataset("toyB", ["square", "triangle"])
    assert shared_classes(reg) == {"square": [("toyA", 1), ("toyB", 0)]}


def test_shared_classes_disjoint_and_triple():
    reg = TaxonomyRegistry()
    reg.register_dataset("a", ["x"])
    reg.register_dataset("b", ["y"])
    assert shared_classes(reg) == {}
    reg.register_dataset("c", ["square"])
    reg.register_dataset("d", ["q", "square"])
    reg.register_dataset("e", ["square"])
    assert shared_classes(reg) == {"square": [("c", 0), ("d", 1), ("e", 0)]}


def test_shared_classes_empty_registry():
    with pytest.raises(TaxonomyError):
        shared_classes(TaxonomyRegistry())


def test_manifest_round_trip(tmp_path):
    tax = DatasetTaxonomy("toyA", ("sky", "ground", "circle"), frozenset({"sky", "ground"}))
    reg = TaxonomyRegistry([tax])
    reg.save_manifests(tmp_path)
    back = load_taxonomy(tmp_path / "toyA.txt")
    assert back == tax
    assert back.is_thing(2) and not back.is_thing(0)


def test_manifest_requires_dataset_id():
    with pytest.raises(TaxonomyError):
        DatasetTaxonomy.from_manifest("---\ncircle\n")
