import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tap.teacher import SyntheticTeacher
from tap.vocab import (
    ConceptVocabulary,
    build_concept_weights,
    dataset_vocab_weights,
    load_vocabulary,
    load_weights,
    merge_and_dedup,
    save_vocabulary,
    save_weights,
)


def naive_merge(name_lists):
    """Line-by-line transcription of the published pseudocode, kept dumb on purpose."""
    concepts = []
    for lst in name_lists:
        concepts = concepts + list(lst)
    concepts = set([name.lower() for name in concepts])
    remove = set()
    for singular in concepts:
        for plural in [singular + "s", singular + "es"]:
            if plural in concepts:
                remove.add(plural)
    concepts = sorted(list(concepts.difference(remove)))
    return concepts


def random_name_lists(rng, n_lists=4):
    stems = ["dog", "cat", "bus", "box", "tree", "glass", "dish", "car", "fox", "house"]
    lists = []
    for _ in range(n_lists):
        names = []
        for _ in range(rng.integers(1, 12)):
            stem = stems[rng.integers(len(stems))]
            suffix = ["", "s", "es"][rng.integers(3)]
            name = stem + suffix
            if rng.random() < 0.3:
                name = name.capitalize()
            if rng.random() < 0.1:
                name = name.upper()
            names.append(name)
        if names:
            lists.append(names)
    return lists or [["dog"]]


def test_forced_examples():
    assert merge_and_dedup([["Dog", "dogs", "cat"]]).concepts == ("cat", "dog")
    assert merge_and_dedup([["bus", "buses", "box", "boxes"]]).concepts == ("box", "bus")


def test_oracle_equivalence_randomized():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        lists = random_name_lists(rng)
        assert list(merge_and_dedup(lists).concepts) == naive_merge(lists)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.text(alphabet="abcdes ", min_size=1, max_size=6).map(str.strip).filter(bool), min_size=1, max_size=8), min_size=1, max_size=4))
def test_idempotent_and_permutation_invariant(lists):
    vocab = merge_and_dedup(lists)
    assert merge_and_dedup([list(vocab.concepts)]).concepts == vocab.concepts
    shuffled = [list(reversed(l)) for l in reversed(lists)]
    assert merge_and_dedup(shuffled).concepts == vocab.concepts


def test_errors():
    with pytest.raises(ValueError):
        merge_and_dedup([[]])
    with pytest.raises(ValueError):
        merge_and_dedup([["ok", ""]])
    with pytest.raises(ValueError):
        ConceptVocabulary(())
    with pytest.raises(ValueError):
        dataset_vocab_weights([], SyntheticTeacher())


def test_multiword_whitespace_preserved():
    vocab = merge_and_dedup([["Red  Circle", "blue square"]])
    assert vocab.concepts == ("blue square", "red  circle")


@pytest.fixture(scope="module")
def teacher():
    return SyntheticTeacher(d_text=64, seed=0)


def test_weight_column_norms(teacher):
    vocab = merge_and_dedup([["dog", "cat", "red circle", "blue square", "tree"]])
    for variant in ("source", "target"):
        m = build_concept_weights(vocab, teacher, variant)
        norms = np.linalg.norm(m.columns, axis=0)
        assert np.all(np.abs(norms - 100.0) <= 1e-3 * 100.0)
        assert m.k == len(vocab)


def test_weight_columns_are_scaled_unit_encodings(teacher):
    vocab = merge_and_dedup([["dog", "cat"]])
    m = build_concept_weights(vocab, teacher, "source")
    for j, concept in enumerate(vocab.concepts):
        e = teacher.encode_text(f"a {concept}")
        np.testing.assert_allclose(m.columns[:, j], 100.0 * e / np.linalg.norm(e), rtol=1e-12)


def test_weight_shape_contract(teacher):
    vocab = ConceptVocabulary(tuple(f"item{i}" for i in range(12)))
    m = build_concept_weights(vocab, teacher, "target")
    assert m.columns.shape == (64, 12)


def test_repeat_calls_identical(teacher):
    vocab = merge_and_dedup([["wolf", "bear"]])
    a = build_concept_weights(vocab, teacher, "target")
    b = build_concept_weights(vocab, teacher, "target")
    assert np.array_equal(a.columns, b.columns)


def test_dataset_vocab_weights(teacher):
    from tap.datastore import ALL_CONCEPTS

    m = dataset_vocab_weights(list(ALL_CONCEPTS), teacher)
    assert m.columns.shape == (64, 12)
    assert m.variant == "target"
    single = dataset_vocab_weights(["lonely"], teacher)
    logits = np.random.default_rng(0).normal(size=64) @ single.columns
    assert int(np.argmax(logits)) == 0  # one class: always that class


def test_serialization_roundtrip(tmp_path, teacher):
    vocab = merge_and_dedup([["dog", "cat", "bus"]])
    save_vocabulary(vocab, tmp_path / "vocab.txt")
    assert load_vocabulary(tmp_path / "vocab.txt").concepts == vocab.concepts
    m = build_concept_weights(vocab, teacher, "source")
    save_weights(m, tmp_path / "w.bin")
    loaded = load_weights(tmp_path / "w.bin")
    assert loaded.variant == "source"
    np.testing.assert_allclose(loaded.columns, m.columns, atol=1e-5)
