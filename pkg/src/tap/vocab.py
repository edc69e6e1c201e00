"""Concept vocabulary construction and projection-weight generation.

The vocabulary is the merged, deduplicated label space the semantic token is
distilled against. Weight matrices come in two variants built from asymmetric
prompt templates: "a {}" (source, used to project student embeddings to
logits) and "a photo of a {}." (target, used to project teacher embeddings to
the target distribution).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SOURCE_TEMPLATE = "a {}"
TARGET_TEMPLATE = "a photo of a {}."
WEIGHT_SCALE = 100.0
_WEIGHT_MAGIC = b"TAPWMAT1"
_VARIANTS = ("source", "target")


@dataclass(frozen=True)
class ConceptVocabulary:
    concepts: tuple[str, ...]

    def __post_init__(self):
        if not self.concepts:
            raise ValueError("empty concept vocabulary is unusable")

    def __len__(self) -> int:
        return len(self.concepts)

    def index_of(self, concept: str) -> int:
        return self.concepts.index(concept)


@dataclass(frozen=True)
class ConceptWeightMatrix:
    """Columns of shape (D_text, K), one scaled unit column per concept."""

    columns: np.ndarray
    variant: str

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}")
        if self.columns.ndim != 2:
            raise ValueError("weight matrix must be 2-D (D_text, K)")

    @property
    def d_text(self) -> int:
        return self.columns.shape[0]

    @property
    def k(self) -> int:
        return self.columns.shape[1]


def merge_and_dedup(name_lists: list[list[str]]) -> ConceptVocabulary:
    """Merge name lists into one lowercase, plural-free, sorted vocabulary.

    A plural is removed only when its singular ("x" for "xs" or "xes") is
    itself present; no other stemming is applied. Whitespace inside
    multi-word names is preserved.
    """
    merged = set()
    for names in name_lists:
        for name in names:
            if not name:
                raise ValueError("concept names must be nonempty")
            merged.add(name.lower())
    if not merged:
        raise ValueError("empty concept union is unusable")
    remove = set()
    for singular in merged:
        for plural in (singular + "s", singular + "es"):
            if plural in merged:
                remove.add(plural)
    return ConceptVocabulary(tuple(sorted(merged - remove)))


def build_concept_weights(vocab: ConceptVocabulary, text_encoder, variant: str) -> ConceptWeightMatrix:
    """Encode each templated concept, unit-normalize, scale by 100, stack."""
    if variant not in _VARIANTS:
        raise ValueError(f"variant must be one of {_VARIANTS}")
    template = SOURCE_TEMPLATE if variant == "source" else TARGET_TEMPLATE
    cols = []
    for concept in vocab.concepts:
        e = np.asarray(text_encoder.encode_text(template.format(concept)), dtype=np.float64)
        cols.append(WEIGHT_SCALE * e / np.linalg.norm(e))
    return ConceptWeightMatrix(columns=np.stack(cols, axis=-1), variant=variant)


def dataset_vocab_weights(class_names: list[str], text_encoder) -> ConceptWeightMatrix:
    """Target-template weights over a caller-supplied class list (zero-shot eval)."""
    if not class_names:
        raise ValueError("empty class list")
    vocab = ConceptVocabulary(tuple(class_names))
    return build_concept_weights(vocab, text_encoder, "target")


# -- serialization: one concept per line / binary column-major float32 --


def save_vocabulary(vocab: ConceptVocabulary, path: str | Path) -> None:
    Path(path).write_text("".join(c + "\n" for c in vocab.concepts))


def load_vocabulary(path: str | Path) -> ConceptVocabulary:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln]
    return ConceptVocabulary(tuple(lines))


def save_weights(matrix: ConceptWeightMatrix, path: str | Path) -> None:
    cols = np.ascontiguousarray(matrix.columns.T, dtype=np.float32)  # K rows of D
    with open(path, "wb") as f:
        f.write(_WEIGHT_MAGIC)
        f.write(struct.pack("<IIB", matrix.d_text, matrix.k, _VARIANTS.index(matrix.variant)))
        f.write(cols.tobytes())


def load_weights(path: str | Path) -> ConceptWeightMatrix:
    with open(path, "rb") as f:
        if f.read(8) != _WEIGHT_MAGIC:
            raise ValueError(f"{path}: not a concept weight file")
        d_text, k, variant_code = struct.unpack("<IIB", f.read(9))
        data = np.frombuffer(f.read(4 * d_text * k), dtype=np.float32)
    columns = data.reshape(k, d_text).T.astype(np.float64)
    return ConceptWeightMatrix(columns=columns, variant=_VARIANTS[variant_code])
