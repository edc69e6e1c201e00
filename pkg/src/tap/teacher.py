"""Deterministic stand-in for the frozen vision-language teacher.

The real system distills from a large pretrained model. Here the teacher is
synthetic but keeps the same interface: a text tower mapping strings to unit
vectors, an image tower mapping masked region crops to unit vectors, and a
concept-distribution readout. Everything is a pure function of the inputs and
a single integer seed, built on SHA-256 in counter mode so the byte stream is
reproducible across platforms and languages (see docs/formats.md).

Crucially, embeddings of templated strings ("a red circle", "a photo of a
red circle.") stay strongly correlated with the bare concept embedding, the
way a real text encoder behaves; without that, source- and target-template
projections would be unrelated and distillation could not transfer.
"""

from __future__ import annotations

import hashlib
import math
import string

import numpy as np

from .datastore.crops import crop_and_mask
from .datastore.shapes import PALETTE as _PALETTE

_COLOR_TOL = 40.0
# bounding-box fill ratios: square 1.0, circle pi/4, triangle 1/2
_SHAPE_RATIOS = {"square": 1.0, "circle": math.pi / 4.0, "triangle": 0.5}
_RATIO_TOL = 0.12

_TEMPLATE_STOPWORDS = {"a", "an", "the", "photo", "picture", "of"}


def _hash_stream(*parts: bytes, count: int) -> np.ndarray:
    """`count` uniforms in (0, 1], from SHA-256 over (parts, block counter)."""
    base = hashlib.sha256()
    for part in parts:
        base.update(part)
        base.update(b"\x1f")
    words: list[int] = []
    block = 0
    while len(words) < count:
        h = base.copy()
        h.update(block.to_bytes(8, "little"))
        digest = h.digest()
        words.extend(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4))
        block += 1
    u32 = np.array(words[:count], dtype=np.float64)
    return (u32 + 1.0) / 4294967296.0


def hash_normal_vector(seed: int, tag: str, payload: bytes, dim: int) -> np.ndarray:
    """Standard-normal vector via Box-Muller over the SHA-256 stream."""
    n_pairs = (dim + 1) // 2
    u = _hash_stream(str(seed).encode(), tag.encode(), payload, count=2 * n_pairs)
    u1, u2 = u[:n_pairs], u[n_pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:dim]


def hash_unit_vector(seed: int, tag: str, payload: bytes, dim: int) -> np.ndarray:
    v = hash_normal_vector(seed, tag, payload, dim)
    return v / np.linalg.norm(v)


def canonical_concept(text: str) -> str:
    """Strip prompt-template furniture, leaving the concept core.

    Lowercases, removes punctuation and drops leading template stopwords,
    so "A photo of a red circle." reduces to "red circle".
    """
    cleaned = text.lower().translate(str.maketrans("", "", string.punctuation))
    words = cleaned.split()
    while len(words) > 1 and words[0] in _TEMPLATE_STOPWORDS:
        words.pop(0)
    return " ".join(words)


class SyntheticTeacher:
    """Frozen deterministic teacher with text and masked-crop towers."""

    def __init__(
        self,
        d_text: int = 64,
        seed: int = 0,
        sigma: float = 0.05,
        template_residual: float = 0.2,
        crop_size: int = 64,
    ):
        if d_text < 2:
            raise ValueError("d_text must be at least 2")
        self.d_text = d_text
        self.seed = seed
        self.sigma = sigma
        self.template_residual = template_residual
        self.crop_size = crop_size

    # -- text tower ---------------------------------------------------------

    def encode_text(self, text: str) -> np.ndarray:
        """Unit vector for a string; templated variants of one concept correlate."""
        if not text:
            raise ValueError("cannot encode an empty string")
        core = canonical_concept(text)
        base = hash_unit_vector(self.seed, "concept", core.encode(), self.d_text)
        residual = hash_unit_vector(self.seed, "surface", text.encode(), self.d_text)
        v = base + self.template_residual * residual
        return (v / np.linalg.norm(v)).astype(np.float64)

    # -- image tower --------------------------------------------------------

    def encode_masked_crop(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Embed a masked region of `image`.

        Regions recognizable as generated colored shapes embed as their
        concept's text vector plus seeded noise (std `sigma` per component),
        renormalized; anything else falls back to a content-hash embedding.
        """
        mask = np.asarray(mask, dtype=bool)
        if image.shape[:2] != mask.shape:
            raise ValueError("image and mask spatial sizes differ")
        if not mask.any():
            raise ValueError("empty mask: degenerate region")
        crop = crop_and_mask(image, mask, self.crop_size)
        crop_bytes = crop.tobytes()
        concept = self._recognize(image, mask)
        if concept is None:
            return hash_unit_vector(self.seed, "crop", crop_bytes, self.d_text)
        e = self.encode_text(concept)
        if self.sigma > 0.0:
            e = e + self.sigma * hash_normal_vector(self.seed, "noise", crop_bytes, self.d_text)
            e = e / np.linalg.norm(e)
        return e

    def _recognize(self, image: np.ndarray, mask: np.ndarray) -> str | None:
        mean_color = image[mask].reshape(-1, image.shape[-1]).mean(axis=0)
        color = None
        for name, rgb in _PALETTE.items():
            if np.linalg.norm(mean_color - np.array(rgb, dtype=np.float64)) < _COLOR_TOL:
                color = name
                break
        if color is None:
            return None
        rows, cols = np.nonzero(mask)
        box_area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
        ratio = mask.sum() / box_area
        for name, target in _SHAPE_RATIOS.items():
            if abs(ratio - target) < _RATIO_TOL:
                return f"{color} {name}"
        return None

    # -- distribution readout -----------------------------------------------

    def target_distribution(self, embedding: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Softmax of embedding against concept weight columns (D, K)."""
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape[0] != weights.shape[0]:
            raise ValueError(
                f"embedding dim {embedding.shape[0]} != weight rows {weights.shape[0]}"
            )
        logits = embedding @ weights
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()
