"""Shapes-world: the generated dataset of colored geometric regions.

Every image holds a handful of non-overlapping colored shapes, each with a
ground-truth mask, a concept string "<color> <shape>" and a templated caption
"a <color> <shape> in the <position>". Shapes never overlap or touch the
image border, so a region's color and bounding-box fill ratio identify its
concept exactly; the synthetic teacher relies on this.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .rle import rle_decode, rle_encode

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (50, 80, 220),
    "yellow": (235, 200, 40),
}
SHAPE_NAMES = ("circle", "square", "triangle")
BACKGROUND = (24, 24, 28)
POSITION_NAMES = ("top left", "top right", "bottom left", "bottom right", "center")

ALL_CONCEPTS = tuple(sorted(f"{c} {s}" for c in PALETTE for s in SHAPE_NAMES))


@dataclass
class Region:
    region_id: str
    mask: np.ndarray
    concept: str
    caption: str


@dataclass
class ImageRecord:
    image_id: str
    image: np.ndarray
    regions: list[Region]


@dataclass
class ShapesDataset:
    image_size: int
    concepts: list[str]
    seed: int
    records: list[ImageRecord] = field(default_factory=list)

    def iter_regions(self):
        for rec in self.records:
            for region in rec.regions:
                yield rec, region

    @property
    def num_regions(self) -> int:
        return sum(len(r.regions) for r in self.records)


@dataclass(frozen=True)
class ShapesConfig:
    n_images: int = 100
    image_size: int = 128
    k: int = 12
    seed: int = 0
    max_shapes: int = 6
    min_half: int = 9
    max_half: int = 22
    min_area: int = 64


def _rasterize(shape: str, cy: int, cx: int, half: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    if shape == "square":
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if shape == "triangle":
        # apex at the top, base at the bottom: bbox fill ratio 1/2
        t = (yy - (cy - half)) / (2.0 * half)
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * half)
    raise ValueError(f"unknown shape {shape!r}")


def position_name(mask: np.ndarray) -> str:
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    cy, cx = rows.mean(), cols.mean()
    if abs(cx - (w - 1) / 2) <= w / 6 and abs(cy - (h - 1) / 2) <= h / 6:
        return "center"
    vert = "top" if cy < (h - 1) / 2 else "bottom"
    horiz = "left" if cx < (w - 1) / 2 else "right"
    return f"{vert} {horiz}"


def caption_for(concept: str, mask: np.ndarray) -> str:
    return f"a {concept} in the {position_name(mask)}"


def generate_shapes_dataset(cfg: ShapesConfig) -> ShapesDataset:
    """Deterministically generate the dataset for a config (seed included)."""
    if cfg.k > len(ALL_CONCEPTS):
        raise ValueError(f"k={cfg.k} exceeds available color x shape combinations")
    if cfg.k < 1 or cfg.n_images < 1:
        raise ValueError("need at least one concept and one image")
    if cfg.image_size < 2 * (cfg.min_half + 2):
        raise ValueError("image too small for the minimum shape size")
    concepts = list(ALL_CONCEPTS[: cfg.k])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed))
    max_half = min(cfg.max_half, cfg.image_size // 2 - 2)

    records = []
    for idx in range(cfg.n_images):
        image_id = f"img{idx:05d}"
        image = np.empty((cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
        image[:] = BACKGROUND
        occupied = np.zeros((cfg.image_size, cfg.image_size), dtype=bool)
        regions: list[Region] = []
        n_shapes = int(rng.integers(1, cfg.max_shapes + 1))
        for r_idx in range(n_shapes):
            placed = None
            for _ in range(40):
                concept = concepts[int(rng.integers(len(concepts)))]
                half = int(rng.integers(cfg.min_half, max_half + 1))
                lo, hi = half + 1, cfg.image_size - half - 2
                if hi <= lo:
                    continue
                cy = int(rng.integers(lo, hi + 1))
                cx = int(rng.integers(lo, hi + 1))
                color, shape = concept.split(" ", 1)
                mask = _rasterize(shape, cy, cx, half, cfg.image_size)
                if mask.sum() < cfg.min_area or (mask & occupied).any():
                    continue
                placed = (concept, color, mask)
                break
            if placed is None:
                continue  # image stays valid with the shapes placed so far
            concept, color, mask = placed
            occupied |= mask
            image[mask] = PALETTE[color]
            regions.append(
                Region(
                    region_id=f"{image_id}/r{r_idx}",
                    mask=mask,
                    concept=concept,
                    caption=caption_for(concept, mask),
                )
            )
        if not regions:
            raise RuntimeError(f"could not place any shape in {image_id}")
        records.append(ImageRecord(image_id=image_id, image=image, regions=regions))
    return ShapesDataset(
        image_size=cfg.image_size, concepts=concepts, seed=cfg.seed, records=records
    )


# -- on-disk layout: manifest.json with inline RLE masks + one PNG per image --


def save_dataset(dataset: ShapesDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "image_size": dataset.image_size,
        "seed": dataset.seed,
        "concepts": dataset.concepts,
        "images": [],
    }
    for rec in dataset.records:
        fname = f"images/{rec.image_id}.png"
        Image.fromarray(rec.image).save(out / fname)
        manifest["images"].append(
            {
                "image_id": rec.image_id,
                "file": fname,
                "regions": [
                    {
                        "region_id": region.region_id,
                        "concept": region.concept,
                        "caption": region.caption,
                        "rle": rle_encode(region.mask),
                    }
                    for region in rec.regions
                ],
            }
        )
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return out


def load_dataset(data_dir: str | Path) -> ShapesDataset:
    root = Path(data_dir)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    records = []
    for entry in manifest["images"]:
        image = np.asarray(Image.open(root / entry["file"]).convert("RGB"))
        regions = [
            Region(
                region_id=r["region_id"],
                mask=rle_decode(r["rle"]),
                concept=r["concept"],
                caption=r["caption"],
            )
            for r in entry["regions"]
        ]
        records.append(ImageRecord(entry["image_id"], image, regions))
    return ShapesDataset(
        image_size=manifest["image_size"],
        concepts=list(manifest["concepts"]),
        seed=manifest["seed"],
        records=records,
    )
