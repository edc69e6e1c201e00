"""Prompt sampling: the two-stage training protocol and deterministic
9-point inference sampling.

All coordinates are emitted at pixel centers, normalized by image width and
height: pixel (row, col) of an H x W mask maps to x=(col+0.5)/W,
y=(row+0.5)/H. Rounding of fractional linspace indices is half-away-from-zero
so other implementations can reproduce the exact same points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class PromptLabel(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    BOX_TL = 2
    BOX_BR = 3


_CORNER_LABELS = (PromptLabel.BOX_TL, PromptLabel.BOX_BR)
MAX_POINTS = 9


@dataclass(frozen=True)
class PromptPoint:
    x: float
    y: float
    label: PromptLabel

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"point ({self.x}, {self.y}) outside [0, 1]")


@dataclass(frozen=True)
class PromptSet:
    points: tuple[PromptPoint, ...]
    kind: str  # box | points | sketch

    def __post_init__(self):
        if self.kind not in ("box", "points", "sketch"):
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if not self.points:
            return  # empty set: the convergence sentinel from interactive sampling
        corners = [p for p in self.points if p.label in _CORNER_LABELS]
        loose = [p for p in self.points if p.label not in _CORNER_LABELS]
        if self.kind == "box":
            if (
                len(corners) != 2
                or self.points[0].label is not PromptLabel.BOX_TL
                or self.points[1].label is not PromptLabel.BOX_BR
            ):
                raise ValueError("box prompts start with exactly one TL/BR corner pair")
            tl, br = self.points[0], self.points[1]
            if tl.x > br.x or tl.y > br.y:
                raise ValueError("box corners are not a consistent pair")
        elif corners:
            raise ValueError("corner labels occur only in box prompts")
        elif not loose:
            raise ValueError("point prompts need at least one point")
        if len(loose) > MAX_POINTS:
            raise ValueError(f"at most {MAX_POINTS} non-corner points")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return not self.points

    def extended(self, extra: "PromptSet") -> "PromptSet":
        """Concatenate refinement points onto this prompt, keeping its kind."""
        return PromptSet(points=self.points + extra.points, kind=self.kind)


EMPTY_PROMPTS = PromptSet(points=(), kind="points")


def _pixel_center(row: int, col: int, shape: tuple[int, int]) -> tuple[float, float]:
    h, w = shape
    return (col + 0.5) / w, (row + 0.5) / h


def _points_from_pixels(rows, cols, shape, label) -> tuple[PromptPoint, ...]:
    return tuple(
        PromptPoint(*_pixel_center(int(r), int(c), shape), label) for r, c in zip(rows, cols)
    )


def mask_bounding_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


def box_prompt(mask: np.ndarray) -> PromptSet:
    """The exact GT bounding box as a TL/BR corner pair (no jitter)."""
    r0, c0, r1, c1 = mask_bounding_box(mask)
    tl = PromptPoint(*_pixel_center(r0, c0, mask.shape), PromptLabel.BOX_TL)
    br = PromptPoint(*_pixel_center(r1, c1, mask.shape), PromptLabel.BOX_BR)
    return PromptSet(points=(tl, br), kind="box")


def _sample_from_region(region: np.ndarray, n: int, rng, label) -> tuple[PromptPoint, ...]:
    rows, cols = np.nonzero(region)
    picks = rng.integers(0, rows.size, size=n)
    return _points_from_pixels(rows[picks], cols[picks], region.shape, label)


def sample_stage1(gt_mask: np.ndarray, rng: np.random.Generator) -> PromptSet:
    """Stage 1: the GT box or one positive foreground point, equal odds."""
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not gt_mask.any():
        raise ValueError("empty ground-truth mask")
    if rng.random() < 0.5:
        return box_prompt(gt_mask)
    pts = _sample_from_region(gt_mask, 1, rng, PromptLabel.POSITIVE)
    return PromptSet(points=pts, kind="points")


def sample_interactive(pred_mask: np.ndarray, gt_mask: np.ndarray,
                       rng: np.random.Generator) -> PromptSet:
    """1..8 corrective points from the prediction error region.

    False negatives become positive points, false positives negative points.
    An empty error region yields the empty set, signaling convergence.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("prediction and ground truth shapes differ")
    error = pred_mask ^ gt_mask
    if not error.any():
        return EMPTY_PROMPTS
    n = int(rng.integers(1, 9))
    rows, cols = np.nonzero(error)
    picks = rng.integers(0, rows.size, size=n)
    points = []
    for r, c in zip(rows[picks], cols[picks]):
        label = PromptLabel.POSITIVE if gt_mask[r, c] else PromptLabel.NEGATIVE
        points.append(PromptPoint(*_pixel_center(int(r), int(c), error.shape), label))
    return PromptSet(points=tuple(points), kind="points")


def sample_noninteractive(gt_mask: np.ndarray, rng: np.random.Generator) -> PromptSet:
    """1..9 positive points straight from the GT mask (sketch-like prior)."""
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not gt_mask.any():
        raise ValueError("empty ground-truth mask")
    n = int(rng.integers(1, 10))
    pts = _sample_from_region(gt_mask, n, rng, PromptLabel.POSITIVE)
    return PromptSet(points=pts, kind="sketch")


def sample_stage2(pred_mask: np.ndarray, gt_mask: np.ndarray,
                  rng: np.random.Generator) -> tuple[PromptSet, str]:
    """Stage 2 draw: non-interactive with probability 0.5, else interactive."""
    if rng.random() < 0.5:
        return sample_noninteractive(gt_mask, rng), "noninteractive"
    return sample_interactive(pred_mask, gt_mask, rng), "interactive"


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def linspace_indices(m: int, n: int) -> list[int]:
    """n indices evenly spread over 0..m-1, rounded half-away-from-zero."""
    if m == 1:
        return [0] * n
    return [_round_half_away(i * (m - 1) / (n - 1)) for i in range(n)]


def inference_points(mask_or_sketch: np.ndarray) -> PromptSet:
    """Deterministic 9 positive points over row-major foreground order."""
    fg = np.asarray(mask_or_sketch, dtype=bool)
    rows, cols = np.nonzero(fg)  # np.nonzero enumerates row-major
    if rows.size == 0:
        raise ValueError("empty foreground")
    idx = linspace_indices(rows.size, MAX_POINTS)
    pts = _points_from_pixels(rows[idx], cols[idx], fg.shape, PromptLabel.POSITIVE)
    return PromptSet(points=pts, kind="sketch")
