"""Masked region crops used to feed the teacher's image tower."""

from __future__ import annotations

import numpy as np


def crop_and_mask(image: np.ndarray, mask: np.ndarray, crop_size: int) -> np.ndarray:
    """Extract a square, background-zeroed crop of the masked region.

    The mask's tight bounding box is padded to a square so region content is
    never aspect-distorted, background pixels are zeroed, and the result is
    laid onto a `crop_size` x `crop_size` canvas: regions larger than the
    canvas are downscaled (nearest neighbor), smaller ones are centered
    unscaled so a one-pixel region stays one pixel.
    """
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError("image and mask spatial sizes differ")
    if not mask.any():
        raise ValueError("empty mask: nothing to crop")

    rows, cols = np.nonzero(mask)
    r0, r1 = rows.min(), rows.max() + 1
    c0, c1 = cols.min(), cols.max() + 1
    region = np.where(mask[r0:r1, c0:c1, None], image[r0:r1, c0:c1], 0)

    h, w = region.shape[:2]
    side = max(h, w)
    square = np.zeros((side, side, image.shape[-1]), dtype=image.dtype)
    top, left = (side - h) // 2, (side - w) // 2
    square[top : top + h, left : left + w] = region

    if side <= crop_size:
        canvas = np.zeros((crop_size, crop_size, image.shape[-1]), dtype=image.dtype)
        off = (crop_size - side) // 2
        canvas[off : off + side, off : off + side] = square
        return canvas
    # nearest-neighbor downscale: deterministic and leaves background exactly zero
    src = np.floor((np.arange(crop_size) + 0.5) * side / crop_size).astype(np.int64)
    return square[src][:, src]
