"""Row-major run-length encoding for binary masks.

Counts alternate runs of 0s and 1s over the row-major flattened mask and
always start with the zero run (which may be empty), so the encoding of any
mask is unique. This is the wire format served over HTTP and decoded by the
browser client; both sides must match bit-exactly.
"""

from __future__ import annotations

import numpy as np


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    flat = mask.reshape(-1)
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    boundaries = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(boundaries).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    total = int(sum(counts))
    if total != h * w:
        raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
    values = np.arange(len(counts)) % 2  # runs alternate 0,1,0,1,...
    flat = np.repeat(values.astype(bool), counts)
    return flat.reshape(h, w)
