"""Run-length encoding of binary masks.

Masks travel over the wire as COCO-style uncompressed counts: alternating run
lengths of zeros and ones over the column-major (Fortran-order) flattening of
the bitmap. The first count is always the leading zero run, which may be 0.
The string form is the counts joined by single spaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RleMask:
    """Run-length encoded binary mask over a width x height pixel grid."""

    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("mask dimensions must be positive")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")
        total = sum(self.counts)
        if total != self.width * self.height:
            raise ValueError(f"counts sum to {total}, expected {self.width * self.height}")

    @property
    def area(self) -> int:
        """Number of set pixels."""
        return sum(self.counts[1::2])

    def counts_string(self) -> str:
        return " ".join(str(c) for c in self.counts)

    @classmethod
    def from_counts_string(cls, text: str, width: int, height: int) -> "RleMask":
        counts = tuple(int(tok) for tok in text.split())
        return cls(width=width, height=height, counts=counts)


def encode(bitmap: np.ndarray) -> RleMask:
    """Encode a (height, width) boolean array."""
    arr = np.asarray(bitmap, dtype=bool)
    if arr.ndim != 2:
        raise ValueError("bitmap must be 2-dimensional")
    height, width = arr.shape
    flat = arr.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(starts).tolist()
    if flat[0]:
        counts = [0] + counts
    return RleMask(width=width, height=height, counts=tuple(int(c) for c in counts))


def decode(mask: RleMask) -> np.ndarray:
    """Decode to a (height, width) boolean array."""
    values = np.zeros(len(mask.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, np.asarray(mask.counts, dtype=np.int64))
    return flat.reshape((mask.height, mask.width), order="F")


def from_pixels(width: int, height: int, xs, ys) -> RleMask:
    """Build a mask from pixel coordinates; (x, y) = (column, row)."""
    bitmap = np.zeros((height, width), dtype=bool)
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.size:
        if xs.min() < 0 or xs.max() >= width or ys.min() < 0 or ys.max() >= height:
            raise ValueError("pixel coordinates outside the mask grid")
        bitmap[ys, xs] = True
    return encode(bitmap)


def pixel_coords(mask: RleMask) -> tuple[np.ndarray, np.ndarray]:
    """Set pixels as (xs, ys) arrays ordered row-major."""
    ys, xs = np.nonzero(decode(mask))
    return xs, ys
