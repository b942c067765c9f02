"""Run-length encoding for the segmentation wire contract.

Counts are alternating zero/one run lengths over the column-major flattening
of the bitmap, starting with the zero run; the wire form joins them with
single spaces. Kept dependency-free of the client package on purpose: the
string format is the interoperability contract, so the adapter encodes with
its own implementation and interop is tested against the client's decoder.
"""

from __future__ import annotations

import numpy as np


def encode_counts(bitmap: np.ndarray) -> str:
    """Bitmap (height, width) to the counts string."""
    flat = np.asarray(bitmap, dtype=bool).T.ravel()  # column-major order
    counts: list[int] = []
    expected = False  # runs alternate starting with zeros
    position = 0
    while position < flat.size:
        run = 0
        while position < flat.size and flat[position] == expected:
            run += 1
            position += 1
        counts.append(run)
        expected = not expected
    if not counts:
        counts = [0]
    return " ".join(str(c) for c in counts)


def decode_counts(text: str, width: int, height: int) -> np.ndarray:
    counts = [int(tok) for tok in text.split()]
    if sum(counts) != width * height:
        raise ValueError("counts do not cover the pixel grid")
    flat = np.zeros(width * height, dtype=bool)
    position = 0
    value = False
    for run in counts:
        if value:
            flat[position:position + run] = True
        position += run
        value = not value
    return flat.reshape((width, height)).T
