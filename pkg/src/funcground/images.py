"""Small image helpers shared by the I/O, prompt, and synthesis modules."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def to_png_bytes(image: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 RGB array as PNG."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image)).save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def to_png_base64(image: np.ndarray) -> str:
    return base64.b64encode(to_png_bytes(image)).decode("ascii")


def from_png_base64(text: str) -> np.ndarray:
    return from_png_bytes(base64.b64decode(text, validate=True))


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an RGB array to (width, height) with bilinear filtering."""
    if (image.shape[1], image.shape[0]) == tuple(size):
        return image
    pil = Image.fromarray(np.ascontiguousarray(image))
    return np.asarray(pil.resize(tuple(size), Image.BILINEAR), dtype=np.uint8)
