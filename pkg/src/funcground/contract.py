"""Canonical wire-contract fixtures for the chat and segmentation endpoints.

Any server claiming the contracts must pass ``run_conformance``. The checks
only need a ``post`` callable mapping (path, json payload) to (status code,
decoded body), so live HTTP servers and in-process test clients are checked
with the same fixtures.
"""

from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

from . import rle
from .images import to_png_base64

PostFn = Callable[[str, dict], Tuple[int, dict]]


def _fixture_image() -> np.ndarray:
    """Deterministic 32x24 RGB test card with a bright center block."""
    height, width = 24, 32
    image = np.zeros((height, width, 3), dtype=np.uint8)
    image[:, :, 0] = np.linspace(0, 200, width, dtype=np.uint8)[None, :]
    image[:, :, 1] = np.linspace(0, 200, height, dtype=np.uint8)[:, None]
    image[:, :, 2] = 90
    image[8:16, 12:20] = (240, 220, 80)
    return image


def canonical_chat_payload() -> dict:
    image = _fixture_image()
    return {
        "model": "default",
        "temperature": 0.0,
        "max_tokens": 64,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": "Describe the bright region in one word."},
                    {"type": "image", "png_base64": to_png_base64(image), "tag": "<frame 0>:"},
                ],
            }
        ],
    }


def canonical_segment_payload() -> dict:
    image = _fixture_image()
    return {
        "image": to_png_base64(image),
        "points": [{"x": 16, "y": 12}],
    }


def check_chat_response(body: dict) -> None:
    assert isinstance(body, dict), f"chat response must be a JSON object, got {type(body)}"
    assert "text" in body, f"chat response lacks 'text': {sorted(body)}"
    assert isinstance(body["text"], str), "chat 'text' must be a string"


def check_segment_response(body: dict) -> None:
    assert isinstance(body, dict), f"segment response must be a JSON object, got {type(body)}"
    assert "masks" in body, f"segment response lacks 'masks': {sorted(body)}"
    assert isinstance(body["masks"], list), "'masks' must be a list"
    for pos, mask in enumerate(body["masks"]):
        for key in ("rle", "width", "height", "score"):
            assert key in mask, f"masks[{pos}] lacks '{key}'"
        decoded = rle.RleMask.from_counts_string(
            mask["rle"], int(mask["width"]), int(mask["height"])
        )
        bitmap = rle.decode(decoded)
        assert bitmap.shape == (int(mask["height"]), int(mask["width"]))
        assert rle.encode(bitmap) == decoded, f"masks[{pos}] does not round-trip"
        assert 0.0 <= float(mask["score"]) <= 1.0, f"masks[{pos}] score outside [0, 1]"


def run_conformance(post: PostFn, check_chat: bool = True, check_segment: bool = True) -> None:
    """Post both canonical fixtures and validate the response shapes."""
    if check_chat:
        status, body = post("/v1/chat", canonical_chat_payload())
        assert status == 200, f"/v1/chat returned {status}: {body}"
        check_chat_response(body)
    if check_segment:
        status, body = post("/v1/segment", canonical_segment_payload())
        assert status == 200, f"/v1/segment returned {status}: {body}"
        check_segment_response(body)
