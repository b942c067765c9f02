"""Point-prompted 2D mask generation, overlay rendering, and verification.

Segmentation backends return run-length masks with confidence scores; masks
below the confidence threshold are dropped here, and when several survive
for one prompt the caller keeps the highest-scoring one. Candidate masks are
rendered as red overlays and judged by the chat backend before lifting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import requests

from . import rle
from .errors import (
    BackendError,
    BackendUnavailable,
    DimensionMismatch,
    EmptyResult,
    PixelOutOfBounds,
)
from .images import to_png_base64
from .mllm import (
    DEFAULT_RETRY,
    ChatBackend,
    RetryPolicy,
    VerificationVerdict,
    build_verify_prompt,
    chat,
    parse_verdict,
    run_with_retries,
)

OVERLAY_COLOR = (255, 0, 0)
DEFAULT_SEG_CONFIDENCE = 0.5
DEFAULT_OVERLAY_ALPHA = 0.5


@dataclass(frozen=True)
class Mask2D:
    """One candidate mask with its provenance."""

    frame_index: int
    rle: rle.RleMask
    score: float
    prompt_point: tuple[int, int]

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class VerifiedMask2D:
    """A mask plus the verdict it received; only YES masks enter lifting."""

    mask: Mask2D
    verdict: VerificationVerdict
    object_name: str


class SegBackend(Protocol):
    def segment(self, image: np.ndarray, points: Sequence[tuple[int, int]]) -> list[tuple[rle.RleMask, float]]: ...


def segment(
    backend: SegBackend,
    image: np.ndarray,
    point: tuple[int, int],
    frame_index: int = -1,
    confidence_threshold: float = DEFAULT_SEG_CONFIDENCE,
    retry: RetryPolicy = DEFAULT_RETRY,
    sleep=time.sleep,
) -> list[Mask2D]:
    """Candidate masks for one point prompt, best score first.

    Masks scoring below the threshold are dropped; an empty survivor list
    raises EmptyResult, which callers treat as "skip this point".
    """
    height, width = image.shape[:2]
    x, y = int(point[0]), int(point[1])
    if not (0 <= x < width and 0 <= y < height):
        raise PixelOutOfBounds(f"prompt point ({x}, {y}) outside {width}x{height}")
    raw = run_with_retries(lambda: backend.segment(image, [(x, y)]), retry, sleep)
    masks = []
    for mask_rle, score in raw:
        if (mask_rle.width, mask_rle.height) != (width, height):
            raise DimensionMismatch(
                f"mask is {mask_rle.width}x{mask_rle.height}, image is {width}x{height}"
            )
        if score < confidence_threshold:
            continue
        masks.append(Mask2D(frame_index, mask_rle, float(score), (x, y)))
    if not masks:
        raise EmptyResult(f"no mask above {confidence_threshold} for point ({x}, {y})")
    masks.sort(key=lambda m: -m.score)
    return masks


def render_overlay(image: np.ndarray, mask, alpha: float = DEFAULT_OVERLAY_ALPHA) -> np.ndarray:
    """Blend the masked region toward red; unmasked pixels are untouched.

    Each masked channel becomes round-half-up((1 - alpha) * pixel +
    alpha * overlay_color).
    """
    mask_rle = mask.rle if isinstance(mask, Mask2D) else mask
    bitmap = rle.decode(mask_rle)
    if bitmap.shape != image.shape[:2]:
        raise DimensionMismatch(
            f"mask is {bitmap.shape[1]}x{bitmap.shape[0]}, image is {image.shape[1]}x{image.shape[0]}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    out = image.copy()
    red = np.asarray(OVERLAY_COLOR, dtype=np.float64)
    blended = np.floor((1.0 - alpha) * image[bitmap].astype(np.float64) + alpha * red + 0.5)
    out[bitmap] = blended.astype(np.uint8)
    return out


def verify_mask(
    chat_backend: ChatBackend,
    image: np.ndarray,
    mask: Mask2D,
    object_name: str,
    alpha: float = DEFAULT_OVERLAY_ALPHA,
    retry: RetryPolicy = DEFAULT_RETRY,
    sleep=time.sleep,
) -> VerifiedMask2D:
    """Render the overlay, ask the verifier, and fail closed on chat errors."""
    overlay = render_overlay(image, mask, alpha)
    request = build_verify_prompt(object_name, overlay)
    try:
        text = chat(chat_backend, request, retry=retry, sleep=sleep)
    except (BackendUnavailable, BackendError) as exc:
        verdict = VerificationVerdict("NO", f"(chat failed: {exc})")
    else:
        verdict = parse_verdict(text)
    return VerifiedMask2D(mask=mask, verdict=verdict, object_name=object_name)


# ---------------------------------------------------------------------------
# Wire client (POST {endpoint}/v1/segment)


class HttpSegBackend:
    """Client for the segmentation wire contract."""

    def __init__(self, endpoint: str, timeout_seconds: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_seconds = timeout_seconds
        self._session = requests.Session()

    def segment(self, image, points):
        payload = {
            "image": to_png_base64(image),
            "points": [{"x": int(x), "y": int(y)} for x, y in points],
        }
        try:
            resp = self._session.post(
                f"{self.endpoint}/v1/segment", json=payload, timeout=self.timeout_seconds
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"segmentation backend unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(resp.status_code, resp.text)
        try:
            body = resp.json()
            return [
                (
                    rle.RleMask.from_counts_string(m["rle"], int(m["width"]), int(m["height"])),
                    float(m["score"]),
                )
                for m in body["masks"]
            ]
        except (ValueError, KeyError) as exc:
            raise BackendError(resp.status_code, f"malformed segment response: {exc}") from exc
