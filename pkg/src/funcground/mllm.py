"""Prompt construction, response parsing, and chat backends.

Both grounding rounds and mask verification talk to a vision-chat backend
through one request shape: ordered text parts plus tagged images. Frame tags
carry the frame's original index in the video so a returned ``<frame n>``
maps straight back onto the sequence.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import requests

from .errors import (
    BackendError,
    BackendUnavailable,
    EmptyFrameSet,
    EmptyObjectName,
    MissingFrameIndex,
    ParseFailure,
)
from .images import from_png_base64, to_png_base64

ROUND1_TEMPLATE = (
    "Given these frames and the task: [{task}], complete three tasks:\n"
    "1. Identify the functional object needed to accomplish the task.\n"
    "2. Select the key frame that best shows the functional object.\n"
    "3. Identify a single affordance point (x, y) on the functional object.\n"
    "Output format: <affordance> functional object: ...; <frame n>: ...; (x, y) </affordance>"
)

ROUND2_TEMPLATE = (
    "Identify the affordance point on the [{obj}] in order to [{task}]. "
    "Output format: <affordance> (x, y) </affordance>."
)

VERIFY_TEMPLATE = (
    "Does the RED highlighted region show ONLY [{obj}]?\n"
    "Answer YES only if (1) the highlighted region is the {obj} and "
    "(2) it does not include parent or containing objects.\n"
    "Answer with a single token: YES or NO."
)

# Round-1 points may overshoot the image by this fraction and still be clamped.
_OVERSHOOT_FRACTION = 0.05

_AFFORDANCE_BLOCK = re.compile(r"<affordance>(.*?)</affordance>", re.DOTALL | re.IGNORECASE)
_OBJECT_NAME = re.compile(r"functional\s+object\s*:\s*([^;<\n]*)", re.IGNORECASE)
_FRAME_TAG = re.compile(r"<\s*frame\s+(\d+)\s*>", re.IGNORECASE)
_POINT_PAIR = re.compile(r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)")
_WORD = re.compile(r"[A-Za-z]+")


@dataclass(frozen=True, eq=False)
class TaggedImage:
    """An image plus the tag string that precedes it in the request."""

    tag: str
    image: np.ndarray  # (H, W, 3) uint8


@dataclass(frozen=True, eq=False)
class ChatRequest:
    text_parts: tuple[str, ...]
    image_parts: tuple[TaggedImage, ...]
    max_response_tokens: int = 256
    temperature: float = 0.0

    def __post_init__(self):
        if not self.text_parts:
            raise ValueError("a chat request needs at least one text part")


@dataclass(frozen=True)
class AffordanceResponse:
    """Parsed ``<affordance>`` block: object name, frame choice, points."""

    functional_object: str
    frame_index: Optional[int]
    points: tuple[tuple[int, int], ...]
    raw_text: str


@dataclass(frozen=True)
class VerificationVerdict:
    verdict: str  # "YES" or "NO"
    raw_text: str

    @property
    def is_yes(self) -> bool:
        return self.verdict == "YES"


class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff_seconds: tuple[float, ...] = (1.0, 2.0, 4.0)


DEFAULT_RETRY = RetryPolicy()


def run_with_retries(fn, policy: RetryPolicy = DEFAULT_RETRY, sleep=time.sleep):
    """Retry ``fn`` on BackendUnavailable with the policy's backoff."""
    last = None
    for attempt in range(max(1, policy.attempts)):
        try:
            return fn()
        except BackendUnavailable as exc:
            last = exc
            if attempt + 1 < policy.attempts and policy.backoff_seconds:
                pause = policy.backoff_seconds[min(attempt, len(policy.backoff_seconds) - 1)]
                sleep(pause)
    raise last


def frame_tag(index: int) -> str:
    return f"<frame {index}>:"


def build_round1_prompt(
    task_text: str,
    frames: Sequence[tuple[int, np.ndarray]],
    max_response_tokens: int = 256,
    temperature: float = 0.0,
) -> ChatRequest:
    """Survey prompt over many tagged low-resolution frames.

    ``frames`` pairs each image with its original video index; images are
    expected to be pre-resized to the survey resolution.
    """
    if not frames:
        raise EmptyFrameSet("round-1 prompt needs at least one frame")
    images = tuple(TaggedImage(frame_tag(i), img) for i, img in frames)
    text = ROUND1_TEMPLATE.format(task=task_text)
    return ChatRequest((text,), images, max_response_tokens, temperature)


def build_round2_prompt(
    task_text: str,
    object_name: str,
    frame: tuple[int, np.ndarray],
    max_response_tokens: int = 64,
    temperature: float = 0.0,
) -> ChatRequest:
    """Single-frame refinement prompt at native resolution."""
    name = object_name.strip()
    if not name:
        raise EmptyObjectName("round-2 prompt needs a functional-object name")
    index, image = frame
    text = ROUND2_TEMPLATE.format(obj=name, task=task_text)
    return ChatRequest((text,), (TaggedImage(frame_tag(index), image),), max_response_tokens, temperature)


def build_verify_prompt(
    object_name: str,
    overlay: np.ndarray,
    max_response_tokens: int = 8,
    temperature: float = 0.0,
) -> ChatRequest:
    """Ask whether a red overlay shows only the target part."""
    name = object_name.strip()
    if overlay.size == 0:
        raise ValueError("overlay image is empty")
    text = VERIFY_TEMPLATE.format(obj=name)
    return ChatRequest((text,), (TaggedImage("<overlay>:", overlay),), max_response_tokens, temperature)


def format_affordance_block(
    points: Sequence[tuple[int, int]],
    functional_object: Optional[str] = None,
    frame_index: Optional[int] = None,
    frame_note: str = "best view",
) -> str:
    """Render a well-formed response block; the inverse of parse_affordance."""
    parts = []
    if functional_object is not None:
        parts.append(f"functional object: {functional_object};")
    if frame_index is not None:
        parts.append(f"<frame {frame_index}>: {frame_note};")
    parts.extend(f"({x}, {y})" for x, y in points)
    return "<affordance> " + " ".join(parts) + " </affordance>"


def parse_affordance(raw: str, expect_frame: bool, image_dims: tuple[int, int]) -> AffordanceResponse:
    """Parse an ``<affordance>`` block out of arbitrary response text.

    The object name is lowercased and trimmed. Point coordinates are floored
    to integers and clamped into the image when they overshoot a bound by at
    most 5 percent of the corresponding dimension; points further out are
    discarded.
    """
    match = _AFFORDANCE_BLOCK.search(raw)
    if match is None:
        raise ParseFailure("response carries no <affordance> block")
    block = match.group(1)
    name_match = _OBJECT_NAME.search(block)
    name = name_match.group(1).strip().lower() if name_match else ""
    frame_match = _FRAME_TAG.search(block)
    frame_index = int(frame_match.group(1)) if frame_match else None
    if expect_frame and frame_index is None:
        raise MissingFrameIndex("response names no frame index")
    width, height = image_dims
    points = []
    for x_text, y_text in _POINT_PAIR.findall(block):
        x, y = float(x_text), float(y_text)
        if not (-_OVERSHOOT_FRACTION * width <= x <= (1 + _OVERSHOOT_FRACTION) * width):
            continue
        if not (-_OVERSHOOT_FRACTION * height <= y <= (1 + _OVERSHOOT_FRACTION) * height):
            continue
        xi = min(max(math.floor(x), 0), width - 1)
        yi = min(max(math.floor(y), 0), height - 1)
        points.append((xi, yi))
    return AffordanceResponse(name, frame_index, tuple(points), raw)


def parse_verdict(raw: str) -> VerificationVerdict:
    """First standalone YES/NO token wins; anything else fails closed to NO."""
    for word in _WORD.findall(raw):
        upper = word.upper()
        if upper in ("YES", "NO"):
            return VerificationVerdict(upper, raw)
    return VerificationVerdict("NO", raw)


def chat(
    backend: ChatBackend,
    request: ChatRequest,
    retry: RetryPolicy = DEFAULT_RETRY,
    sleep=time.sleep,
) -> str:
    """Run one chat call with retries on transport failure."""
    return run_with_retries(lambda: backend.complete(request), retry, sleep)


# ---------------------------------------------------------------------------
# Wire serialization (POST {endpoint}/v1/chat)


def chat_request_to_wire(request: ChatRequest, model: str) -> dict:
    content: list[dict] = [{"type": "text", "text": t} for t in request.text_parts]
    for part in request.image_parts:
        content.append(
            {"type": "image", "png_base64": to_png_base64(part.image), "tag": part.tag}
        )
    return {
        "model": model,
        "temperature": request.temperature,
        "max_tokens": request.max_response_tokens,
        "messages": [{"role": "user", "content": content}],
    }


def wire_to_chat_request(payload: dict) -> ChatRequest:
    """Rebuild a ChatRequest from wire JSON; raises KeyError/ValueError on
    malformed payloads (servers translate those into 400s)."""
    texts: list[str] = []
    images: list[TaggedImage] = []
    for message in payload["messages"]:
        for pos, item in enumerate(message["content"]):
            if item["type"] == "text":
                texts.append(str(item["text"]))
            elif item["type"] == "image":
                image = from_png_base64(item["png_base64"])
                images.append(TaggedImage(str(item.get("tag", f"<image {pos}>:")), image))
            else:
                raise ValueError(f"unknown content type {item['type']!r}")
    return ChatRequest(
        text_parts=tuple(texts),
        image_parts=tuple(images),
        max_response_tokens=int(payload.get("max_tokens", 256)),
        temperature=float(payload.get("temperature", 0.0)),
    )


class HttpChatBackend:
    """Client for the vision-chat wire contract."""

    def __init__(self, endpoint: str, model: str = "default", timeout_seconds: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout_seconds = timeout_seconds
        self._session = requests.Session()

    def complete(self, request: ChatRequest) -> str:
        payload = chat_request_to_wire(request, self.model)
        try:
            resp = self._session.post(
                f"{self.endpoint}/v1/chat", json=payload, timeout=self.timeout_seconds
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"chat backend unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(resp.status_code, resp.text)
        try:
            return str(resp.json()["text"])
        except (ValueError, KeyError) as exc:
            raise BackendError(resp.status_code, f"malformed chat response: {exc}") from exc
