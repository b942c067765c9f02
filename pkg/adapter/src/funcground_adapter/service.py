"""The adapter service: the funcground wire contracts over real models.

One FastAPI app exposes ``/v1/chat``, ``/v1/segment``, and ``/healthz``.
Per-role locks serialize inference (one request on the accelerator at a
time) while a bounded backlog sheds excess load with 503s. Images larger
than ``max_image_edge`` are downscaled before inference and all returned
coordinates and masks are rescaled to the request's pixel space, so clients
never observe model-side resizing.
"""

from __future__ import annotations

import base64
import io
import re
import threading
from contextlib import contextmanager
from typing import Optional

import numpy as np
from fastapi import Body, FastAPI
from fastapi.responses import JSONResponse
from PIL import Image

from . import rle
from .config import AdapterConfig
from .models import load_chat_model, load_seg_model


class RequestError(ValueError):
    """Maps to a 400 whose message names the offending field."""


class OverloadedError(Exception):
    """Maps to a 503 when the bounded backlog is full."""


def _decode_image(b64_text: str, field: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64_text, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise RequestError(f"{field}: not a decodable base64 PNG ({exc})") from exc


def _downscale(image: np.ndarray, max_edge: int) -> tuple[np.ndarray, float]:
    """Returns the (possibly) resized image and the model-to-request scale."""
    height, width = image.shape[:2]
    longest = max(height, width)
    if longest <= max_edge:
        return image, 1.0
    factor = max_edge / longest
    new_size = (max(1, round(width * factor)), max(1, round(height * factor)))
    resized = Image.fromarray(image).resize(new_size, Image.BILINEAR)
    return np.asarray(resized, dtype=np.uint8), longest / max_edge


_POINT_PAIR = re.compile(r"\((\s*\d+(?:\.\d+)?)\s*,\s*(\d+(?:\.\d+)?)\s*\)")


def _rescale_text_points(text: str, scale: float) -> str:
    """Scale every "(x, y)" pair in model output back to request pixels."""
    if scale == 1.0:
        return text

    def repl(match):
        x = int(round(float(match.group(1)) * scale))
        y = int(round(float(match.group(2)) * scale))
        return f"({x}, {y})"

    return _POINT_PAIR.sub(repl, text)


def _parse_chat_payload(payload: dict, max_edge: int):
    if "messages" not in payload:
        raise RequestError("messages: missing")
    texts: list[str] = []
    images: list[tuple[str, np.ndarray]] = []
    scale = 1.0
    for m, message in enumerate(payload["messages"]):
        content = message.get("content")
        if not isinstance(content, list):
            raise RequestError(f"messages[{m}].content: must be a list")
        for c, item in enumerate(content):
            kind = item.get("type")
            if kind == "text":
                texts.append(str(item.get("text", "")))
            elif kind == "image":
                field = f"messages[{m}].content[{c}].png_base64"
                if "png_base64" not in item:
                    raise RequestError(f"{field}: missing")
                image = _decode_image(item["png_base64"], field)
                image, image_scale = _downscale(image, max_edge)
                if len(images) == 0:
                    scale = image_scale
                images.append((str(item.get("tag", f"<image {c}>:")), image))
            else:
                raise RequestError(f"messages[{m}].content[{c}].type: unknown type {kind!r}")
    return texts, images, scale


def build_app(config: AdapterConfig) -> FastAPI:
    """Load the configured models and assemble the service."""
    chat_model = load_chat_model(config.chat_model, config.device)
    seg_model = load_seg_model(config.segment_model, config.device)

    app = FastAPI(title="funcground-adapter")
    backlog = threading.BoundedSemaphore(config.max_backlog)
    role_locks = {"chat": threading.Lock(), "segment": threading.Lock()}

    @contextmanager
    def admitted(role: str):
        if not backlog.acquire(blocking=False):
            raise OverloadedError()
        try:
            with role_locks[role]:
                yield
        finally:
            backlog.release()

    @app.exception_handler(RequestError)
    async def on_request_error(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(OverloadedError)
    async def on_overloaded(request, exc):
        return JSONResponse(status_code=503, content={"error": "backlog full"})

    @app.get("/healthz")
    def healthz():
        return {
            "chat_model": chat_model.identifier if chat_model else None,
            "segment_model": seg_model.identifier if seg_model else None,
        }

    @app.post("/v1/chat")
    def chat(payload: dict = Body(...)):
        if chat_model is None:
            return JSONResponse(status_code=503, content={"error": "chat role disabled"})
        texts, images, scale = _parse_chat_payload(payload, config.max_image_edge)
        max_tokens = int(payload.get("max_tokens", 256))
        temperature = float(payload.get("temperature", 0.0))
        try:
            with admitted("chat"):
                answer = chat_model.generate(texts, images, max_tokens, temperature)
        except OverloadedError:
            raise
        except Exception as exc:  # noqa: BLE001 - inference failure is a 500
            return JSONResponse(status_code=500, content={"error": f"inference failed: {exc}"})
        return {"text": _rescale_text_points(answer, scale)}

    @app.post("/v1/segment")
    def segment(payload: dict = Body(...)):
        if seg_model is None:
            return JSONResponse(status_code=503, content={"error": "segment role disabled"})
        if "image" not in payload:
            raise RequestError("image: missing")
        image = _decode_image(payload["image"], "image")
        request_height, request_width = image.shape[:2]
        if "points" not in payload or not isinstance(payload["points"], list):
            raise RequestError("points: missing or not a list")
        points = []
        for p, point in enumerate(payload["points"]):
            try:
                points.append((int(point["x"]), int(point["y"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise RequestError(f"points[{p}]: needs integer x and y") from exc
        model_image, scale = _downscale(image, config.max_image_edge)
        model_points = [
            (
                min(model_image.shape[1] - 1, int(round(x / scale))),
                min(model_image.shape[0] - 1, int(round(y / scale))),
            )
            for x, y in points
        ]
        try:
            with admitted("segment"):
                raw = seg_model.predict(model_image, model_points)
        except OverloadedError:
            raise
        except Exception as exc:  # noqa: BLE001 - inference failure is a 500
            return JSONResponse(status_code=500, content={"error": f"inference failed: {exc}"})
        masks = []
        for bitmap, score in raw:
            if bitmap.shape != (request_height, request_width):
                resized = Image.fromarray(bitmap.astype(np.uint8) * 255).resize(
                    (request_width, request_height), Image.NEAREST
                )
                bitmap = np.asarray(resized) > 127
            masks.append(
                {
                    "rle": rle.encode_counts(bitmap),
                    "width": request_width,
                    "height": request_height,
                    "score": float(score),
                }
            )
        return {"masks": masks}

    return app


def serve(config: AdapterConfig) -> None:
    """Run the adapter until interrupted; startup failures raise with a
    diagnostic before the socket opens."""
    import uvicorn

    app = build_app(config)
    uvicorn.run(app, host="0.0.0.0", port=config.port)
