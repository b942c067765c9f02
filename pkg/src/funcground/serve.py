"""Serve in-process chat and segmentation backends over the wire contracts.

Used by ``funcground synth --serve`` so the pipeline can be exercised against
real HTTP with fully offline oracle backends. Built on the standard library
HTTP server; one thread per request, backends must be concurrency-safe.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .errors import SchemaViolation
from .images import from_png_base64
from .mllm import wire_to_chat_request


class BackendServer:
    """Running HTTP server handle."""

    def __init__(self, server: ThreadingHTTPServer):
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "BackendServer":
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "BackendServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.close()


def _make_handler(chat_backend, seg_backend):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep test output quiet
            pass

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/healthz":
                self._reply(
                    200,
                    {
                        "role": "oracle",
                        "chat": chat_backend is not None,
                        "segment": seg_backend is not None,
                    },
                )
            else:
                self._reply(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length))
            except (ValueError, json.JSONDecodeError):
                self._reply(400, {"error": "body is not valid JSON"})
                return
            try:
                if self.path == "/v1/chat":
                    self._chat(payload)
                elif self.path == "/v1/segment":
                    self._segment(payload)
                else:
                    self._reply(404, {"error": f"unknown path {self.path}"})
            except (KeyError, ValueError, TypeError, SchemaViolation) as exc:
                self._reply(400, {"error": str(exc) or type(exc).__name__})
            except Exception as exc:  # noqa: BLE001 - surface as a 500
                self._reply(500, {"error": f"{type(exc).__name__}: {exc}"})

        def _chat(self, payload: dict) -> None:
            if chat_backend is None:
                self._reply(503, {"error": "no chat backend configured"})
                return
            request = wire_to_chat_request(payload)
            self._reply(200, {"text": chat_backend.complete(request)})

        def _segment(self, payload: dict) -> None:
            if seg_backend is None:
                self._reply(503, {"error": "no segmentation backend configured"})
                return
            image = from_png_base64(payload["image"])
            points = [(int(p["x"]), int(p["y"])) for p in payload["points"]]
            masks = seg_backend.segment(image, points)
            self._reply(
                200,
                {
                    "masks": [
                        {
                            "rle": mask.counts_string(),
                            "width": mask.width,
                            "height": mask.height,
                            "score": score,
                        }
                        for mask, score in masks
                    ]
                },
            )

    return Handler


def serve_backends(
    chat_backend,
    seg_backend,
    host: str = "127.0.0.1",
    port: int = 0,
) -> BackendServer:
    """Create (but do not start) a server; ``port=0`` picks a free port."""
    handler = _make_handler(chat_backend, seg_backend)
    server = ThreadingHTTPServer((host, port), handler)
    return BackendServer(server)
