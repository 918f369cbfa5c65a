"""HTTP facade for the curation workflow.

Serves sequence metadata, reconstruction fragments, and pair lists as JSON,
accepts manual pair submissions, and serves the static UI bundle. All state
lives in plain files under the data directory; the only mutation is an
append to manual_pairs.csv, serialized by a lock so concurrent submissions
cannot interleave rows.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import fileio
from .errors import FormatError
from .matchcore import CropId

logger = logging.getLogger(__name__)

_STATIC_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


class CurationApp:
    """File-backed request handlers shared by all server threads."""

    def __init__(self, data_dir: str, static_dir: str | None = None):
        self.data_dir = data_dir
        self.static_dir = static_dir
        self.lock = threading.Lock()

    def _path(self, name: str) -> str:
        return os.path.join(self.data_dir, name)

    def manifest(self):
        with open(self._path("manifest.json")) as fh:
            return json.load(fh)

    def fragments(self):
        path = self._path("fragments.json")
        if not os.path.exists(path):
            return []
        with open(path) as fh:
            return json.load(fh)

    def proposed_pairs(self):
        path = self._path("pairs_proposed.json")
        if not os.path.exists(path):
            return []
        with open(path) as fh:
            return json.load(fh)

    def manual_pairs(self):
        rows = fileio.read_manual_pairs(self._path("manual_pairs.csv"))
        return [
            {"frame_i": i, "frame_j": j, "crop_i": ci.value, "crop_j": cj.value}
            for i, j, ci, cj in rows
        ]

    def submit_manual_pair(self, body: dict) -> tuple[int, dict]:
        """Validate and append one manual pair.

        Returns (status, payload): 200 with the stored row, 400 on invalid
        input, 409 on an exact duplicate.
        """
        try:
            i = int(body["frame_i"])
            j = int(body["frame_j"])
            ci = CropId(str(body.get("crop_i", "ANY")))
            cj = CropId(str(body.get("crop_j", "ANY")))
        except (KeyError, TypeError, ValueError):
            return 400, {"error": "body must be {frame_i, frame_j, crop_i, crop_j}"}
        if i >= j:
            return 400, {"error": f"frame_i must be less than frame_j, got ({i}, {j})"}
        n = len(self.manifest())
        if not (0 <= i < n and 0 <= j < n):
            return 400, {"error": f"frames must be in [0, {n}), got ({i}, {j})"}
        row = {"frame_i": i, "frame_j": j, "crop_i": ci.value, "crop_j": cj.value}
        with self.lock:
            if row in self.manual_pairs():
                return 409, {"error": f"pair ({i}, {j}, {ci.value}, {cj.value}) already exists"}
            fileio.append_manual_pair(self._path("manual_pairs.csv"), (i, j, ci.value, cj.value))
        return 200, row


class _Handler(BaseHTTPRequestHandler):
    app: CurationApp

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload) -> None:
        blob = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self):
        try:
            if self.path == "/api/manifest":
                self._send_json(200, self.app.manifest())
            elif self.path == "/api/fragments":
                self._send_json(200, self.app.fragments())
            elif self.path == "/api/pairs/proposed":
                self._send_json(200, self.app.proposed_pairs())
            elif self.path == "/api/pairs/manual":
                self._send_json(200, self.app.manual_pairs())
            elif self.path.startswith("/api/"):
                self._send_json(404, {"error": f"unknown endpoint {self.path}"})
            else:
                self._send_static()
        except FileNotFoundError as exc:
            self._send_json(404, {"error": f"missing file: {exc.filename}"})
        except (FormatError, json.JSONDecodeError) as exc:
            self._send_json(500, {"error": str(exc)})

    def do_POST(self):
        if self.path != "/api/pairs/manual":
            self._send_json(404, {"error": f"unknown endpoint {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            if not isinstance(body, dict):
                raise ValueError("body must be a JSON object")
        except (ValueError, json.JSONDecodeError):
            self._send_json(400, {"error": "request body must be a JSON object"})
            return
        try:
            status, payload = self.app.submit_manual_pair(body)
        except FileNotFoundError as exc:
            self._send_json(404, {"error": f"missing file: {exc.filename}"})
            return
        self._send_json(status, payload)

    def _send_static(self):
        if self.app.static_dir is None:
            self._send_json(404, {"error": "no static bundle configured"})
            return
        rel = self.path.lstrip("/") or "index.html"
        root = os.path.realpath(self.app.static_dir)
        full = os.path.realpath(os.path.join(root, rel))
        if not (full == root or full.startswith(root + os.sep)) or not os.path.isfile(full):
            self._send_json(404, {"error": f"not found: {self.path}"})
            return
        ctype = _STATIC_TYPES.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as fh:
            blob = fh.read()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)


def create_server(data_dir: str, static_dir: str | None = None,
                  host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    """Build a ready-to-run server; call serve_forever() on the result."""
    app = CurationApp(data_dir, static_dir)
    handler = type("BoundHandler", (_Handler,), {"app": app})
    return ThreadingHTTPServer((host, port), handler)
