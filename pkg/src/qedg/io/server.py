"""HTTP endpoint answering the hard-label ``POST /predict`` protocol."""
from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..nets import Network

log = logging.getLogger(__name__)

MAX_BODY = 64 * 1024 * 1024


class TargetServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, network: Network, address=("127.0.0.1", 0), budget_guard: int | None = None, model_id: str = "target"):
        self.network = network
        self.budget_guard = budget_guard
        self.model_id = model_id
        self.served = 0
        self.sequence = 0
        self.lock = threading.Lock()
        self._thread: threading.Thread | None = None
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def answer(self, instances) -> tuple[int, dict]:
        """Status code and JSON body for one request."""
        with self.lock:
            self.sequence += 1
            seq = self.sequence
        problem = self._validate(instances)
        if problem is not None:
            log.info("request #%d: rejected (%s)", seq, problem)
            return 400, {"error": problem}
        x = np.asarray(instances, dtype=np.float32)
        n = len(x)
        with self.lock:
            if self.budget_guard is not None and self.served + n > self.budget_guard:
                log.info("request #%d: %d instances refused (served %d of %d)", seq, n, self.served, self.budget_guard)
                return 429, {"error": "query budget exhausted", "served": self.served}
            labels = self.network.predict(x)
            self.served += n
            log.info("request #%d: %d instances answered (served %d)", seq, n, self.served)
        return 200, {"labels": [int(v) for v in labels], "model_id": self.model_id}

    def _validate(self, instances) -> str | None:
        dim = self.network.spec.input_dim
        if not isinstance(instances, list) or not instances:
            return "'instances' must be a non-empty list"
        try:
            x = np.asarray(instances, dtype=np.float64)
        except (TypeError, ValueError):
            return "'instances' must be a list of numeric rows"
        if x.ndim != 2 or x.shape[1] != dim:
            return f"each instance must have {dim} values, got shape {list(x.shape)}"
        if not np.isfinite(x).all():
            return "instances contain non-finite values"
        return None

    def start(self) -> "TargetServer":
        self._thread = threading.Thread(target=self.serve_forever, name="qedg-serve", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class _Handler(BaseHTTPRequestHandler):
    server: TargetServer
    protocol_version = "HTTP/1.1"

    def _send(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):  # noqa: N802
        if self.path.rstrip("/") != "/predict":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length <= 0 or length > MAX_BODY:
            self._send(400, {"error": "missing or oversized request body"})
            return
        try:
            doc = json.loads(self.rfile.read(length))
        except json.JSONDecodeError as exc:
            self._send(400, {"error": f"invalid JSON: {exc}"})
            return
        if not isinstance(doc, dict) or "instances" not in doc:
            self._send(400, {"error": "request must be an object with 'instances'"})
            return
        status, body = self.server.answer(doc["instances"])
        self._send(status, body)

    def do_GET(self):  # noqa: N802
        if self.path.rstrip("/") == "/health":
            self._send(200, {"model_id": self.server.model_id, "served": self.server.served})
        else:
            self._send(404, {"error": f"unknown path {self.path}"})

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


def serve_target(network: Network, host: str = "127.0.0.1", port: int = 8765, budget_guard: int | None = None, model_id: str = "target") -> TargetServer:
    """Bind the endpoint; call ``serve_forever()`` or ``start()`` on the result."""
    try:
        return TargetServer(network, (host, port), budget_guard, model_id)
    except OSError as exc:
        raise OSError(f"cannot bind {host}:{port}: {exc}") from exc
