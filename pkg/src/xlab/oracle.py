"""Black-box query boundary around a victim classifier.

Attacker code only ever sees ``query`` (plus budget counters). The victim's
weights stay private to :class:`Oracle`; :class:`RemoteOracle` talks to an
:class:`OracleServer` over newline-delimited JSON frames on TCP.

Request::

    {"id": 7, "op": "query", "n": 2, "images": "<base64 little-endian float32>"}

Response::

    {"id": 7, "probs": [[...], [...]]}
    {"id": 7, "error": "BUDGET" | "VALIDATION" | "PROTOCOL", "msg": "..."}

A ``{"id": .., "op": "status"}`` frame answers ``{"id", "budget", "used"}``.
"""
from __future__ import annotations

import base64
import json
import logging
import socket
import socketserver
import threading
import time
from typing import Protocol

import numpy as np

from .nn import Sequential
from .nn.functional import softmax_np

log = logging.getLogger(__name__)


class OracleError(Exception):
    code = "ERROR"


class BudgetExhausted(OracleError):
    code = "BUDGET"


class QueryValidationError(OracleError, ValueError):
    code = "VALIDATION"


class ProtocolError(OracleError):
    code = "PROTOCOL"

    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class TransportError(OracleError, ConnectionError):
    code = "TRANSPORT"


class QueryInterface(Protocol):
    """Everything an attacker is allowed to touch."""

    budget: int

    @property
    def used(self) -> int: ...

    def query(self, images: np.ndarray) -> np.ndarray: ...


class Oracle:
    """Soft-label oracle with exact, thread-safe per-image budget accounting."""

    def __init__(self, victim: Sequential, budget: int, keep_log: bool = False):
        if budget < 0:
            raise ValueError(f"budget must be nonnegative, got {budget}")
        self._victim = victim
        self.budget = int(budget)
        self._used = 0
        self._count_lock = threading.Lock()
        self._model_lock = threading.Lock()
        self.input_shape = tuple(victim.input_shape) if victim.input_shape else None
        self.query_log: list[tuple[float, int]] | None = [] if keep_log else None

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        return self.budget - self._used

    def validate(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float32)
        if self.input_shape is not None:
            if x.shape == self.input_shape:
                x = x[None]
            if x.shape[1:] != self.input_shape:
                raise QueryValidationError(f"expected images of shape (n, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        if x.shape[0] == 0:
            raise QueryValidationError("empty query batch")
        if not np.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
            raise QueryValidationError("pixel values must lie in [0, 1]")
        return x

    def query(self, images) -> np.ndarray:
        """Softmax outputs of the victim, one row per image. Consumes one budget unit per image."""
        x = self.validate(images)
        n = x.shape[0]
        with self._count_lock:
            if self._used + n > self.budget:
                raise BudgetExhausted(f"query of {n} image(s) exceeds budget: used {self._used} of {self.budget}")
            self._used += n
            if self.query_log is not None:
                self.query_log.append((time.time(), n))
        with self._model_lock:
            return softmax_np(self._victim.logits(x)).astype(np.float32)


# wire format ---------------------------------------------------------------

def encode_images(images: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(images, dtype="<f4").tobytes()).decode("ascii")


def decode_images(payload: str, n: int, shape: tuple[int, ...] | None) -> np.ndarray:
    raw = base64.b64decode(payload, validate=True)
    if len(raw) % 4:
        raise ValueError(f"image payload of {len(raw)} bytes is not a whole number of float32 values")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if n <= 0 or flat.size % n:
        raise ValueError(f"{flat.size} values cannot be split into n={n} images")
    per = flat.size // n
    if shape is not None:
        if int(np.prod(shape)) != per:
            raise ValueError(f"each image has {per} values, expected {int(np.prod(shape))}")
        return flat.reshape((n, *shape))
    return flat.reshape(n, per)


def encode_probs(probs: np.ndarray) -> list[list[float]]:
    # float32 -> Python float is exact, and JSON repr round-trips doubles exactly
    return np.asarray(probs, dtype=np.float32).astype(np.float64).tolist()


def decode_probs(rows) -> np.ndarray:
    return np.asarray(rows, dtype=np.float64).astype(np.float32)


def handle_frame(oracle: Oracle, line: bytes, lineno: int) -> dict:
    """Answer one request frame; never raises."""
    try:
        req = json.loads(line)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return {"id": None, "error": "PROTOCOL", "msg": f"line {lineno}: malformed JSON ({exc.msg if hasattr(exc, 'msg') else exc})"}
    if not isinstance(req, dict):
        return {"id": None, "error": "PROTOCOL", "msg": f"line {lineno}: frame must be a JSON object"}
    rid = req.get("id")
    op = req.get("op")
    if op == "status":
        return {"id": rid, "budget": oracle.budget, "used": oracle.used}
    if op != "query":
        return {"id": rid, "error": "PROTOCOL", "msg": f"line {lineno}: unknown op {op!r}"}
    try:
        n = req["n"]
        if not isinstance(n, int) or isinstance(n, bool):
            raise ValueError("'n' must be an integer")
        images = decode_images(req["images"], n, oracle.input_shape)
    except (KeyError, TypeError, ValueError) as exc:
        return {"id": rid, "error": "PROTOCOL", "msg": f"line {lineno}: bad query frame ({exc})"}
    try:
        probs = oracle.query(images)
    except OracleError as exc:
        return {"id": rid, "error": exc.code, "msg": str(exc)}
    return {"id": rid, "probs": encode_probs(probs)}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        oracle: Oracle = self.server.oracle
        for lineno, line in enumerate(self.rfile, start=1):
            if not line.strip():
                continue
            reply = handle_frame(oracle, line, lineno)
            self.wfile.write(json.dumps(reply, separators=(",", ":")).encode("utf-8") + b"\n")
            self.wfile.flush()


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class OracleServer:
    def __init__(self, oracle: Oracle, host: str = "127.0.0.1", port: int = 0):
        self._server = _TCPServer((host, port), _Handler)
        self._server.oracle = oracle
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(oracle: Oracle, host: str = "127.0.0.1", port: int = 0) -> OracleServer:
    return OracleServer(oracle, host, port).start()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class RemoteOracle:
    """Client with the same ``query`` contract as :class:`Oracle`."""

    def __init__(self, address, timeout: float | None = 30.0):
        if isinstance(address, str):
            address = parse_address(address)
        try:
            self._sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from exc
        self._rfile = self._sock.makefile("rb")
        self._lock = threading.Lock()
        self._next_id = 0
        self._lines = 0
        self.input_shape = None
        status = self._call({"op": "status"})
        self.budget = int(status["budget"])

    def _call(self, frame: dict) -> dict:
        with self._lock:
            self._next_id += 1
            frame = {"id": self._next_id, **frame}
            try:
                self._sock.sendall(json.dumps(frame, separators=(",", ":")).encode("utf-8") + b"\n")
                line = self._rfile.readline()
            except OSError as exc:
                raise TransportError(f"connection lost: {exc}") from exc
            if not line:
                raise TransportError("connection closed by oracle server")
            self._lines += 1
            try:
                reply = json.loads(line)
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ProtocolError(f"malformed response ({exc})", line=self._lines) from exc
            if not isinstance(reply, dict) or reply.get("id") != frame["id"]:
                raise ProtocolError("response id does not match request", line=self._lines)
        if "error" in reply:
            code = reply["error"]
            msg = reply.get("msg", "")
            if code == "BUDGET":
                raise BudgetExhausted(msg)
            if code == "VALIDATION":
                raise QueryValidationError(msg)
            raise ProtocolError(msg)
        return reply

    @property
    def used(self) -> int:
        return int(self._call({"op": "status"})["used"])

    @property
    def remaining(self) -> int:
        return self.budget - self.used

    def query(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        reply = self._call({"op": "query", "n": int(x.shape[0]), "images": encode_images(x)})
        try:
            return decode_probs(reply["probs"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"bad probs payload ({exc})", line=self._lines) from exc

    def close(self) -> None:
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
