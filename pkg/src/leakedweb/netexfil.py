"""Framed trace upload between a collecting client and a classifying server.

Wire format, big-endian::

    b"LWEB" | version (1 byte) | msg_type (1 byte) | payload_len (u32) | payload

Payloads are UTF-8 JSON (a heartbeat may carry none). A whole trace travels
in one frame; anything larger than the payload cap is refused, never split.
"""
from __future__ import annotations

import hashlib
import json
import os
import socket
import socketserver
import struct
import tempfile
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

from .core import (
    LeakedWebError,
    Provenance,
    Trace,
    TraceFormatError,
    TraceInvariantError,
    read_trace_csv,
    trace_csv_bytes,
)
from .learners import PredictionResult, TrainedModel, predict

MAGIC = b"LWEB"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024

TRACE_UPLOAD = 1
PREDICTION = 2
ERROR = 3
HEARTBEAT = 4
MSG_TYPES = (TRACE_UPLOAD, PREDICTION, ERROR, HEARTBEAT)

PREDICTIONS_LOG = "predictions.jsonl"
UPLOAD_LABEL = "unknown"


class ProtocolError(LeakedWebError):
    pass


class PayloadTooLarge(ProtocolError):
    pass


class DeliveryError(LeakedWebError):
    def __init__(self, message: str, spooled: Path | None = None):
        super().__init__(message)
        self.spooled = spooled


class ServerError(LeakedWebError):
    """The server answered with an Error frame; the message is its text."""


class ServerStartupError(LeakedWebError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes = b""

    def json(self):
        return json.loads(self.payload.decode("utf-8")) if self.payload else None


def encode_frame(msg_type: int, payload: bytes = b"", max_payload: int = MAX_PAYLOAD) -> bytes:
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    if len(payload) > max_payload:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds cap {max_payload}")
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def encode_json(msg_type: int, obj, max_payload: int = MAX_PAYLOAD) -> bytes:
    return encode_frame(msg_type, json.dumps(obj, sort_keys=True).encode("utf-8"), max_payload)


def parse_header(header: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[int, int]:
    """Validate a 10-byte header; returns (msg_type, payload_len)."""
    magic, version, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    if length > max_payload:
        raise PayloadTooLarge(f"declared payload of {length} bytes exceeds cap {max_payload}")
    return msg_type, length


def decode_prefix(buf: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[Frame, int] | None:
    """First frame in ``buf`` and the bytes it used, or None if incomplete."""
    if len(buf) < HEADER_SIZE:
        # reject garbage early even on a partial header
        if not MAGIC.startswith(bytes(buf[:4])):
            raise ProtocolError(f"bad magic {bytes(buf[:4])!r}")
        return None
    msg_type, length = parse_header(bytes(buf[:HEADER_SIZE]), max_payload)
    end = HEADER_SIZE + length
    if len(buf) < end:
        return None
    return Frame(msg_type, bytes(buf[HEADER_SIZE:end])), end


def decode_frame(data: bytes, max_payload: int = MAX_PAYLOAD) -> Frame | None:
    """Decode exactly one frame. None means more bytes are needed."""
    got = decode_prefix(data, max_payload)
    if got is None:
        return None
    frame, used = got
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after frame")
    return frame


class FrameDecoder:
    """Incremental decoder for a byte stream."""

    def __init__(self, max_payload: int = MAX_PAYLOAD):
        self.max_payload = max_payload
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while True:
            got = decode_prefix(self._buf, self.max_payload)
            if got is None:
                return frames
            frame, used = got
            del self._buf[:used]
            frames.append(frame)

    @property
    def pending(self) -> int:
        return len(self._buf)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            break
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO, max_payload: int = MAX_PAYLOAD) -> Frame | None:
    """Blocking read of one frame; None on a clean end of stream."""
    header = _read_exact(stream, HEADER_SIZE)
    if not header:
        return None
    if len(header) < HEADER_SIZE:
        raise ProtocolError("stream ended inside a frame header")
    msg_type, length = parse_header(header, max_payload)
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise ProtocolError("stream ended inside a frame payload")
    return Frame(msg_type, payload)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


# ------------------------------------------------------------------- client


def upload_payload(trace: Trace, client_id: str) -> dict:
    return {
        "client_id": client_id,
        "meta": {
            "sampling_rate_hz": trace.sampling_rate_hz,
            "events": list(trace.events),
            "source": trace.source,
            "collected_at": trace.collected_at,
        },
        "csv": trace_csv_bytes(trace).decode("utf-8"),
    }


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 5
    base_delay_s: float = 1.0
    factor: float = 2.0

    def delays(self):
        """Sleep before each attempt after the first."""
        return [self.base_delay_s * self.factor**i for i in range(self.attempts - 1)]


def _exchange(address, frame: bytes, timeout: float, max_payload: int) -> Frame:
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(frame)
        with sock.makefile("rb") as stream:
            reply = read_frame(stream, max_payload)
    if reply is None:
        raise ConnectionError("server closed the connection without replying")
    return reply


def _spool(spool_dir: str | os.PathLike, endpoint: str, body: bytes) -> Path:
    spool = Path(spool_dir)
    spool.mkdir(parents=True, exist_ok=True)
    name = f"{time.time_ns()}-{hashlib.sha256(body).hexdigest()[:12]}.json"
    record = json.dumps({"endpoint": endpoint, "payload": json.loads(body)}, sort_keys=True)
    return _atomic_write(spool / name, record.encode("utf-8"))


def send_payload(
    endpoint: str,
    body: bytes,
    policy: RetryPolicy = RetryPolicy(),
    spool_dir: str | os.PathLike | None = None,
    timeout: float = 30.0,
    max_payload: int = MAX_PAYLOAD,
    sleep: Callable[[float], None] = time.sleep,
) -> PredictionResult:
    frame = encode_frame(TRACE_UPLOAD, body, max_payload)
    address = parse_endpoint(endpoint)
    delays = policy.delays()
    last: Exception | None = None
    for attempt in range(policy.attempts):
        if attempt:
            sleep(delays[attempt - 1])
        try:
            reply = _exchange(address, frame, timeout, max_payload)
        except OSError as exc:
            last = exc
            continue
        if reply.msg_type == ERROR:
            raise ServerError(reply.json().get("error", ""))
        if reply.msg_type != PREDICTION:
            raise ProtocolError(f"expected a prediction, got message type {reply.msg_type}")
        d = reply.json()
        return PredictionResult(d["label"], {k: float(v) for k, v in d["scores"].items()})
    spooled = _spool(spool_dir, endpoint, body) if spool_dir is not None else None
    where = f"; spooled to {spooled}" if spooled else ""
    raise DeliveryError(f"{policy.attempts} attempts to {endpoint} failed ({last}){where}", spooled)


def client_send_trace(
    endpoint: str,
    trace: Trace,
    client_id: str = "client",
    policy: RetryPolicy = RetryPolicy(),
    spool_dir: str | os.PathLike | None = None,
    timeout: float = 30.0,
    max_payload: int = MAX_PAYLOAD,
    sleep: Callable[[float], None] = time.sleep,
) -> PredictionResult:
    """Upload one trace and block for the server's prediction."""
    body = json.dumps(upload_payload(trace, client_id), sort_keys=True).encode("utf-8")
    if len(body) > max_payload:
        raise PayloadTooLarge(f"trace payload of {len(body)} bytes exceeds cap {max_payload}")
    return send_payload(endpoint, body, policy, spool_dir, timeout, max_payload, sleep)


def flush_spool(endpoint: str, spool_dir: str | os.PathLike, **kwargs) -> list[PredictionResult]:
    """Resend spooled uploads oldest first; each is deleted once answered."""
    results = []
    for path in sorted(Path(spool_dir).glob("*.json")):
        record = json.loads(path.read_bytes())
        body = json.dumps(record["payload"], sort_keys=True).encode("utf-8")
        results.append(send_payload(endpoint, body, spool_dir=None, **kwargs))
        path.unlink()
    return results


# ------------------------------------------------------------------- server


def _atomic_write(path: Path, data: bytes) -> Path:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def _client_dir(client_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in client_id).strip(".")
    return safe or "_"


class TraceStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._log_lock = threading.Lock()
        self._seq = 0
        self._seq_lock = threading.Lock()

    def persist(self, client_id: str, csv: bytes) -> Path:
        directory = self.root / _client_dir(client_id)
        directory.mkdir(parents=True, exist_ok=True)
        with self._seq_lock:
            self._seq += 1
            seq = self._seq
        return _atomic_write(directory / f"{time.time_ns()}-{seq:06d}.csv", csv)

    def log(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._log_lock, open(self.root / PREDICTIONS_LOG, "a", encoding="utf-8") as f:
            f.write(line)


class _Handler(socketserver.StreamRequestHandler):
    server: TraceServer

    def handle(self):
        srv = self.server
        while True:
            try:
                frame = read_frame(self.rfile, srv.max_payload)
            except ProtocolError:
                return  # drop this connection only
            if frame is None:
                return
            reply = srv.respond(frame)
            if reply is None:
                return
            self.wfile.write(reply)
            self.wfile.flush()


class TraceServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, model: TrainedModel, store: TraceStore,
                 max_payload: int = MAX_PAYLOAD):
        self.model = model
        self.store = store
        self.max_payload = max_payload
        super().__init__(address, _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def _error(self, message: str) -> bytes:
        return encode_json(ERROR, {"error": message})

    def respond(self, frame: Frame) -> bytes | None:
        if frame.msg_type == HEARTBEAT:
            return encode_frame(HEARTBEAT)
        if frame.msg_type != TRACE_UPLOAD:
            return self._error(f"unexpected message type {frame.msg_type}")
        try:
            d = frame.json()
            client_id = str(d["client_id"])
            meta = d.get("meta") or {}
            csv = d["csv"].encode("utf-8")
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            return self._error(f"malformed upload: {exc}")
        try:
            trace = read_trace_csv(
                csv, UPLOAD_LABEL,
                Provenance(float(meta.get("sampling_rate_hz", 1.0)),
                           float(meta.get("collected_at", 0.0)), "replay"),
            )
        except (TraceInvariantError, TraceFormatError) as exc:
            return self._error(f"invariant violation: {exc}")
        try:
            result = predict(self.model, trace)
        except LeakedWebError as exc:
            return self._error(f"prediction failed: {exc}")
        try:
            path = self.store.persist(client_id, csv)
            self.store.log({
                "timestamp": time.time(),
                "client": client_id,
                "label": result.label,
                "scores": result.scores,
                "path": str(path.relative_to(self.store.root)),
            })
        except OSError as exc:
            return self._error(f"store failure: {exc}")
        return encode_json(PREDICTION, {"label": result.label, "scores": result.scores,
                                        "stored": str(path.relative_to(self.store.root))})


def serve(bind: str, model_path: str | os.PathLike, store_root: str | os.PathLike,
          max_payload: int = MAX_PAYLOAD) -> TraceServer:
    """Load the model, prepare the store and bind. Call ``serve_forever`` to run."""
    try:
        model = TrainedModel.load(model_path)
    except (OSError, LeakedWebError) as exc:
        raise ServerStartupError(f"cannot load model {model_path}: {exc}") from exc
    root = Path(store_root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ServerStartupError(f"store {root} is not writable: {exc}") from exc
    try:
        return TraceServer(parse_endpoint(bind), model, TraceStore(root), max_payload)
    except OSError as exc:
        raise ServerStartupError(f"cannot bind {bind}: {exc}") from exc


def start_background(server: TraceServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, name="trace-server", daemon=True)
    thread.start()
    return thread
