"""Wire format and transports between the server and its clients.

Frame layout (little-endian)::

    magic    4 bytes   b"FLSM"
    version  1 byte    1
    kind     1 byte    MessageKind
    length   8 bytes   payload byte count (u64)
    payload  length bytes
    checksum 4 bytes   CRC32 of payload

The frame payload of every kind except STOP starts with the message context,
``u16 len + utf-8 task_id`` then ``u64 round_index``, followed by the body.
STOP carries no context, so an empty STOP is exactly 18 bytes.
"""

from __future__ import annotations

import enum
import json
import queue
import socket
import struct
import threading
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import MetricRecord, ParameterSet, UploadEnvelope

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "FRAME_OVERHEAD",
    "MAX_PAYLOAD",
    "MessageKind",
    "Message",
    "FrameError",
    "BadMagicError",
    "VersionMismatchError",
    "ChecksumError",
    "TruncatedFrameError",
    "FrameTooLargeError",
    "UnknownKindError",
    "TransportClosed",
    "encode_frame",
    "decode_frame",
    "encode",
    "decode",
    "pack_body",
    "unpack_body",
    "encode_upload",
    "decode_upload",
    "TrafficMeter",
    "Endpoint",
    "in_process_transport",
    "TcpListener",
    "tcp_listen",
    "tcp_connect",
]

MAGIC = b"FLSM"
VERSION = 1
_HEADER = struct.Struct("<4sBBQ")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size  # 14
FRAME_OVERHEAD = HEADER_SIZE + _CRC.size  # 18
MAX_PAYLOAD = 256 * 1024 * 1024


class MessageKind(enum.IntEnum):
    REGISTER = 1
    PLAN = 2
    UPLOAD = 3
    EVAL_RESULT = 4
    ACTIVATIONS = 5
    ACT_GRADS = 6
    DRIFT_NOTICE = 7
    STOP = 8


class FrameError(ValueError):
    pass


class BadMagicError(FrameError):
    pass


class VersionMismatchError(FrameError):
    pass


class ChecksumError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class FrameTooLargeError(FrameError):
    pass


class UnknownKindError(FrameError):
    pass


class TransportClosed(ConnectionError):
    """The peer went away or the endpoint was closed."""


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    task_id: str = ""
    round_index: int = 0
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        object.__setattr__(self, "payload", bytes(self.payload))
        if self.kind in (MessageKind.REGISTER, MessageKind.STOP) and self.round_index != 0:
            raise ValueError(f"{self.kind.name} must have round_index 0")
        if self.kind is MessageKind.STOP and self.task_id:
            raise ValueError("STOP carries no task id")
        if not 0 <= self.round_index < 2**64:
            raise ValueError("round_index out of range")
        if len(self.task_id.encode("utf-8")) >= 2**16:
            raise ValueError("task_id too long")


# --------------------------------------------------------------------------- #
# framing
# --------------------------------------------------------------------------- #


def encode_frame(kind: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLargeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(MAGIC, VERSION, int(kind), len(payload)) + payload + _CRC.pack(zlib.crc32(payload))


def _check_header(header: bytes) -> tuple[int, int]:
    magic, version, kind, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"frame version {version}, expected {VERSION}")
    if length > MAX_PAYLOAD:
        raise FrameTooLargeError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return kind, length


def decode_frame(data: bytes) -> tuple[int, bytes]:
    """Validate one complete frame; returns (kind byte, payload)."""
    if len(data) < HEADER_SIZE:
        raise TruncatedFrameError(f"{len(data)} bytes is shorter than the frame header")
    kind, length = _check_header(bytes(data[:HEADER_SIZE]))
    end = HEADER_SIZE + length
    if len(data) < end + _CRC.size:
        raise TruncatedFrameError(f"frame needs {end + _CRC.size} bytes, got {len(data)}")
    if len(data) > end + _CRC.size:
        raise FrameError(f"{len(data) - end - _CRC.size} trailing bytes after frame")
    payload = bytes(data[HEADER_SIZE:end])
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(payload):
        raise ChecksumError("payload checksum mismatch")
    return kind, payload


def encode(m: Message) -> bytes:
    if m.kind is MessageKind.STOP:
        return encode_frame(m.kind, m.payload)
    tid = m.task_id.encode("utf-8")
    context = struct.pack("<H", len(tid)) + tid + struct.pack("<Q", m.round_index)
    return encode_frame(m.kind, context + m.payload)


def decode(data: bytes) -> Message:
    kind_byte, payload = decode_frame(data)
    try:
        kind = MessageKind(kind_byte)
    except ValueError:
        raise UnknownKindError(f"unknown message kind {kind_byte}") from None
    if kind is MessageKind.STOP:
        return Message(kind, payload=payload)
    try:
        (tlen,) = struct.unpack_from("<H", payload, 0)
        task_id = payload[2:2 + tlen].decode("utf-8")
        (round_index,) = struct.unpack_from("<Q", payload, 2 + tlen)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FrameError(f"malformed message context: {exc}") from exc
    return Message(kind, task_id, round_index, payload[10 + tlen:])


# --------------------------------------------------------------------------- #
# message bodies: JSON header plus any number of parameter sets
# --------------------------------------------------------------------------- #


def pack_body(header: dict[str, Any], params: Sequence[ParameterSet] = ()) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", len(params))]
    parts.extend(p.to_bytes() for p in params)
    return b"".join(parts)


def unpack_body(body: bytes) -> tuple[dict[str, Any], list[ParameterSet]]:
    try:
        (hlen,) = struct.unpack_from("<I", body, 0)
        header = json.loads(body[4:4 + hlen].decode("utf-8"))
        offset = 4 + hlen
        (count,) = struct.unpack_from("<I", body, offset)
        offset += 4
        params = []
        for _ in range(count):
            p, offset = ParameterSet.from_bytes(body, offset)
            params.append(p)
    except (struct.error, ValueError) as exc:
        raise FrameError(f"malformed message body: {exc}") from exc
    if offset != len(body):
        raise FrameError("trailing bytes in message body")
    return header, params


def tensor_set(name: str, array: np.ndarray) -> ParameterSet:
    return ParameterSet([(name, array.shape, array)])


def encode_upload(task_id: str, env: UploadEnvelope) -> Message:
    header = {
        "client_id": env.client_id,
        "num_samples": env.num_samples,
        "train_loss": env.train_loss,
        "cluster_id": env.cluster_id,
        "metrics": [[r.task_id, r.round_index, r.scope, r.name, r.value, r.wall_time] for r in env.metrics],
    }
    return Message(MessageKind.UPLOAD, task_id, env.round_index, pack_body(header, [env.parameters]))


def decode_upload(m: Message) -> UploadEnvelope:
    if m.kind is not MessageKind.UPLOAD:
        raise FrameError(f"expected UPLOAD, got {m.kind.name}")
    header, params = unpack_body(m.payload)
    return UploadEnvelope(
        client_id=header["client_id"],
        round_index=m.round_index,
        parameters=params[0],
        num_samples=header["num_samples"],
        train_loss=header["train_loss"],
        metrics=tuple(MetricRecord(*r) for r in header["metrics"]),
        cluster_id=header["cluster_id"],
    )


# --------------------------------------------------------------------------- #
# traffic accounting
# --------------------------------------------------------------------------- #


class TrafficMeter:
    """Cumulative frame bytes per (round, direction) and per message kind."""

    def __init__(self):
        self._lock = threading.Lock()
        self._bytes: dict[tuple[int, str], int] = defaultdict(int)
        self._by_kind: dict[tuple[int, str, str], int] = defaultdict(int)
        self._frames: dict[tuple[int, str, str], int] = defaultdict(int)

    def add(self, round_index: int, direction: str, kind: MessageKind, nbytes: int) -> None:
        with self._lock:
            self._bytes[(round_index, direction)] += nbytes
            self._by_kind[(round_index, direction, kind.name)] += nbytes
            self._frames[(round_index, direction, kind.name)] += 1

    def bytes(self, direction: str, round_index: int | None = None, kind: str | None = None) -> int:
        with self._lock:
            if kind is None:
                return sum(v for (r, d), v in self._bytes.items()
                           if d == direction and (round_index is None or r == round_index))
            return sum(v for (r, d, k), v in self._by_kind.items()
                       if d == direction and k == kind and (round_index is None or r == round_index))

    def frames(self, direction: str, kind: str, round_index: int | None = None) -> int:
        with self._lock:
            return sum(v for (r, d, k), v in self._frames.items()
                       if d == direction and k == kind and (round_index is None or r == round_index))

    def snapshot(self) -> dict[tuple[int, str], int]:
        with self._lock:
            return dict(self._bytes)


# --------------------------------------------------------------------------- #
# endpoints
# --------------------------------------------------------------------------- #


class Endpoint:
    """One side of an ordered message channel.  Safe for one sender plus one receiver."""

    def __init__(self, meter: TrafficMeter | None = None):
        self.meter = meter if meter is not None else TrafficMeter()
        self._send_lock = threading.Lock()

    def send(self, m: Message) -> int:
        frame = encode(m)
        with self._send_lock:
            self._send_frame(frame)
        self.meter.add(m.round_index, "sent", m.kind, len(frame))
        return len(frame)

    def recv(self, timeout: float | None = None) -> Message:
        frame = self._recv_frame(timeout)
        m = decode(frame)
        self.meter.add(m.round_index, "received", m.kind, len(frame))
        return m

    def _send_frame(self, frame: bytes) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def _recv_frame(self, timeout: float | None) -> bytes:  # pragma: no cover - abstract
        raise NotImplementedError

    def close(self) -> None:
        pass


_CLOSED = object()


class QueueEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, meter: TrafficMeter | None = None):
        super().__init__(meter)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise TransportClosed("endpoint closed")
        self._outbox.put(frame)

    def _recv_frame(self, timeout: float | None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message before deadline") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportClosed("peer closed")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def in_process_transport(meter_a: TrafficMeter | None = None,
                         meter_b: TrafficMeter | None = None) -> tuple[Endpoint, Endpoint]:
    """Two connected endpoints backed by queues; frames still go through encode/decode."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return QueueEndpoint(b_to_a, a_to_b, meter_a), QueueEndpoint(a_to_b, b_to_a, meter_b)


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, meter: TrafficMeter | None = None):
        super().__init__(meter)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_frame(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self.sock.recv(min(n, 1 << 20))
            except socket.timeout:
                raise TimeoutError("no message before deadline") from None
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("connection closed by peer")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _recv_frame(self, timeout: float | None) -> bytes:
        self.sock.settimeout(timeout)
        header = self._read_exact(HEADER_SIZE)
        _, length = _check_header(header)
        # once a header arrived, the rest of the frame is read without a deadline
        self.sock.settimeout(None)
        return header + self._read_exact(length + _CRC.size)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def _parse_address(address: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


@dataclass
class TcpListener:
    sock: socket.socket
    meter: TrafficMeter = field(default_factory=TrafficMeter)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> SocketEndpoint:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TimeoutError("no client connected before deadline") from None
        conn.settimeout(None)
        return SocketEndpoint(conn, self.meter)

    def close(self) -> None:
        self.sock.close()


def tcp_listen(address: str | tuple[str, int], meter: TrafficMeter | None = None) -> TcpListener:
    host, port = _parse_address(address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen()
    return TcpListener(sock, meter if meter is not None else TrafficMeter())


def tcp_connect(address: str | tuple[str, int], meter: TrafficMeter | None = None,
                timeout: float = 10.0) -> SocketEndpoint:
    sock = socket.create_connection(_parse_address(address), timeout=timeout)
    sock.settimeout(None)
    return SocketEndpoint(sock, meter)
