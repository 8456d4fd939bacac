import struct
import threading
import zlib

import numpy as np
import pytest

from flsim.comms import (
    FRAME_OVERHEAD,
    HEADER_SIZE,
    MAGIC,
    BadMagicError,
    ChecksumError,
    FrameError,
    FrameTooLargeError,
    Message,
    MessageKind,
    TrafficMeter,
    TransportClosed,
    TruncatedFrameError,
    UnknownKindError,
    VersionMismatchError,
    decode,
    decode_frame,
    decode_upload,
    encode,
    encode_frame,
    encode_upload,
    in_process_transport,
    pack_body,
    tcp_connect,
    tcp_listen,
    unpack_body,
)
from flsim.core import MetricRecord, ParameterSet, UploadEnvelope


def random_message(rng):
    kind = MessageKind(int(rng.integers(1, 9)))
    if kind is MessageKind.STOP:
        return Message(kind, payload=rng.bytes(int(rng.integers(0, 40))))
    task = "".join(chr(int(c)) for c in rng.integers(32, 0x2FF, size=int(rng.integers(0, 12))))
    rnd = 0 if kind is MessageKind.REGISTER else int(rng.integers(0, 2**63))
    return Message(kind, task, rnd, rng.bytes(int(rng.integers(0, 200))))


# ----------------------------------------------------------------- frames


def test_empty_stop_is_18_bytes():
    frame = encode(Message(MessageKind.STOP))
    assert len(frame) == 18 == FRAME_OVERHEAD
    assert frame[:4] == MAGIC
    assert decode(frame) == Message(MessageKind.STOP)


def test_length_field_counts_payload():
    frame = encode_frame(MessageKind.STOP, b"abcde")
    (length,) = struct.unpack_from("<Q", frame, 6)
    assert length == 5
    assert len(frame) == HEADER_SIZE + 5 + 4
    assert struct.unpack_from("<I", frame, HEADER_SIZE + 5)[0] == zlib.crc32(b"abcde")


def test_context_prefix_layout():
    m = Message(MessageKind.PLAN, "ab", 7, b"xyz")
    frame = encode(m)
    payload = frame[HEADER_SIZE:-4]
    assert payload == b"\x02\x00ab" + struct.pack("<Q", 7) + b"xyz"


def test_random_messages_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        m = random_message(rng)
        frame = encode(m)
        assert decode(frame) == m
        assert encode(decode(frame)) == frame


def test_every_single_bit_flip_in_payload_or_checksum_is_rejected():
    frame = encode(Message(MessageKind.PLAN, "t", 3, bytes(range(33))))
    for pos in range(HEADER_SIZE, len(frame)):
        for bit in range(8):
            bad = bytearray(frame)
            bad[pos] ^= 1 << bit
            with pytest.raises(ChecksumError):
                decode(bytes(bad))


def test_error_classes_are_distinct():
    good = encode(Message(MessageKind.PLAN, "t", 1, b"data"))
    with pytest.raises(BadMagicError):
        decode(b"XXXX" + good[4:])
    with pytest.raises(VersionMismatchError):
        decode(good[:4] + b"\x02" + good[5:])
    with pytest.raises(TruncatedFrameError):
        decode(good[:-1])
    with pytest.raises(TruncatedFrameError):
        decode(good[:10])
    with pytest.raises(UnknownKindError):
        decode(encode_frame(99, b""))
    with pytest.raises(FrameError):
        decode(good + b"\x00")
    with pytest.raises(FrameTooLargeError):
        decode(struct.pack("<4sBBQ", MAGIC, 1, 2, 2**40) + b"\x00" * 4)
    errors = {BadMagicError, VersionMismatchError, ChecksumError, TruncatedFrameError, UnknownKindError}
    assert all(issubclass(e, FrameError) for e in errors)
    assert len(errors) == 5


def test_message_invariants():
    with pytest.raises(ValueError):
        Message(MessageKind.REGISTER, "t", 1)
    with pytest.raises(ValueError):
        Message(MessageKind.STOP, "t", 0)


# ----------------------------------------------------------------- bodies


def test_body_with_parameter_sets_is_bit_exact():
    rng = np.random.default_rng(1)
    p = ParameterSet.from_arrays({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=2)})
    q = ParameterSet.from_arrays({"z": np.array([np.float32(1e-40), -0.0, 3.4e38])})
    body = pack_body({"k": [1, 2], "s": "x"}, [p, q])
    header, params = unpack_body(body)
    assert header == {"k": [1, 2], "s": "x"}
    assert params[0].to_bytes() == p.to_bytes()
    assert params[1].to_bytes() == q.to_bytes()
    with pytest.raises(FrameError):
        unpack_body(body + b"!")


def test_upload_round_trip():
    p = ParameterSet.from_arrays({"w": np.arange(4.0)})
    env = UploadEnvelope(3, 9, p, 12, 0.25, (MetricRecord("t", 9, "client:3", "train_loss", 0.25),), cluster_id=1)
    back = decode_upload(decode(encode(encode_upload("t", env))))
    assert back == env


# ----------------------------------------------------------------- meters and endpoints


def test_meter_counts_frame_bytes():
    meter = TrafficMeter()
    assert meter.bytes("sent") == 0
    a, b = in_process_transport(meter, TrafficMeter())
    payload = b"p" * 100
    a.send(Message(MessageKind.PLAN, "task", 2, payload))
    got = b.recv(timeout=1)
    assert got.payload == payload
    context = 2 + len("task") + 8
    assert meter.bytes("sent", 2) == len(payload) + context + FRAME_OVERHEAD
    assert meter.bytes("sent", 2, "PLAN") == meter.bytes("sent")
    assert b.meter.bytes("received", 2) == meter.bytes("sent", 2)
    assert meter.frames("sent", "PLAN") == 1


def test_in_process_ordering_timeout_and_close():
    a, b = in_process_transport()
    for i in range(50):
        a.send(Message(MessageKind.PLAN, "t", i + 1, bytes([i])))
    assert [b.recv(1).round_index for _ in range(50)] == list(range(1, 51))
    with pytest.raises(TimeoutError):
        b.recv(timeout=0.01)
    a.close()
    with pytest.raises(TransportClosed):
        b.recv(timeout=1)


def test_tcp_loopback_round_trip():
    listener = tcp_listen("127.0.0.1:0")
    host, port = listener.address
    received = []

    def server():
        ep = listener.accept(timeout=5)
        for _ in range(3):
            received.append(ep.recv(timeout=5))
        ep.send(Message(MessageKind.STOP))
        ep.close()

    t = threading.Thread(target=server)
    t.start()
    client = tcp_connect(f"{host}:{port}")
    big = bytes(np.random.default_rng(2).integers(0, 256, 3_000_000, dtype=np.uint8))
    msgs = [Message(MessageKind.REGISTER, "t", 0, b"hi"), Message(MessageKind.UPLOAD, "t", 1, big),
            Message(MessageKind.EVAL_RESULT, "t", 1, b"")]
    for m in msgs:
        client.send(m)
    assert client.recv(timeout=5).kind is MessageKind.STOP
    t.join(5)
    assert received == msgs
    assert listener.meter.bytes("received") == client.meter.bytes("sent")
    with pytest.raises(TransportClosed):
        client.recv(timeout=5)
    client.close()
    listener.close()


def test_tcp_connect_refused():
    listener = tcp_listen("127.0.0.1:0")
    addr = listener.address
    listener.close()
    with pytest.raises(OSError):
        tcp_connect(addr, timeout=1)
