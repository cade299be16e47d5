"""Binary message protocol between edges and the cloud.

Every payload starts with the magic "CEMA", a protocol version byte and
a message-type byte. Integers are little-endian; reals are IEEE-754
binary32 little-endian; vectors are a u32 length followed by elements.
Frames on a byte stream are a u32 length prefix followed by the payload,
capped at 16 MiB. Encoding is canonical: equal messages produce equal
bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import ModelSpec, serialize_spec

MAGIC = b"CEMA"
PROTOCOL_VERSION = 1
FRAME_CAP = 16 * 1024 * 1024

TYPE_CLIENT_HELLO = 1
TYPE_SERVER_HELLO = 2
TYPE_SAMPLE_BATCH = 3
TYPE_PARAM_UPDATE = 4
TYPE_ACK = 5


class ProtocolError(Exception):
    """Framing-level violation (oversize frame, torn stream)."""


class EncodeError(ValueError):
    """Message cannot be represented within protocol limits."""


class DecodeError(ValueError):
    """Base class for payload decoding failures."""


class BadMagic(DecodeError):
    pass


class UnknownVersion(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class Truncated(DecodeError):
    """Payload ended before the named field was complete."""

    def __init__(self, fieldname: str):
        super().__init__(f"truncated payload while reading {fieldname}")
        self.fieldname = fieldname


@dataclass(frozen=True)
class ClientHello:
    edge_id: int
    spec_hash: bytes  # 8 bytes


@dataclass(frozen=True)
class ServerHello:
    accepted: bool
    current_version: int


@dataclass(frozen=True)
class SampleBatch:
    seq: int
    samples: tuple  # of (sample_id, features f32 ndarray)

    def __eq__(self, other):
        if not isinstance(other, SampleBatch) or self.seq != other.seq:
            return NotImplemented if not isinstance(other, SampleBatch) else False
        if len(self.samples) != len(other.samples):
            return False
        return all(
            a[0] == b[0] and np.array_equal(a[1], b[1])
            for a, b in zip(self.samples, other.samples)
        )


@dataclass(frozen=True)
class ParamUpdate:
    version: int
    layers: tuple  # of (layer_idx, gamma ndarray, beta ndarray)

    def __eq__(self, other):
        if not isinstance(other, ParamUpdate):
            return False
        if self.version != other.version or len(self.layers) != len(other.layers):
            return False
        return all(
            a[0] == b[0] and np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])
            for a, b in zip(self.layers, other.layers)
        )


@dataclass(frozen=True)
class Ack:
    seq: int


Message = ClientHello | ServerHello | SampleBatch | ParamUpdate | Ack


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def spec_hash(spec: ModelSpec) -> bytes:
    """8-byte configuration fingerprint exchanged at hello time."""
    return struct.pack("<Q", fnv1a64(serialize_spec(spec)))


# ---------------------------------------------------------------------------
# Encoding


def _enc_vec(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 1:
        raise EncodeError("vectors must be one-dimensional")
    return struct.pack("<I", arr.size) + arr.tobytes()


def encode(msg: Message) -> bytes:
    header = MAGIC + bytes([PROTOCOL_VERSION])
    if isinstance(msg, ClientHello):
        if len(msg.spec_hash) != 8:
            raise EncodeError("spec_hash must be 8 bytes")
        body = struct.pack("<I", msg.edge_id) + msg.spec_hash
        out = header + bytes([TYPE_CLIENT_HELLO]) + body
    elif isinstance(msg, ServerHello):
        body = struct.pack("<BQ", 1 if msg.accepted else 0, msg.current_version)
        out = header + bytes([TYPE_SERVER_HELLO]) + body
    elif isinstance(msg, SampleBatch):
        parts = [struct.pack("<QI", msg.seq, len(msg.samples))]
        for sample_id, features in msg.samples:
            parts.append(struct.pack("<Q", sample_id))
            parts.append(_enc_vec(features))
        out = header + bytes([TYPE_SAMPLE_BATCH]) + b"".join(parts)
    elif isinstance(msg, ParamUpdate):
        parts = [struct.pack("<QI", msg.version, len(msg.layers))]
        for layer_idx, gamma, beta in msg.layers:
            parts.append(struct.pack("<H", layer_idx))
            parts.append(_enc_vec(gamma))
            parts.append(_enc_vec(beta))
        out = header + bytes([TYPE_PARAM_UPDATE]) + b"".join(parts)
    elif isinstance(msg, Ack):
        out = header + bytes([TYPE_ACK]) + struct.pack("<Q", msg.seq)
    else:
        raise EncodeError(f"not a protocol message: {type(msg).__name__}")
    if len(out) > FRAME_CAP:
        raise EncodeError(f"payload of {len(out)} bytes exceeds {FRAME_CAP} cap")
    return out


def param_update_size(widths) -> int:
    """Exact encoded ParamUpdate payload size for the given layer widths."""
    return 10 + 8 + sum(2 + 4 + 4 + 8 * w for w in widths)


# ---------------------------------------------------------------------------
# Decoding


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, fieldname: str) -> bytes:
        if self.off + n > len(self.data):
            raise Truncated(fieldname)
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u8(self, fieldname: str) -> int:
        return self.take(1, fieldname)[0]

    def u16(self, fieldname: str) -> int:
        return struct.unpack("<H", self.take(2, fieldname))[0]

    def u32(self, fieldname: str) -> int:
        return struct.unpack("<I", self.take(4, fieldname))[0]

    def u64(self, fieldname: str) -> int:
        return struct.unpack("<Q", self.take(8, fieldname))[0]

    def vec(self, fieldname: str) -> np.ndarray:
        n = self.u32(f"{fieldname}.length")
        raw = self.take(4 * n, f"{fieldname}.elements")
        return np.frombuffer(raw, dtype="<f4").copy()

    def done(self) -> bool:
        return self.off == len(self.data)


def decode(payload: bytes) -> Message:
    r = _Reader(payload)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    version = r.u8("protocol_version")
    if version != PROTOCOL_VERSION:
        raise UnknownVersion(f"unknown protocol version {version}")
    mtype = r.u8("message_type")

    if mtype == TYPE_CLIENT_HELLO:
        edge_id = r.u32("edge_id")
        h = r.take(8, "spec_hash")
        msg: Message = ClientHello(edge_id=edge_id, spec_hash=bytes(h))
    elif mtype == TYPE_SERVER_HELLO:
        accepted = r.u8("accepted") != 0
        msg = ServerHello(accepted=accepted, current_version=r.u64("current_version"))
    elif mtype == TYPE_SAMPLE_BATCH:
        seq = r.u64("seq")
        count = r.u32("sample_count")
        samples = []
        for i in range(count):
            sid = r.u64(f"samples[{i}].id")
            feats = r.vec(f"samples[{i}].features")
            samples.append((sid, feats))
        msg = SampleBatch(seq=seq, samples=tuple(samples))
    elif mtype == TYPE_PARAM_UPDATE:
        version_no = r.u64("version")
        count = r.u32("layer_count")
        layers = []
        for i in range(count):
            idx = r.u16(f"layers[{i}].layer_idx")
            gamma = r.vec(f"layers[{i}].gamma")
            beta = r.vec(f"layers[{i}].beta")
            layers.append((idx, gamma, beta))
        msg = ParamUpdate(version=version_no, layers=tuple(layers))
    elif mtype == TYPE_ACK:
        msg = Ack(seq=r.u64("seq"))
    else:
        raise UnknownType(f"unknown message type {mtype}")

    if not r.done():
        raise DecodeError(f"{len(payload) - r.off} trailing bytes after message")
    return msg


# ---------------------------------------------------------------------------
# Framing over a reliable byte stream


def write_frame(stream, payload: bytes) -> None:
    """Emit a u32 length prefix followed by the payload."""
    if len(payload) > FRAME_CAP:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds {FRAME_CAP} cap")
    stream.sendall(struct.pack("<I", len(payload)) + payload)


def _read_exact(stream, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("stream closed mid-frame")
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_frame(stream) -> bytes | None:
    """Block until one full frame arrives; None on clean end-of-stream."""
    header = _read_exact(stream, 4)
    if header is None:
        return None
    (length,) = struct.unpack("<I", header)
    if length > FRAME_CAP:
        raise ProtocolError(f"frame length {length} exceeds {FRAME_CAP} cap")
    payload = _read_exact(stream, length)
    if payload is None and length > 0:
        raise ProtocolError("stream closed mid-frame")
    return payload if payload is not None else b""


class BufferedFrameReader:
    """Incremental frame extraction that survives read timeouts.

    Partial frames stay buffered between poll() calls, so a transport
    loop can interleave short receive windows with other work without
    tearing frames.
    """

    def __init__(self, stream):
        self.stream = stream
        self._buf = bytearray()
        self.eof = False

    def _extract(self) -> list[bytes]:
        frames = []
        while True:
            if len(self._buf) < 4:
                break
            (length,) = struct.unpack("<I", self._buf[:4])
            if length > FRAME_CAP:
                raise ProtocolError(f"frame length {length} exceeds {FRAME_CAP} cap")
            if len(self._buf) < 4 + length:
                break
            frames.append(bytes(self._buf[4:4 + length]))
            del self._buf[:4 + length]
        return frames

    def poll(self, max_bytes: int = 65536) -> list[bytes]:
        """One receive attempt; returns any frames completed by it."""
        if self.eof:
            return []
        chunk = self.stream.recv(max_bytes)
        if not chunk:
            self.eof = True
            if self._buf:
                raise ProtocolError("stream closed mid-frame")
            return []
        self._buf.extend(chunk)
        return self._extract()
