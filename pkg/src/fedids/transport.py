"""Serialization of parameter sets and client/server messages, plus two
interchangeable transports (in-memory channels and TCP) that move the
same checksummed frames.

Frame layout (header integers big-endian for readable hex dumps, tensor
data little-endian for host-native speed):

    magic "FSCL" (4) | version (1) | kind (1) | payload length u32 (4)
    | payload | crc32 of payload u32 (4)

Tensor block inside weight-bearing payloads:

    tensor count u16, then per tensor:
    name length u16 | name UTF-8 | rank u8 | dims u32 each | float32 LE data

Weights travel at 32-bit precision even though training runs in 64-bit;
the ~1e-7 relative loss is accepted and halves transfer size.
"""

from __future__ import annotations

import queue
import re
import socket
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FedidsError
from .nn import ParamSet

MAGIC = b"FSCL"
VERSION = 1

KIND_HELLO = 0
KIND_GLOBAL_WEIGHTS = 1
KIND_CLIENT_UPDATE = 2
KIND_ROUND_DONE = 3
KIND_SHUTDOWN = 4

_HEADER = struct.Struct(">4sBBI")
_CRC = struct.Struct(">I")
_NAME_RE = re.compile(r"^[A-Za-z0-9_./-]+$")
_MAX_RANK = 8


class WireError(FedidsError):
    """Base class for framing and decoding failures."""


class BadMagicError(WireError):
    pass


class VersionError(WireError):
    pass


class UnknownKindError(WireError):
    pass


class ChecksumError(WireError):
    pass


class TruncatedFrameError(WireError):
    pass


class FrameFormatError(WireError):
    """Payload bytes do not form a valid message of the claimed kind."""


@dataclass(frozen=True)
class Hello:
    pass


@dataclass
class GlobalWeights:
    round: int
    params: ParamSet


@dataclass
class ClientUpdateMsg:
    round: int
    client_id: int
    n_samples: int
    params: ParamSet


@dataclass(frozen=True)
class RoundDone:
    round: int


@dataclass(frozen=True)
class Shutdown:
    pass


WireMessage = Hello | GlobalWeights | ClientUpdateMsg | RoundDone | Shutdown


def _encode_tensors(params: ParamSet) -> bytes:
    parts = [struct.pack(">H", len(params.schema))]
    for name, view in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack(">H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(">B", view.ndim))
        for dim in view.shape:
            parts.append(struct.pack(">I", dim))
        parts.append(np.ascontiguousarray(view, dtype="<f4").tobytes())
    return b"".join(parts)


def _decode_tensors(payload: bytes, offset: int) -> tuple[ParamSet, int]:
    def need(n: int) -> None:
        if offset + n > len(payload):
            raise FrameFormatError("tensor block truncated")

    need(2)
    (count,) = struct.unpack_from(">H", payload, offset)
    offset += 2
    schema = []
    arrays = []
    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from(">H", payload, offset)
        offset += 2
        need(name_len)
        try:
            name = payload[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FrameFormatError(f"tensor name is not UTF-8: {exc}") from exc
        if not _NAME_RE.match(name):
            raise FrameFormatError(f"tensor name {name!r} has illegal characters")
        offset += name_len
        need(1)
        rank = payload[offset]
        offset += 1
        if rank > _MAX_RANK:
            raise FrameFormatError(f"tensor rank {rank} exceeds limit {_MAX_RANK}")
        dims = []
        for _ in range(rank):
            need(4)
            (dim,) = struct.unpack_from(">I", payload, offset)
            offset += 4
            dims.append(dim)
        size = 1
        for dim in dims:
            size *= dim
        need(4 * size)
        data = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        schema.append((name, tuple(dims)))
        arrays.append(data.astype(np.float64).reshape(dims))
    flat = (np.concatenate([a.ravel() for a in arrays])
            if arrays else np.zeros(0, dtype=np.float64))
    return ParamSet(schema, flat), offset


def encode(msg: WireMessage) -> bytes:
    """Serialize one message to a checksummed frame."""
    if isinstance(msg, Hello):
        kind, payload = KIND_HELLO, b""
    elif isinstance(msg, GlobalWeights):
        kind = KIND_GLOBAL_WEIGHTS
        payload = struct.pack(">I", msg.round) + _encode_tensors(msg.params)
    elif isinstance(msg, ClientUpdateMsg):
        kind = KIND_CLIENT_UPDATE
        payload = struct.pack(">III", msg.round, msg.client_id, msg.n_samples)
        payload += _encode_tensors(msg.params)
    elif isinstance(msg, RoundDone):
        kind, payload = KIND_ROUND_DONE, struct.pack(">I", msg.round)
    elif isinstance(msg, Shutdown):
        kind, payload = KIND_SHUTDOWN, b""
    else:
        raise WireError(f"cannot encode {type(msg).__name__}")
    header = _HEADER.pack(MAGIC, VERSION, kind, len(payload))
    return header + payload + _CRC.pack(zlib.crc32(payload))


def _parse_payload(kind: int, payload: bytes) -> WireMessage:
    if kind == KIND_HELLO:
        if payload:
            raise FrameFormatError(f"hello payload must be empty, got {len(payload)} bytes")
        return Hello()
    if kind == KIND_SHUTDOWN:
        if payload:
            raise FrameFormatError(f"shutdown payload must be empty, got {len(payload)} bytes")
        return Shutdown()
    if kind == KIND_ROUND_DONE:
        if len(payload) != 4:
            raise FrameFormatError(f"round-done payload must be 4 bytes, got {len(payload)}")
        return RoundDone(round=struct.unpack(">I", payload)[0])
    if kind == KIND_GLOBAL_WEIGHTS:
        if len(payload) < 4:
            raise FrameFormatError("global-weights payload shorter than its round field")
        (round_index,) = struct.unpack_from(">I", payload, 0)
        params, end = _decode_tensors(payload, 4)
        if end != len(payload):
            raise FrameFormatError(f"{len(payload) - end} trailing bytes after tensor block")
        return GlobalWeights(round=round_index, params=params)
    if kind == KIND_CLIENT_UPDATE:
        if len(payload) < 12:
            raise FrameFormatError("client-update payload shorter than its fixed fields")
        round_index, client_id, n_samples = struct.unpack_from(">III", payload, 0)
        params, end = _decode_tensors(payload, 12)
        if end != len(payload):
            raise FrameFormatError(f"{len(payload) - end} trailing bytes after tensor block")
        return ClientUpdateMsg(round=round_index, client_id=client_id,
                               n_samples=n_samples, params=params)
    raise UnknownKindError(f"unknown message kind {kind}")


def decode(frame: bytes) -> WireMessage:
    """Decode one complete frame; every corruption mode raises a distinct
    WireError subclass.
    """
    if len(frame) < _HEADER.size + _CRC.size:
        raise TruncatedFrameError(
            f"frame is {len(frame)} bytes, minimum is {_HEADER.size + _CRC.size}")
    magic, version, kind, length = _HEADER.unpack_from(frame, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported frame version {version}")
    if kind not in (KIND_HELLO, KIND_GLOBAL_WEIGHTS, KIND_CLIENT_UPDATE,
                    KIND_ROUND_DONE, KIND_SHUTDOWN):
        raise UnknownKindError(f"unknown message kind {kind}")
    expected = _HEADER.size + length + _CRC.size
    if len(frame) < expected:
        raise TruncatedFrameError(f"frame is {len(frame)} bytes, header claims {expected}")
    if len(frame) > expected:
        raise FrameFormatError(f"{len(frame) - expected} trailing bytes after frame")
    payload = frame[_HEADER.size:_HEADER.size + length]
    (crc,) = _CRC.unpack_from(frame, _HEADER.size + length)
    if crc != zlib.crc32(payload):
        raise ChecksumError("payload crc32 mismatch")
    return _parse_payload(kind, payload)


# --- transports -----------------------------------------------------------

class ChannelClosed:
    """Sentinel placed on a queue when the sending side closes."""


_CLOSED = ChannelClosed()


class ChannelTransport:
    """One endpoint of an in-memory duplex channel. Frames are encoded to
    bytes and back so the wire format is exercised end to end.
    """

    def __init__(self, send_q: queue.Queue, recv_q: queue.Queue):
        self._send_q = send_q
        self._recv_q = recv_q
        self._closed = False

    def send(self, msg: WireMessage) -> None:
        if self._closed:
            raise WireError("send on a closed channel")
        self._send_q.put(encode(msg))

    def recv(self) -> WireMessage | None:
        item = self._recv_q.get()
        if isinstance(item, ChannelClosed):
            self._recv_q.put(item)  # keep signalling on later recv calls
            return None
        return decode(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._send_q.put(_CLOSED)


def channel_pair() -> tuple[ChannelTransport, ChannelTransport]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return ChannelTransport(a_to_b, b_to_a), ChannelTransport(b_to_a, a_to_b)


class TcpTransport:
    """Frame-oriented wrapper over a connected socket. send and recv may
    be used from different threads of the owning endpoint.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()

    def send(self, msg: WireMessage) -> None:
        frame = encode(msg)
        with self._send_lock:
            self._sock.sendall(frame)

    def _read_exact(self, n: int, at_boundary: bool) -> bytes | None:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                if at_boundary and remaining == n:
                    return None  # clean close between frames
                raise TruncatedFrameError(
                    f"peer closed mid-frame with {remaining} bytes outstanding")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> WireMessage | None:
        with self._recv_lock:
            header = self._read_exact(_HEADER.size, at_boundary=True)
            if header is None:
                return None
            magic, version, kind, length = _HEADER.unpack(header)
            if magic != MAGIC:
                raise BadMagicError(f"bad magic {magic!r}")
            if version != VERSION:
                raise VersionError(f"unsupported frame version {version}")
            rest = self._read_exact(length + _CRC.size, at_boundary=False)
        return decode(header + rest)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self) -> TcpTransport:
        conn, _ = self._sock.accept()
        return TcpTransport(conn)

    def close(self) -> None:
        self._sock.close()


def tcp_listen(address: tuple[str, int]) -> TcpListener:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(address)
    sock.listen()
    return TcpListener(sock)


def tcp_connect(address: tuple[str, int], timeout: float | None = 10.0) -> TcpTransport:
    sock = socket.create_connection(address, timeout=timeout)
    sock.settimeout(None)
    return TcpTransport(sock)
