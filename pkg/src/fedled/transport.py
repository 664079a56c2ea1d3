"""Wire codec and message channels.

Frame layout::

    length   u32 big-endian   payload byte count
    msg_type u8               1..6, see fedled.messages
    payload  type-specific, little-endian

Tensors are ``ndim u8, dims u32 * ndim, values f64``; label arrays are
``len u32, values u32``; classifier parameters are ``layers u32`` followed by
a (weight, bias) tensor pair per layer.
"""

from __future__ import annotations

import collections
import queue
import socket
import struct
import threading

import numpy as np

from fedled.errors import BoundsError, FramingError, ProtocolError, TransportError
from fedled.messages import (
    MESSAGE_TYPES,
    EpochEnd,
    GradToSource,
    GradToTarget,
    Shutdown,
    SourceBatch,
    TargetBatch,
)
from fedled.models import Layer, MlpParams

HEADER = struct.Struct(">IB")
MAX_ELEMENTS = 2**31
DEFAULT_TIMEOUT = 60.0


# --- payload codec -------------------------------------------------------

def _encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def _encode_labels(y: np.ndarray) -> bytes:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= 2**32):
        raise ProtocolError("labels do not fit in u32")
    return struct.pack("<I", y.size) + np.ascontiguousarray(y, dtype="<u4").tobytes()


def _encode_params(p: MlpParams) -> bytes:
    parts = [struct.pack("<I", len(p.layers))]
    for layer in p.layers:
        parts.append(_encode_tensor(layer.weight))
        parts.append(_encode_tensor(layer.bias))
    return b"".join(parts)


def encode_payload(msg) -> bytes:
    if isinstance(msg, SourceBatch):
        return _encode_tensor(msg.features) + _encode_labels(msg.labels)
    if isinstance(msg, TargetBatch):
        return _encode_tensor(msg.features)
    if isinstance(msg, (GradToSource, GradToTarget)):
        return _encode_tensor(msg.grad) + _encode_params(msg.classifier)
    if isinstance(msg, (EpochEnd, Shutdown)):
        return b""
    raise ProtocolError(f"not a protocol message: {type(msg).__name__}")


def encode(msg) -> bytes:
    """Serialize one message into a complete frame."""
    payload = encode_payload(msg)
    return HEADER.pack(len(payload), msg.tag) + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.off = 0

    def take(self, n: int) -> memoryview:
        if self.off + n > len(self.buf):
            raise FramingError("payload ends mid-field")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        if ndim > 2:
            raise ProtocolError(f"tensor with {ndim} dims")
        dims = self.unpack(f"<{ndim}I") if ndim else ()
        count = 1
        for d in dims:
            count *= d
        if count > MAX_ELEMENTS:
            raise BoundsError(f"tensor of {count} elements exceeds 2^31")
        raw = self.take(8 * count)
        arr = np.frombuffer(raw, dtype="<f8", count=count).astype(np.float64).reshape(dims)
        return arr

    def labels(self) -> np.ndarray:
        (n,) = self.unpack("<I")
        if n > MAX_ELEMENTS:
            raise BoundsError(f"label array of {n} elements exceeds 2^31")
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<u4", count=n).astype(np.int64)

    def params(self) -> MlpParams:
        (count,) = self.unpack("<I")
        layers = []
        for i in range(count):
            w = self.tensor()
            b = self.tensor()
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ProtocolError(f"classifier layer {i} has inconsistent shapes")
            layers.append(Layer(w, b, "relu" if i < count - 1 else "none"))
        if not layers:
            raise ProtocolError("classifier with zero layers")
        try:
            return MlpParams(tuple(layers))
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None

    def done(self):
        if self.off != len(self.buf):
            raise FramingError(f"{len(self.buf) - self.off} trailing payload bytes")


def decode_payload(msg_type: int, payload: bytes):
    cls = MESSAGE_TYPES.get(msg_type)
    if cls is None:
        raise ProtocolError(f"unknown message type {msg_type}")
    r = _Reader(payload)
    if cls is SourceBatch:
        msg = SourceBatch(r.tensor(), r.labels())
    elif cls is TargetBatch:
        msg = TargetBatch(r.tensor())
    elif cls in (GradToSource, GradToTarget):
        msg = cls(r.tensor(), r.params())
    else:
        msg = cls()
    r.done()
    return msg


def decode(frame: bytes):
    """Inverse of :func:`encode` for exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise FramingError("truncated frame header")
    length, msg_type = HEADER.unpack_from(frame)
    if msg_type not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    if len(frame) - HEADER.size < length:
        raise FramingError(f"truncated frame: need {length} payload bytes, have {len(frame) - HEADER.size}")
    if len(frame) - HEADER.size > length:
        raise FramingError("bytes after end of frame")
    return decode_payload(msg_type, bytes(frame[HEADER.size :]))


class FrameDecoder:
    """Incremental decoder for a byte stream; yields only complete messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= HEADER.size:
            length, msg_type = HEADER.unpack_from(self._buf)
            if msg_type not in MESSAGE_TYPES:
                raise ProtocolError(f"unknown message type {msg_type}")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            payload = bytes(self._buf[HEADER.size : end])
            del self._buf[:end]
            out.append(decode_payload(msg_type, payload))
        return out

    def close(self) -> None:
        if self._buf:
            n = len(self._buf)
            self._buf.clear()
            raise FramingError(f"stream ended inside a frame ({n} bytes pending)")


# --- channels ------------------------------------------------------------

class Channel:
    """Ordered, reliable, one-directional-per-end message pipe between two parties.

    ``on_wire`` (if set) is called with each frame as it is sent; the
    protocol layer uses it to hash exactly the bytes that travelled.
    """

    def send(self, msg) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None):
        raise NotImplementedError

    def close(self) -> None:
        pass


class InProcChannel(Channel):
    """One end of an in-process duplex pipe.  Messages round-trip through the
    codec, so both transports deliver byte-identical payloads."""

    def __init__(self, inbox: "queue.Queue", outbox: "queue.Queue", timeout: float = DEFAULT_TIMEOUT, blocking=True):
        self._in = inbox
        self._out = outbox
        self.timeout = timeout
        self.blocking = blocking

    @classmethod
    def pair(cls, timeout: float = DEFAULT_TIMEOUT, blocking: bool = True):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, timeout, blocking), cls(b, a, timeout, blocking)

    def send(self, msg) -> None:
        self._out.put(encode(msg))

    def recv(self, timeout: float | None = None):
        try:
            if self.blocking:
                frame = self._in.get(timeout=self.timeout if timeout is None else timeout)
            else:
                frame = self._in.get_nowait()
        except queue.Empty:
            raise TransportError("receive on an empty channel (peer silent)") from None
        return decode(frame)

    def pending(self) -> int:
        return self._in.qsize()


class SocketChannel(Channel):
    """Frames over a connected stream socket."""

    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        self.sock = sock
        self.timeout = timeout
        self._decoder = FrameDecoder()
        self._ready = collections.deque()
        self._lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg) -> None:
        frame = encode(msg)
        with self._lock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = None):
        self.sock.settimeout(self.timeout if timeout is None else timeout)
        while not self._ready:
            try:
                chunk = self.sock.recv(1 << 16)
            except socket.timeout:
                raise TransportError("peer silent past timeout") from None
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                self._decoder.close()
                raise TransportError("peer closed the connection")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.popleft()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


class Listener:
    """An agent's TCP listener; the server dials each agent."""

    def __init__(self, addr: str = "127.0.0.1:0"):
        host, port = parse_addr(addr)
        self.sock = socket.create_server((host, port))
        self.address = "%s:%d" % self.sock.getsockname()[:2]

    def accept(self, timeout: float = DEFAULT_TIMEOUT) -> SocketChannel:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TransportError("no server connected before timeout") from None
        finally:
            self.sock.close()
        return SocketChannel(conn, timeout)


def dial(addr: str, timeout: float = DEFAULT_TIMEOUT, bind: str | None = None) -> SocketChannel:
    src = parse_addr(bind) if bind else None
    try:
        sock = socket.create_connection(parse_addr(addr), timeout=timeout, source_address=src)
    except OSError as exc:
        raise TransportError(f"cannot reach {addr}: {exc}") from exc
    return SocketChannel(sock, timeout)
