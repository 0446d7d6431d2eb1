"""Binary plugin protocol: length-prefixed messages over a byte stream.

Framing (all integers little-endian):

    u32 payload_length   length of everything after the type byte
    u8  msg_type
    payload

Message payloads:

    0x01 HELLO          u8 protocol_version (=1), u8 role (1 detector, 2 classifier)
    0x02 DETECT_REQ     frame
    0x03 DETECT_RESP    u8 box_count, then per box u16 x0, y0, x1, y1
    0x04 CLASSIFY_REQ   u8 frame_count, then frames
    0x05 CLASSIFY_RESP  u16 class_count (=27), then class_count f32 scores
    0x06 ERROR          u16 code, utf-8 message (rest of payload)

    frame = u16 width, u16 height, u8 channels (=3), row-major RGB bytes

Handshake: the plugin (client) sends HELLO with its role; the harness
answers HELLO with the same version and role to accept, or ERROR.  After
that the harness sends requests and the plugin answers, one response per
request.  Error codes: 1 unsupported version, 2 bad request contents,
3 handler failure.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .pipeline import BBox, N_MODEL_CLASSES, validate_scores
from .models import PluginFailure
from .render import Frame

PROTOCOL_VERSION = 1

MSG_HELLO = 0x01
MSG_DETECT_REQ = 0x02
MSG_DETECT_RESP = 0x03
MSG_CLASSIFY_REQ = 0x04
MSG_CLASSIFY_RESP = 0x05
MSG_ERROR = 0x06

ROLE_DETECTOR = 1
ROLE_CLASSIFIER = 2

ERR_VERSION = 1
ERR_BAD_REQUEST = 2
ERR_HANDLER = 3

_MAX_PAYLOAD = 64 * 1024 * 1024


class DecodeError(ValueError):
    """Malformed wire bytes; offset is relative to the message start."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"decode error at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


@dataclass(frozen=True)
class WireFrame:
    width: int
    height: int
    pixels: bytes
    channels: int = 3

    def __post_init__(self):
        if not 1 <= self.width <= 0xFFFF or not 1 <= self.height <= 0xFFFF:
            raise ValueError("frame dimensions must fit in u16 and be >= 1")
        if self.channels != 3:
            raise ValueError("wire frames are RGB")
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ValueError("pixel payload does not match dimensions")

    @staticmethod
    def from_frame(frame: Frame) -> "WireFrame":
        return WireFrame(frame.width_px, frame.height_px, frame.pixels)

    @staticmethod
    def from_array(arr: np.ndarray) -> "WireFrame":
        h, w = arr.shape[:2]
        return WireFrame(w, h, np.ascontiguousarray(arr, dtype=np.uint8).tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, self.channels
        )


@dataclass(frozen=True)
class Hello:
    version: int
    role: int


@dataclass(frozen=True)
class DetectReq:
    frame: WireFrame


@dataclass(frozen=True)
class DetectResp:
    boxes: tuple[tuple[int, int, int, int], ...]


@dataclass(frozen=True)
class ClassifyReq:
    frames: tuple[WireFrame, ...]


@dataclass(frozen=True)
class ClassifyResp:
    scores: tuple[float, ...]  # float32 values

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=np.float32)


@dataclass(frozen=True)
class ProtoError:
    code: int
    message: str


Message = Hello | DetectReq | DetectResp | ClassifyReq | ClassifyResp | ProtoError


def _encode_frame(f: WireFrame) -> bytes:
    return struct.pack("<HHB", f.width, f.height, f.channels) + f.pixels


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        mtype = MSG_HELLO
        payload = struct.pack("<BB", msg.version, msg.role)
    elif isinstance(msg, DetectReq):
        mtype = MSG_DETECT_REQ
        payload = _encode_frame(msg.frame)
    elif isinstance(msg, DetectResp):
        mtype = MSG_DETECT_RESP
        if len(msg.boxes) > 0xFF:
            raise ValueError("too many boxes for one response")
        payload = struct.pack("<B", len(msg.boxes))
        for b in msg.boxes:
            if any(not 0 <= v <= 0xFFFF for v in b):
                raise ValueError("box coordinates must fit in u16")
            payload += struct.pack("<HHHH", *b)
    elif isinstance(msg, ClassifyReq):
        mtype = MSG_CLASSIFY_REQ
        if len(msg.frames) > 0xFF:
            raise ValueError("too many frames for one request")
        payload = struct.pack("<B", len(msg.frames))
        for f in msg.frames:
            payload += _encode_frame(f)
    elif isinstance(msg, ClassifyResp):
        mtype = MSG_CLASSIFY_RESP
        arr = np.asarray(msg.scores, dtype=np.float32)
        payload = struct.pack("<H", arr.size) + struct.pack(f"<{arr.size}f", *arr)
    elif isinstance(msg, ProtoError):
        mtype = MSG_ERROR
        payload = struct.pack("<H", msg.code) + msg.message.encode("utf-8")
    else:
        raise TypeError(f"not a protocol message: {type(msg)!r}")
    return struct.pack("<IB", len(payload), mtype) + payload


class _Reader:
    def __init__(self, buf: bytes, base: int):
        self.buf = buf
        self.pos = 0
        self.base = base  # offset of payload start within the message

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DecodeError(self.base + len(self.buf), f"truncated {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def frame(self) -> WireFrame:
        at = self.base + self.pos
        w = self.u16("frame width")
        h = self.u16("frame height")
        c = self.u8("frame channels")
        if c != 3:
            raise DecodeError(at + 4, f"unsupported channel count {c}")
        if w < 1 or h < 1:
            raise DecodeError(at, "zero frame dimension")
        pixels = self.take(w * h * c, "frame pixels")
        return WireFrame(w, h, pixels)

    def done(self, what: str) -> None:
        if self.pos != len(self.buf):
            raise DecodeError(
                self.base + self.pos, f"{len(self.buf) - self.pos} trailing bytes after {what}"
            )


def decode_payload(mtype: int, payload: bytes) -> Message:
    """Decode one message given its type byte and raw payload."""
    r = _Reader(payload, base=5)
    if mtype == MSG_HELLO:
        msg = Hello(version=r.u8("hello version"), role=r.u8("hello role"))
        r.done("hello")
        return msg
    if mtype == MSG_DETECT_REQ:
        msg = DetectReq(frame=r.frame())
        r.done("detect request")
        return msg
    if mtype == MSG_DETECT_RESP:
        count = r.u8("box count")
        boxes = []
        for _ in range(count):
            x0 = r.u16("box x0")
            y0 = r.u16("box y0")
            x1 = r.u16("box x1")
            y1 = r.u16("box y1")
            boxes.append((x0, y0, x1, y1))
        r.done("detect response")
        return DetectResp(boxes=tuple(boxes))
    if mtype == MSG_CLASSIFY_REQ:
        count = r.u8("frame count")
        frames = tuple(r.frame() for _ in range(count))
        r.done("classify request")
        return ClassifyReq(frames=frames)
    if mtype == MSG_CLASSIFY_RESP:
        count = r.u16("class count")
        raw = r.take(4 * count, "scores")
        r.done("classify response")
        return ClassifyResp(scores=tuple(struct.unpack(f"<{count}f", raw)))
    if mtype == MSG_ERROR:
        code = r.u16("error code")
        rest = r.take(len(payload) - r.pos, "error message")
        try:
            text = rest.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(5 + 2 + e.start, "error message is not valid utf-8")
        return ProtoError(code=code, message=text)
    raise DecodeError(4, f"unknown message type 0x{mtype:02x}")


def decode_message(buf: bytes) -> tuple[Message, int] | None:
    """Decode the first complete message in buf.

    Returns (message, bytes_consumed), or None when more bytes are needed
    for a complete frame.  Raises DecodeError on malformed contents.
    """
    if len(buf) < 5:
        return None
    length, mtype = struct.unpack("<IB", buf[:5])
    if length > _MAX_PAYLOAD:
        raise DecodeError(0, f"payload length {length} exceeds limit")
    if len(buf) < 5 + length:
        return None
    msg = decode_payload(mtype, buf[5 : 5 + length])
    return msg, 5 + length


# ---------- blocking stream I/O ----------

def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def recv_message(sock: socket.socket) -> Message:
    header = _recv_exact(sock, 5)
    length, mtype = struct.unpack("<IB", header)
    if length > _MAX_PAYLOAD:
        raise DecodeError(0, f"payload length {length} exceeds limit")
    payload = _recv_exact(sock, length) if length else b""
    return decode_payload(mtype, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            raise ConnectionError("peer closed the connection mid-message")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


# ---------- harness side: drive a remote plugin ----------

class PluginChannel:
    """Harness end of one plugin connection (one role per connection)."""

    def __init__(self, sock: socket.socket, role: int):
        self._sock = sock
        self.role = role

    @staticmethod
    def connect(address: tuple[str, int], role: int, timeout: float = 10.0) -> "PluginChannel":
        sock = socket.create_connection(address, timeout=timeout)
        sock.settimeout(timeout)
        send_message(sock, Hello(PROTOCOL_VERSION, role))
        ack = recv_message(sock)
        if isinstance(ack, ProtoError):
            sock.close()
            raise PluginFailure(f"plugin rejected handshake: [{ack.code}] {ack.message}")
        if not isinstance(ack, Hello) or ack.version != PROTOCOL_VERSION or ack.role != role:
            sock.close()
            raise PluginFailure(f"unexpected handshake reply: {ack!r}")
        return PluginChannel(sock, role)

    @staticmethod
    def accept(sock: socket.socket) -> "PluginChannel":
        """Harness side of an inbound plugin connection: await HELLO, ack."""
        hello = recv_message(sock)
        if not isinstance(hello, Hello):
            send_message(sock, ProtoError(ERR_BAD_REQUEST, "expected HELLO"))
            raise PluginFailure(f"expected HELLO, got {hello!r}")
        if hello.version != PROTOCOL_VERSION:
            send_message(sock, ProtoError(ERR_VERSION, f"unsupported version {hello.version}"))
            raise PluginFailure(f"unsupported protocol version {hello.version}")
        if hello.role not in (ROLE_DETECTOR, ROLE_CLASSIFIER):
            send_message(sock, ProtoError(ERR_BAD_REQUEST, f"unknown role {hello.role}"))
            raise PluginFailure(f"unknown plugin role {hello.role}")
        send_message(sock, Hello(PROTOCOL_VERSION, hello.role))
        return PluginChannel(sock, hello.role)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def _roundtrip(self, msg: Message) -> Message:
        try:
            send_message(self._sock, msg)
            resp = recv_message(self._sock)
        except (OSError, DecodeError) as e:
            raise PluginFailure(f"plugin transport failed: {e}") from e
        if isinstance(resp, ProtoError):
            raise PluginFailure(f"plugin error [{resp.code}]: {resp.message}")
        return resp

    def detect(self, frame: Frame) -> list[BBox]:
        if self.role != ROLE_DETECTOR:
            raise PluginFailure("detect called on a non-detector channel")
        resp = self._roundtrip(DetectReq(WireFrame.from_frame(frame)))
        if not isinstance(resp, DetectResp):
            raise PluginFailure(f"expected DETECT_RESP, got {resp!r}")
        try:
            return [BBox(*b) for b in resp.boxes]
        except ValueError as e:
            raise PluginFailure(f"plugin returned invalid box: {e}") from e

    def classify(self, clip: np.ndarray) -> np.ndarray:
        if self.role != ROLE_CLASSIFIER:
            raise PluginFailure("classify called on a non-classifier channel")
        frames = tuple(WireFrame.from_array(clip[i]) for i in range(clip.shape[0]))
        resp = self._roundtrip(ClassifyReq(frames))
        if not isinstance(resp, ClassifyResp):
            raise PluginFailure(f"expected CLASSIFY_RESP, got {resp!r}")
        if len(resp.scores) != N_MODEL_CLASSES:
            raise PluginFailure(f"expected {N_MODEL_CLASSES} scores, got {len(resp.scores)}")
        try:
            return validate_scores(resp.as_array())
        except ValueError as e:
            raise PluginFailure(f"plugin returned invalid scores: {e}") from e


# ---------- plugin side: expose a local plugin over a socket ----------

def serve_plugin_connection(sock: socket.socket, plugin, role: int) -> int:
    """Answer requests on an already-handshaken socket until the peer
    disconnects; returns the number of requests served."""
    served = 0
    while True:
        try:
            msg = recv_message(sock)
        except ConnectionError:
            return served
        try:
            resp = _dispatch(msg, plugin, role)
        except DecodeError:
            raise
        except Exception as e:  # handler failure maps to a protocol error
            resp = ProtoError(ERR_HANDLER, f"{type(e).__name__}: {e}")
        send_message(sock, resp)
        served += 1


def _dispatch(msg: Message, plugin, role: int) -> Message:
    if isinstance(msg, DetectReq):
        if role != ROLE_DETECTOR:
            return ProtoError(ERR_BAD_REQUEST, "detector request on classifier channel")
        frame = Frame(0, msg.frame.width, msg.frame.height, msg.frame.pixels, 0.0, 0.0)
        boxes = plugin.detect(frame)
        out = []
        for b in boxes:
            if not b.fits(msg.frame.width, msg.frame.height):
                return ProtoError(ERR_HANDLER, "plugin produced box outside frame")
            out.append((b.x0, b.y0, b.x1, b.y1))
        return DetectResp(tuple(out))
    if isinstance(msg, ClassifyReq):
        if role != ROLE_CLASSIFIER:
            return ProtoError(ERR_BAD_REQUEST, "classifier request on detector channel")
        if len(msg.frames) == 0:
            return ProtoError(ERR_BAD_REQUEST, "classify request with no frames")
        dims = {(f.width, f.height) for f in msg.frames}
        if len(dims) != 1:
            return ProtoError(ERR_BAD_REQUEST, "classify frames must share dimensions")
        clip = np.stack([f.to_array() for f in msg.frames])
        scores = validate_scores(plugin.classify(clip))
        return ClassifyResp(tuple(float(v) for v in scores))
    return ProtoError(ERR_BAD_REQUEST, f"unexpected message {type(msg).__name__}")


# ---------- remote model factories for the evaluation runner ----------

_CHANNEL_CACHE: dict[tuple[str, int, int], PluginChannel] = {}


def _cached_channel(host: str, port: int, role: int) -> PluginChannel:
    key = (host, port, role)
    ch = _CHANNEL_CACHE.get(key)
    if ch is None:
        ch = PluginChannel.connect((host, port), role)
        _CHANNEL_CACHE[key] = ch
    return ch


def close_cached_channels() -> None:
    for ch in _CHANNEL_CACHE.values():
        ch.close()
    _CHANNEL_CACHE.clear()


@dataclass(frozen=True)
class RemoteClassifierSpec:
    """Classifier backed by a remote plugin; one shared connection per run.

    Remote runs are inherently order-sensitive, so the runner must execute
    trials on a single worker when this spec is in play.
    """

    host: str
    port: int

    def build(self, instance, lighting_scale, config) -> PluginChannel:
        return _cached_channel(self.host, self.port, ROLE_CLASSIFIER)


@dataclass(frozen=True)
class RemoteDetectorSpec:
    host: str
    port: int

    def build(self, instance, lighting_scale, config) -> PluginChannel:
        return _cached_channel(self.host, self.port, ROLE_DETECTOR)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address {text!r} must look like host:port")
    return host, int(port)


def serve_plugin(address: tuple[str, int], plugin, role: int, *,
                 connections: int = 1, ready=None) -> None:
    """Listen on address and serve a plugin for a number of connections.

    The plugin acts as the protocol server: each inbound connection starts
    with the client HELLO which we acknowledge.  Intended for tests and for
    exposing the built-in models to other harnesses.
    """
    srv = socket.create_server(address)
    try:
        if ready is not None:
            ready(srv.getsockname())
        for _ in range(connections):
            conn, _ = srv.accept()
            with conn:
                try:
                    hello = recv_message(conn)
                    if not isinstance(hello, Hello):
                        send_message(conn, ProtoError(ERR_BAD_REQUEST, "expected HELLO"))
                        continue
                    if hello.version != PROTOCOL_VERSION:
                        send_message(
                            conn, ProtoError(ERR_VERSION, f"unsupported version {hello.version}")
                        )
                        continue
                    if hello.role != role:
                        send_message(
                            conn, ProtoError(ERR_BAD_REQUEST, f"role {hello.role} not served here")
                        )
                        continue
                    send_message(conn, Hello(PROTOCOL_VERSION, role))
                    serve_plugin_connection(conn, plugin, role)
                except (ConnectionError, DecodeError):
                    continue
    finally:
        srv.close()
