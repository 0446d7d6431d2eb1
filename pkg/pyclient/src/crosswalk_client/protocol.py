"""Codec for the harness model-plugin wire protocol.

Standalone implementation of the protocol in the harness distribution's
docs/protocol.md: every message is framed as a little-endian u32 payload
length, a u8 type byte, and the payload; frames embed as u16 width,
u16 height, u8 channels (always 3) followed by row-major RGB bytes.

The codec is syntax-only.  It enforces exactly what is needed to parse
a byte stream unambiguously (lengths, channel counts, no trailing
bytes) and nothing more; semantic rules such as "27 scores" or
"32 frames per classify request" belong to the serving layer, so that
layer can answer bad requests with a protocol ERROR instead of dying.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

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

HEADER_LEN = 5
MAX_PAYLOAD = 64 * 1024 * 1024


class DecodeError(ValueError):
    """Malformed wire bytes.

    offset counts from the first byte of the framed message (0 is the
    start of the length prefix, 4 the type byte, 5 the payload).
    Truncated fields report the end of the available payload; trailing
    junk reports the first excess byte.
    """

    def __init__(self, offset: int, reason: str):
        super().__init__(f"decode error at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


@dataclass(frozen=True)
class Frame:
    """One RGB image as it travels on the wire."""

    width: int
    height: int
    pixels: bytes
    channels: int = 3

    def __post_init__(self):
        if not 1 <= self.width <= 0xFFFF or not 1 <= self.height <= 0xFFFF:
            raise ValueError("frame dimensions must be in 1..65535")
        if self.channels != 3:
            raise ValueError("wire frames are 3-channel RGB")
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ValueError(
                f"expected {self.width * self.height * self.channels} pixel bytes, "
                f"got {len(self.pixels)}"
            )

    def to_array(self):
        """Pixels as an (h, w, 3) uint8 array; needs numpy installed."""
        import numpy as np

        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, self.channels
        )


@dataclass(frozen=True)
class Hello:
    version: int
    role: int


@dataclass(frozen=True)
class DetectReq:
    frame: Frame


@dataclass(frozen=True)
class DetectResp:
    boxes: tuple[tuple[int, int, int, int], ...]


@dataclass(frozen=True)
class ClassifyReq:
    frames: tuple[Frame, ...]


@dataclass(frozen=True)
class ClassifyResp:
    scores: tuple[float, ...]  # exact float32 values after a decode


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    message: str


Message = Hello | DetectReq | DetectResp | ClassifyReq | ClassifyResp | ErrorMessage


# ---------- encoding ----------

def _frame_bytes(f: Frame) -> bytes:
    return struct.pack("<HHB", f.width, f.height, f.channels) + f.pixels


def encode(msg: Message) -> bytes:
    """Serialize one message, header included."""
    if isinstance(msg, Hello):
        if not 0 <= msg.version <= 0xFF or not 0 <= msg.role <= 0xFF:
            raise ValueError("hello fields must fit in u8")
        mtype, payload = MSG_HELLO, struct.pack("<BB", msg.version, msg.role)
    elif isinstance(msg, DetectReq):
        mtype, payload = MSG_DETECT_REQ, _frame_bytes(msg.frame)
    elif isinstance(msg, DetectResp):
        if len(msg.boxes) > 0xFF:
            raise ValueError("at most 255 boxes per response")
        parts = [struct.pack("<B", len(msg.boxes))]
        for box in msg.boxes:
            if len(box) != 4 or any(not 0 <= v <= 0xFFFF for v in box):
                raise ValueError(f"box must be four u16 values, got {box!r}")
            parts.append(struct.pack("<HHHH", *box))
        mtype, payload = MSG_DETECT_RESP, b"".join(parts)
    elif isinstance(msg, ClassifyReq):
        if len(msg.frames) > 0xFF:
            raise ValueError("at most 255 frames per request")
        mtype = MSG_CLASSIFY_REQ
        payload = struct.pack("<B", len(msg.frames)) + b"".join(
            _frame_bytes(f) for f in msg.frames
        )
    elif isinstance(msg, ClassifyResp):
        n = len(msg.scores)
        if n > 0xFFFF:
            raise ValueError("at most 65535 scores per response")
        mtype = MSG_CLASSIFY_RESP
        payload = struct.pack(f"<H{n}f", n, *msg.scores)
    elif isinstance(msg, ErrorMessage):
        if not 0 <= msg.code <= 0xFFFF:
            raise ValueError("error code must fit in u16")
        mtype = MSG_ERROR
        payload = struct.pack("<H", msg.code) + msg.message.encode("utf-8")
    else:
        raise TypeError(f"not a wire message: {type(msg)!r}")
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload exceeds the 64 MiB limit")
    return struct.pack("<IB", len(payload), mtype) + payload


# ---------- decoding ----------

class _Cursor:
    """Payload reader tracking absolute offsets for error reports."""

    def __init__(self, payload: bytes):
        self.buf = payload
        self.pos = 0

    @property
    def offset(self) -> int:
        return HEADER_LEN + self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DecodeError(HEADER_LEN + len(self.buf), f"truncated {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return int.from_bytes(self.take(2, what), "little")

    def frame(self) -> Frame:
        start = self.offset
        w = self.u16("frame width")
        h = self.u16("frame height")
        c = self.u8("frame channels")
        if w == 0 or h == 0:
            raise DecodeError(start, "zero frame dimension")
        if c != 3:
            raise DecodeError(start + 4, f"unsupported channel count {c}")
        return Frame(w, h, bytes(self.take(w * h * c, "frame pixels")))

    def finish(self, what: str) -> None:
        if self.pos != len(self.buf):
            raise DecodeError(
                self.offset, f"{len(self.buf) - self.pos} trailing bytes after {what}"
            )


def _decode_payload(mtype: int, payload: bytes) -> Message:
    c = _Cursor(payload)
    if mtype == MSG_HELLO:
        msg = Hello(c.u8("hello version"), c.u8("hello role"))
        c.finish("hello")
        return msg
    if mtype == MSG_DETECT_REQ:
        msg = DetectReq(c.frame())
        c.finish("detect request")
        return msg
    if mtype == MSG_DETECT_RESP:
        boxes = tuple(
            (c.u16("box x0"), c.u16("box y0"), c.u16("box x1"), c.u16("box y1"))
            for _ in range(c.u8("box count"))
        )
        c.finish("detect response")
        return DetectResp(boxes)
    if mtype == MSG_CLASSIFY_REQ:
        frames = tuple(c.frame() for _ in range(c.u8("frame count")))
        c.finish("classify request")
        return ClassifyReq(frames)
    if mtype == MSG_CLASSIFY_RESP:
        n = c.u16("class count")
        scores = struct.unpack(f"<{n}f", c.take(4 * n, "scores"))
        c.finish("classify response")
        return ClassifyResp(scores)
    if mtype == MSG_ERROR:
        code = c.u16("error code")
        at = c.offset
        raw = c.take(len(payload) - c.pos, "error message")
        try:
            return ErrorMessage(code, raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise DecodeError(at + e.start, "error message is not valid utf-8")
    raise DecodeError(4, f"unknown message type 0x{mtype:02x}")


def decode(buf: bytes) -> Message:
    """Decode exactly one framed message occupying all of buf."""
    if len(buf) < HEADER_LEN:
        raise DecodeError(len(buf), "truncated header")
    length = int.from_bytes(buf[:4], "little")
    if length > MAX_PAYLOAD:
        raise DecodeError(0, f"payload length {length} exceeds limit")
    if len(buf) != HEADER_LEN + length:
        if len(buf) < HEADER_LEN + length:
            raise DecodeError(len(buf), "truncated payload")
        raise DecodeError(HEADER_LEN + length, "trailing bytes after message")
    return _decode_payload(buf[4], buf[HEADER_LEN:])


class StreamDecoder:
    """Incremental decoder: feed arbitrary chunks, pull whole messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def next_message(self) -> Message | None:
        """One decoded message, or None until a full frame is buffered."""
        if len(self._buf) < HEADER_LEN:
            return None
        length = int.from_bytes(self._buf[:4], "little")
        if length > MAX_PAYLOAD:
            raise DecodeError(0, f"payload length {length} exceeds limit")
        total = HEADER_LEN + length
        if len(self._buf) < total:
            return None
        raw = bytes(self._buf[:total])
        del self._buf[:total]
        return decode(raw)

    @property
    def pending(self) -> int:
        return len(self._buf)


# ---------- blocking socket transport ----------

def write_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


def read_message(sock: socket.socket) -> Message | None:
    """One message off the socket; None on a clean close between messages."""
    header = _read_exact(sock, HEADER_LEN, allow_eof=True)
    if header is None:
        return None
    length = int.from_bytes(header[:4], "little")
    if length > MAX_PAYLOAD:
        raise DecodeError(0, f"payload length {length} exceeds limit")
    payload = _read_exact(sock, length) if length else b""
    return _decode_payload(header[4], payload)


def _read_exact(sock: socket.socket, n: int, allow_eof: bool = False) -> bytes | None:
    parts = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise ConnectionError("peer closed the connection mid-message")
        parts.append(chunk)
        got += len(chunk)
    return b"".join(parts)
