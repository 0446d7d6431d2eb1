"""Serving loop that exposes user model callables to the harness.

The harness dials out to a plugin server (``--model remote:<host:port>``)
and speaks the protocol in ``protocol.py``: HELLO handshake, then strict
request-response with one request in flight.  This module owns the
socket lifecycle so user code is just a callable:

    def my_detector(frame):           # frame: protocol.Frame
        return [(x0, y0, x1, y1), ...]

    serve_detector(my_detector, "0.0.0.0:7600")

    def my_classifier(frames):        # tuple of 32 protocol.Frames
        return scores                 # 27 floats in [0, 1]

    serve_classifier(my_classifier, "0.0.0.0:7601")

Handler outputs are validated before they are encoded, so a buggy
handler produces a protocol ERROR (code 3) on the wire instead of a
corrupt message, and the session keeps serving.
"""
from __future__ import annotations

import math
import socket
from dataclasses import dataclass
from typing import Callable

from .protocol import (
    ClassifyReq,
    ClassifyResp,
    DecodeError,
    DetectReq,
    DetectResp,
    ERR_BAD_REQUEST,
    ERR_HANDLER,
    ERR_VERSION,
    ErrorMessage,
    Hello,
    PROTOCOL_VERSION,
    ROLE_CLASSIFIER,
    ROLE_DETECTOR,
    read_message,
    write_message,
)

N_SCORES = 27

_ROLE_CODES = {"detector": ROLE_DETECTOR, "classifier": ROLE_CLASSIFIER}


@dataclass(frozen=True)
class RemoteModelAdapter:
    """One served model: role, user handler, and listen address.

    Detector handlers receive a single Frame and return an iterable of
    (x0, y0, x1, y1) pixel boxes with x0 < x1, y0 < y1.  Classifier
    handlers receive a tuple of Frames and return 27 confidences in
    [0, 1].  expected_frames pins the temporal sample length a classify
    request must carry (the harness default is 32); None disables the
    check for nonstandard pipelines.
    """

    role: str
    handler: Callable
    address: str = "127.0.0.1:7600"
    expected_frames: int | None = 32

    def __post_init__(self):
        if self.role not in _ROLE_CODES:
            raise ValueError(f"role must be 'detector' or 'classifier', got {self.role!r}")
        if self.expected_frames is not None and self.expected_frames < 1:
            raise ValueError("expected_frames must be >= 1 or None")

    @property
    def role_code(self) -> int:
        return _ROLE_CODES[self.role]


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)


def serve_model(adapter: RemoteModelAdapter, *, connections: int | None = None,
                ready: Callable[[int], None] | None = None) -> None:
    """Listen on the adapter's address and serve handler sessions.

    Connections are handled one at a time, each a full HELLO handshake
    plus request loop; runs until interrupted, or after ``connections``
    sessions when given (tests use this together with ``ready``, which
    receives the bound port once the socket is listening).
    """
    with socket.create_server(parse_address(adapter.address)) as srv:
        if ready is not None:
            ready(srv.getsockname()[1])
        served = 0
        while connections is None or served < connections:
            conn, _ = srv.accept()
            served += 1
            with conn:
                try:
                    _serve_connection(conn, adapter)
                except (DecodeError, OSError):
                    pass  # malformed or dropped sessions just end


def serve_detector(fn: Callable, address: str = "127.0.0.1:7600", **kwargs) -> None:
    serve_model(RemoteModelAdapter("detector", fn, address), **kwargs)


def serve_classifier(fn: Callable, address: str = "127.0.0.1:7601", **kwargs) -> None:
    serve_model(RemoteModelAdapter("classifier", fn, address), **kwargs)


def _serve_connection(conn: socket.socket, adapter: RemoteModelAdapter) -> None:
    hello = read_message(conn)
    if hello is None:
        return
    if not isinstance(hello, Hello):
        write_message(conn, ErrorMessage(ERR_BAD_REQUEST, "expected HELLO"))
        return
    if hello.version != PROTOCOL_VERSION:
        write_message(conn, ErrorMessage(ERR_VERSION, f"unsupported version {hello.version}"))
        return
    if hello.role != adapter.role_code:
        write_message(
            conn, ErrorMessage(ERR_BAD_REQUEST, f"role {hello.role} not served here")
        )
        return
    write_message(conn, Hello(PROTOCOL_VERSION, adapter.role_code))
    while True:
        msg = read_message(conn)
        if msg is None:
            return
        write_message(conn, _answer(msg, adapter))


def _answer(msg, adapter: RemoteModelAdapter):
    if isinstance(msg, DetectReq):
        if adapter.role != "detector":
            return ErrorMessage(ERR_BAD_REQUEST, "detect request on a classifier connection")
        try:
            boxes = _checked_boxes(adapter.handler(msg.frame), msg.frame)
        except Exception as e:
            return ErrorMessage(ERR_HANDLER, str(e) or type(e).__name__)
        return DetectResp(boxes)
    if isinstance(msg, ClassifyReq):
        if adapter.role != "classifier":
            return ErrorMessage(ERR_BAD_REQUEST, "classify request on a detector connection")
        bad = _classify_req_problem(msg, adapter.expected_frames)
        if bad is not None:
            return ErrorMessage(ERR_BAD_REQUEST, bad)
        try:
            scores = _checked_scores(adapter.handler(msg.frames))
        except Exception as e:
            return ErrorMessage(ERR_HANDLER, str(e) or type(e).__name__)
        return ClassifyResp(scores)
    return ErrorMessage(ERR_BAD_REQUEST, f"unexpected message {type(msg).__name__}")


def _classify_req_problem(msg: ClassifyReq, expected: int | None) -> str | None:
    if len(msg.frames) == 0:
        return "classify request carries no frames"
    if expected is not None and len(msg.frames) != expected:
        return f"expected {expected} frames, got {len(msg.frames)}"
    dims = {(f.width, f.height) for f in msg.frames}
    if len(dims) > 1:
        return "classify request frames disagree on dimensions"
    return None


def _checked_boxes(result, frame) -> tuple[tuple[int, int, int, int], ...]:
    boxes = []
    for box in result:
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 < x1 <= 0xFFFF and 0 <= y0 < y1 <= 0xFFFF):
            raise ValueError(f"handler returned a degenerate box {tuple(box)!r}")
        boxes.append((x0, y0, x1, y1))
    if len(boxes) > 0xFF:
        raise ValueError("handler returned more than 255 boxes")
    return tuple(boxes)


def _checked_scores(result) -> tuple[float, ...]:
    scores = tuple(float(v) for v in result)
    if len(scores) != N_SCORES:
        raise ValueError(f"handler returned {len(scores)} scores, expected {N_SCORES}")
    if any(not (math.isfinite(v) and 0.0 <= v <= 1.0) for v in scores):
        raise ValueError("handler scores must be finite and in [0, 1]")
    return scores
