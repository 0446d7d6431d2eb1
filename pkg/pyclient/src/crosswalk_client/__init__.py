"""Client SDK for serving remote model plugins to the crosswalk harness."""

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
    Frame,
    Hello,
    MAX_PAYLOAD,
    Message,
    PROTOCOL_VERSION,
    ROLE_CLASSIFIER,
    ROLE_DETECTOR,
    StreamDecoder,
    decode,
    encode,
    read_message,
    write_message,
)
from .server import (
    RemoteModelAdapter,
    parse_address,
    serve_classifier,
    serve_detector,
    serve_model,
)
from .oracle import (
    OracleStats,
    ScheduledNoisyOracle,
    Stream,
    canonical_pairs,
    mix64,
    oracle_scores,
    splitmix64,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifyReq", "ClassifyResp", "DecodeError", "DetectReq", "DetectResp",
    "ERR_BAD_REQUEST", "ERR_HANDLER", "ERR_VERSION", "ErrorMessage", "Frame",
    "Hello", "MAX_PAYLOAD", "Message", "PROTOCOL_VERSION", "ROLE_CLASSIFIER",
    "ROLE_DETECTOR", "StreamDecoder", "decode", "encode", "read_message",
    "write_message", "RemoteModelAdapter", "parse_address", "serve_classifier",
    "serve_detector", "serve_model", "OracleStats", "ScheduledNoisyOracle",
    "Stream", "canonical_pairs", "mix64", "oracle_scores", "splitmix64",
]
