#!/usr/bin/env python3
"""Regenerate the golden wire-protocol corpus.

Emits one JSON object per line: {"name", "type", "hex"} where hex is the
complete encoded message (header + payload).  The corpus pins the byte
layout so independent protocol implementations can check both directions:
decode every vector, and re-encode back to the identical bytes.

Run from the repository root:  python3 scripts/gen_wire_corpus.py
"""
import json
import random
import struct
from pathlib import Path

import numpy as np

from crosswalk.wire import (
    ClassifyReq,
    ClassifyResp,
    DetectReq,
    DetectResp,
    Hello,
    ProtoError,
    WireFrame,
    encode_message,
)

OUT = Path(__file__).resolve().parent.parent / "golden" / "wire_corpus.jsonl"


def rand_frame(rng, w, h):
    return WireFrame(w, h, bytes(rng.randrange(256) for _ in range(w * h * 3)))


def build():
    rng = random.Random(0x5EED)
    entries = []

    def add(name, msg):
        entries.append((name, encode_message(msg)))

    add("hello_detector", Hello(1, 1))
    add("hello_classifier", Hello(1, 2))
    add("hello_future_version", Hello(2, 1))
    add("hello_odd_role", Hello(1, 9))

    add("detect_req_1x1", DetectReq(WireFrame(1, 1, b"\x00\x00\x00")))
    add("detect_req_max_byte", DetectReq(WireFrame(2, 2, b"\xff" * 12)))
    for i, (w, h) in enumerate([(3, 2), (16, 16), (64, 24), (5, 31)]):
        add(f"detect_req_rand_{i}", DetectReq(rand_frame(rng, w, h)))

    add("detect_resp_empty", DetectResp(()))
    add("detect_resp_origin_point", DetectResp(((0, 0, 0, 0),)))
    add("detect_resp_u16_max", DetectResp(((65535, 65535, 65535, 65535),)))
    add("detect_resp_three", DetectResp(((1, 2, 3, 4), (10, 20, 30, 40), (0, 0, 640, 480))))
    add(
        "detect_resp_255_boxes",
        DetectResp(tuple(
            (i, i + 1, i + 2, i + 3) for i in range(255)
        )),
    )
    for i in range(12):
        n = rng.randrange(0, 8)
        boxes = []
        for _ in range(n):
            x0, y0 = rng.randrange(0, 60000), rng.randrange(0, 60000)
            boxes.append((x0, y0, x0 + rng.randrange(0, 5000), y0 + rng.randrange(0, 5000)))
        add(f"detect_resp_rand_{i}", DetectResp(tuple(boxes)))

    add("classify_req_single", ClassifyReq((rand_frame(rng, 2, 2),)))
    add("classify_req_short", ClassifyReq(tuple(rand_frame(rng, 2, 3) for _ in range(5))))
    add("classify_req_32x4x4", ClassifyReq(tuple(rand_frame(rng, 4, 4) for _ in range(32))))
    for i in range(6):
        n = rng.choice([1, 2, 8, 32])
        w, h = rng.choice([(2, 2), (3, 3), (4, 2)])
        add(f"classify_req_rand_{i}", ClassifyReq(tuple(rand_frame(rng, w, h) for _ in range(n))))

    add("classify_resp_zeros", ClassifyResp(tuple([0.0] * 27)))
    add("classify_resp_ones", ClassifyResp(tuple([1.0] * 27)))
    add("classify_resp_one_hot", ClassifyResp(tuple(1.0 if i == 4 else 0.0 for i in range(27))))
    add(
        "classify_resp_thirds",
        ClassifyResp(tuple(float(np.float32(i / 3.0) % np.float32(1.0)) for i in range(27))),
    )
    add("classify_resp_count_3", ClassifyResp((0.25, 0.5, 0.75)))
    for i in range(8):
        scores = np.asarray([rng.random() for _ in range(27)], dtype=np.float32)
        add(f"classify_resp_rand_{i}", ClassifyResp(tuple(float(v) for v in scores)))

    add("error_version", ProtoError(1, "unsupported version 2"))
    add("error_bad_request_empty", ProtoError(2, ""))
    add("error_handler_unicode", ProtoError(3, "überlast: ☂ handler fiel aus"))
    add("error_large_code", ProtoError(65535, "x" * 100))

    return entries


def main():
    entries = build()
    names = [n for n, _ in entries]
    assert len(names) == len(set(names)), "corpus names must be unique"
    assert len(entries) >= 50, f"corpus too small: {len(entries)}"
    types = {raw[4] for _, raw in entries}
    assert types == {1, 2, 3, 4, 5, 6}, f"missing message types: {types}"
    OUT.parent.mkdir(parents=True, exist_ok=True)
    with OUT.open("w") as fh:
        for name, raw in entries:
            fh.write(json.dumps({"name": name, "type": raw[4], "hex": raw.hex()}) + "\n")
    print(f"wrote {len(entries)} messages to {OUT}")


if __name__ == "__main__":
    main()
