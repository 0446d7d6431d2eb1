"""Reference remote noisy oracle for protocol parity runs.

The harness documents its determinism contract (docs/determinism.md in
its distribution): trials execute in canonical order, remote classifier
runs use one connection and a single worker, and every trial issues
exactly one classify request.  Requests carry pixels only, so a remote
model that wants trial-keyed behavior reconstructs the schedule by
counting requests.  This module does exactly that, reproducing the
harness's built-in noisy oracle bit for bit: same seed derivation, same
two stream draws, same float32 rounding points.  Pure stdlib, so it
doubles as an executable spec of the contract.
"""
from __future__ import annotations

import bisect
import json
import struct
from dataclasses import dataclass
from pathlib import Path

_MASK = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX_INIT = 0x243F6A8885A308D3

STREAM_CLASSIFIER = 4

N_SCORES = 27
N_GESTURES = 5

# gesture ordinals admissible per scenario, scenarios in ascending order
ADMISSIBLE_ORDS = {1: (0, 1, 2, 3, 4), 2: (0, 1, 4), 3: (0, 1, 4), 4: (0, 1, 4)}

GESTURE_NAMES = ("go_forward", "stop", "go_right", "go_left", "no_gesture")


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    return _finalize((x + _GAMMA) & _MASK)


def mix64(*values: int) -> int:
    h = _MIX_INIT
    for v in values:
        h = splitmix64(h ^ (int(v) & _MASK))
    return h


class Stream:
    """The harness's SplitMix64 uniform stream (53-bit doubles)."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _finalize(self._state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53


def _f32(x: float) -> float:
    """Round a double to its nearest float32 value, as the wire will."""
    return struct.unpack("<f", struct.pack("<f", x))[0]


def canonical_pairs(scenarios=(1, 2, 3, 4)) -> tuple[tuple[int, int], ...]:
    """(scenario, gesture_ord) pairs in the harness's run order."""
    pairs = []
    for sid in sorted(scenarios):
        if sid not in ADMISSIBLE_ORDS:
            raise ValueError(f"unknown scenario id {sid}")
        pairs.extend((sid, g) for g in ADMISSIBLE_ORDS[sid])
    return tuple(pairs)


@dataclass(frozen=True)
class OracleStats:
    """Emission statistics: 5x5 confusion plus per-cell confidence.

    confusion rows are truth, columns emitted class, each row summing
    to 1.  confidence is a 5x5 grid of (mean, half_width) pairs; the
    emitted confidence is uniform in mean +- half_width.  The 22
    unmapped output slots carry extraneous_floor.
    """

    confusion: tuple[tuple[float, ...], ...]
    confidence: tuple[tuple[tuple[float, float], ...], ...]
    extraneous_floor: float = 0.0

    def __post_init__(self):
        if len(self.confusion) != N_GESTURES or any(
            len(row) != N_GESTURES for row in self.confusion
        ):
            raise ValueError("confusion must be 5x5")
        for row in self.confusion:
            if any(v < 0 for v in row):
                raise ValueError("confusion entries must be >= 0")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError("confusion rows must sum to 1")
        if len(self.confidence) != N_GESTURES or any(
            len(row) != N_GESTURES for row in self.confidence
        ):
            raise ValueError("confidence must be 5x5 (mean, half_width) pairs")
        for row in self.confidence:
            for mean, hw in row:
                if hw < 0 or mean - hw < 0.0 or mean + hw > 1.0:
                    raise ValueError("confidence intervals must stay inside [0, 1]")
        if not 0.0 <= self.extraneous_floor <= 1.0:
            raise ValueError("extraneous_floor must be in [0, 1]")

    @staticmethod
    def make(confusion, confidence_mean: float = 0.85,
             confidence_half_width: float = 0.10,
             extraneous_floor: float = 0.0) -> "OracleStats":
        cell = (float(confidence_mean), float(confidence_half_width))
        return OracleStats(
            tuple(tuple(float(v) for v in row) for row in confusion),
            tuple(tuple(cell for _ in range(N_GESTURES)) for _ in range(N_GESTURES)),
            float(extraneous_floor),
        )

    @staticmethod
    def identity(confidence_mean: float = 1.0,
                 confidence_half_width: float = 0.0) -> "OracleStats":
        eye = tuple(
            tuple(1.0 if i == j else 0.0 for j in range(N_GESTURES))
            for i in range(N_GESTURES)
        )
        return OracleStats.make(eye, confidence_mean, confidence_half_width)

    @staticmethod
    def from_file(path) -> "OracleStats":
        """Read the harness's oracle statistics JSON schema."""
        raw = json.loads(Path(path).read_text())
        floor = float(raw.get("extraneous_floor", 0.0))
        if "confidence" in raw:
            return OracleStats(
                tuple(tuple(float(v) for v in row) for row in raw["confusion"]),
                tuple(
                    tuple((float(c[0]), float(c[1])) for c in row)
                    for row in raw["confidence"]
                ),
                floor,
            )
        return OracleStats.make(
            raw["confusion"],
            confidence_mean=float(raw.get("confidence_mean", 0.85)),
            confidence_half_width=float(raw.get("confidence_half_width", 0.10)),
            extraneous_floor=floor,
        )


def oracle_scores(truth_ord: int, stats: OracleStats, stream: Stream,
                  class_map: dict[int, int] | None = None) -> list[float]:
    """One 27-slot score vector, consuming exactly two stream draws.

    Draw one picks the emitted class by inverse CDF over the truth row
    (ties fall to the next class); draw two places the confidence in
    the cell interval, rounded once to float32.  The other four mapped
    slots get min(conf/2, (1-conf)/4) computed from the rounded value.
    Values are doubles equal to their float32 rounding (or destined for
    exactly one rounding at encode time), so the wire bits match the
    in-process oracle's float32 output.
    """
    if class_map is None:
        class_map = {g: g for g in range(N_GESTURES)}
    cum = []
    total = 0.0
    for v in stats.confusion[truth_ord]:
        total += v
        cum.append(total)
    k = min(bisect.bisect_right(cum, stream.random()), N_GESTURES - 1)
    mean, hw = stats.confidence[truth_ord][k]
    conf = _f32(mean + hw * (2.0 * stream.random() - 1.0))
    others = min(conf / 2.0, (1.0 - conf) / 4.0)
    scores = [stats.extraneous_floor] * N_SCORES
    for g in range(N_GESTURES):
        scores[class_map[g]] = others
    scores[class_map[k]] = conf
    return scores


class ScheduledNoisyOracle:
    """Classifier handler replaying the harness's noisy oracle draws.

    Configured with the run's master seed, trials per pair, and
    scenario set, the k-th classify request it answers is the k-th
    trial of the canonical enumeration, so its scores are bit-identical
    to the in-process oracle's for the same run.  Single-session use:
    serve one harness run, then discard (the request counter is the
    only state).
    """

    def __init__(self, master_seed: int, trials_per_pair: int,
                 scenarios=(1, 2, 3, 4), stats: OracleStats | None = None,
                 class_map: dict[int, int] | None = None):
        if trials_per_pair < 1:
            raise ValueError("trials_per_pair must be >= 1")
        self._master = int(master_seed)
        self._trials = int(trials_per_pair)
        self._pairs = canonical_pairs(scenarios)
        self._stats = stats if stats is not None else OracleStats.identity()
        self._map = class_map
        self._calls = 0

    @property
    def calls(self) -> int:
        return self._calls

    def __call__(self, frames) -> list[float]:
        k = self._calls
        if k >= len(self._pairs) * self._trials:
            raise RuntimeError("trial schedule exhausted")
        self._calls += 1
        sid, g_ord = self._pairs[k // self._trials]
        seed = mix64(self._master, sid, g_ord, k % self._trials)
        return oracle_scores(g_ord, self._stats, Stream(mix64(seed, STREAM_CLASSIFIER)), self._map)
