"""Deterministic seed derivation and random streams.

Every random draw in the harness comes from a stream whose seed is derived
from the run's master seed with SplitMix64 mixing.  The derivation is pure
integer arithmetic, so any implementation in any language can reproduce it
(remote model plugins rely on this; see docs/determinism.md).

Derivation rules:

    trial_seed              = mix64(master_seed, scenario_id, gesture_ord, trial_index)
    jitter seed (per frame) = mix64(trial_seed, STREAM_JITTER, frame_index)
    temporal sample seed    = mix64(trial_seed, STREAM_TEMPORAL)
    lighting seed           = mix64(trial_seed, STREAM_LIGHTING)
    classifier stream seed  = mix64(trial_seed, STREAM_CLASSIFIER)
    detector stream seed    = mix64(trial_seed, STREAM_DETECTOR)

where gesture_ord is the canonical gesture ordinal (GestureClass order) and
mix64 chains SplitMix64 over its arguments starting from a fixed constant.
"""
from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_MIX_INIT = 0x243F6A8885A308D3  # first 64 bits of pi, arbitrary fixed start

STREAM_JITTER = 1
STREAM_TEMPORAL = 2
STREAM_LIGHTING = 3
STREAM_CLASSIFIER = 4
STREAM_DETECTOR = 5


def splitmix64(x: int) -> int:
    """One SplitMix64 output step for state ``x`` (Steele et al. finalizer)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def mix64(*values: int) -> int:
    """Fold integers into one 64-bit seed, order-sensitive."""
    h = _MIX_INIT
    for v in values:
        h = splitmix64(h ^ (int(v) & _MASK))
    return h


def trial_seed(master_seed: int, scenario_id: int, gesture_ord: int, trial_index: int) -> int:
    return mix64(master_seed, scenario_id, gesture_ord, trial_index)


class SplitMix64Stream:
    """Tiny language-portable uniform stream used for oracle model draws.

    Pure integer state; ``random()`` yields the usual 53-bit uniform in
    [0, 1).  numpy generators are used elsewhere for internal draws, but
    oracle draws must be reproducible by remote plugins without numpy.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53


def np_stream(seed: int) -> np.random.Generator:
    """numpy generator for internal (non-protocol) draws."""
    return np.random.Generator(np.random.PCG64(seed))
