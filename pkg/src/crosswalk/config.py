"""Run configuration: defaults, config file, flag merging.

Precedence (highest wins): command-line flags, then the JSON config file
named by $CROSSWALK_CONFIG, then built-in defaults.  The config file may
set any RunConfig field by name, including a few that have no dedicated
flag (jitter_amplitude_rad, lighting_variation).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .models import NoisyOracleConfig

CONFIG_ENV_VAR = "CROSSWALK_CONFIG"

# Default confusion for the noisy oracle when no file is given: strong
# diagonal with the directional gestures mildly confusable with each other
# and everything occasionally collapsing to no_gesture.
DEFAULT_ORACLE_CONFUSION = (
    (0.90, 0.02, 0.02, 0.02, 0.04),
    (0.02, 0.92, 0.01, 0.01, 0.04),
    (0.02, 0.01, 0.86, 0.08, 0.03),
    (0.02, 0.01, 0.08, 0.86, 0.03),
    (0.02, 0.02, 0.02, 0.02, 0.92),
)


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 1
    trials_per_sg: int = 2000
    scenarios: tuple[int, ...] = (1, 2, 3, 4)
    width_px: int = 1280
    height_px: int = 480
    fov_deg: float = 50.0
    clock_scale: float = 0.14
    wall_interval_s: float = 0.566
    stride_s: int = 5
    window_m: int = 40
    sample_t: int = 32
    delta: float = 0.40
    model: str = "builtin:template"
    oracle_confusion: str | None = None
    out_dir: str = "out"
    fast_forward: bool = True
    workers: int = 0  # 0 = one per CPU
    dump_frames: bool = False
    jitter_amplitude_rad: float = 0.05
    lighting_variation: bool = True

    def effective_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        return max(1, os.cpu_count() or 1)

    def echo(self) -> dict:
        """Effective values for embedding into report.json."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


class ConfigError(ValueError):
    pass


def _coerce(name: str, value):
    if name == "scenarios":
        if isinstance(value, str):
            value = [s for s in value.split(",") if s]
        return tuple(int(v) for v in value)
    proto = getattr(RunConfig, name)
    if isinstance(proto, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(proto, int):
        return int(value)
    if isinstance(proto, float):
        return float(value)
    if value is None:
        return None
    return str(value)


def load_config(flag_values: dict) -> RunConfig:
    """Merge defaults <- $CROSSWALK_CONFIG file <- explicit flags."""
    cfg = RunConfig()
    path = os.environ.get(CONFIG_ENV_VAR)
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for k, v in raw.items():
            if k not in _FIELD_NAMES:
                raise ConfigError(f"unknown config key {k!r} in {path}")
            cfg = replace(cfg, **{k: _coerce(k, v)})
    updates = {}
    for k, v in flag_values.items():
        if v is None:
            continue
        if k not in _FIELD_NAMES:
            raise ConfigError(f"unknown config field {k!r}")
        updates[k] = _coerce(k, v)
    if updates:
        cfg = replace(cfg, **updates)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.trials_per_sg < 1:
        raise ConfigError("trials must be >= 1")
    if not cfg.scenarios:
        raise ConfigError("at least one scenario required")
    if cfg.workers < 0:
        raise ConfigError("workers must be >= 0")
    if not 0.0 <= cfg.delta <= 1.0:
        raise ConfigError("delta must be in [0, 1]")
    if not cfg.model.startswith(("builtin:", "remote:")):
        raise ConfigError(f"unknown model spec {cfg.model!r}")


def load_oracle_config(path: str | None) -> NoisyOracleConfig:
    """Read a noisy-oracle spec file, or fall back to the default mix.

    Schema: {"confusion": 5x5, and either "confidence": 5x5 of
    [mean, half_width] or "confidence_mean"/"confidence_half_width"
    scalars, plus optional "extraneous_floor"}.
    """
    if path is None:
        return NoisyOracleConfig.make(DEFAULT_ORACLE_CONFUSION)
    raw = json.loads(Path(path).read_text())
    confusion = raw["confusion"]
    floor = float(raw.get("extraneous_floor", 0.0))
    if "confidence" in raw:
        conf = tuple(
            tuple((float(c[0]), float(c[1])) for c in row) for row in raw["confidence"]
        )
        c5 = tuple(tuple(float(v) for v in row) for row in confusion)
        return NoisyOracleConfig(c5, conf, floor)
    return NoisyOracleConfig.make(
        confusion,
        confidence_mean=float(raw.get("confidence_mean", 0.85)),
        confidence_half_width=float(raw.get("confidence_half_width", 0.10)),
        extraneous_floor=floor,
    )
