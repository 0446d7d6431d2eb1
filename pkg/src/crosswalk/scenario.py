"""World model: scenarios, gesture tracks, camera geometry, pose sampling.

Scenario instances are pure values.  All geometry lives in a right-handed
camera frame: x right, y up, z forward (optical axis).  World coordinates
use the same axes with the origin on the ground under the ego vehicle's
camera; scenario placements are defined in data/scenarios.json.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from importlib import resources

import numpy as np

from .rng import STREAM_JITTER, mix64, np_stream, trial_seed as _trial_seed


class GestureClass(Enum):
    """The five roadway gesture classes, in canonical ordinal order."""

    GO_FORWARD = "go_forward"
    STOP = "stop"
    GO_RIGHT = "go_right"
    GO_LEFT = "go_left"
    NO_GESTURE = "no_gesture"

    @property
    def ord(self) -> int:
        return _GESTURE_ORD[self]


_GESTURE_ORD = {g: i for i, g in enumerate(GestureClass)}

# Which gestures make sense per scenario: an officer directing traffic (1)
# uses all five; crossing / hailing / distress scenarios (2-4) admit only
# go-forward, stop, and the no-gesture control.
ADMISSIBLE: dict[int, tuple[GestureClass, ...]] = {
    1: tuple(GestureClass),
    2: (GestureClass.GO_FORWARD, GestureClass.STOP, GestureClass.NO_GESTURE),
    3: (GestureClass.GO_FORWARD, GestureClass.STOP, GestureClass.NO_GESTURE),
    4: (GestureClass.GO_FORWARD, GestureClass.STOP, GestureClass.NO_GESTURE),
}

SCENARIO_IDS = (1, 2, 3, 4)


class InadmissibleGesture(ValueError):
    pass


class UnknownScenario(ValueError):
    pass


def admissible_pairs(scenarios=SCENARIO_IDS) -> tuple[tuple[int, GestureClass], ...]:
    """All (scenario, gesture) pairs in canonical run order."""
    pairs = []
    for sid in sorted(scenarios):
        if sid not in ADMISSIBLE:
            raise UnknownScenario(f"unknown scenario id {sid}")
        for g in ADMISSIBLE[sid]:
            pairs.append((sid, g))
    return tuple(pairs)


@dataclass(frozen=True)
class JointAngles:
    """Arm pose, radians from arms-at-rest: ls/rs shoulder, le/re elbow."""

    ls: float
    le: float
    rs: float
    re: float

    def as_array(self) -> np.ndarray:
        return np.array([self.ls, self.le, self.rs, self.re], dtype=np.float64)


@dataclass(frozen=True)
class Keyframe:
    frame: int
    joints: JointAngles


@dataclass(frozen=True)
class GestureTrack:
    gesture: GestureClass
    duration_frames: int
    keyframes: tuple[Keyframe, ...]

    def __post_init__(self):
        if self.duration_frames < 1:
            raise ValueError("duration_frames must be >= 1")
        if not self.keyframes:
            raise ValueError("track needs at least one keyframe")
        ids = [k.frame for k in self.keyframes]
        if ids != sorted(set(ids)):
            raise ValueError("keyframes must be sorted by frame with no duplicates")
        if ids[0] != 0:
            raise ValueError("first keyframe must be at frame 0")
        if ids[-1] > self.duration_frames - 1:
            raise ValueError("keyframe beyond track duration")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a horizontal FOV; vertical FOV follows from the
    aspect ratio (square pixels)."""

    width_px: int
    height_px: int
    horizontal_fov_deg: float
    position: tuple[float, float, float] = (0.0, 1.1, 0.0)
    yaw_deg: float = 0.0

    def __post_init__(self):
        if self.width_px < 16 or self.height_px < 16:
            raise ValueError("camera resolution must be at least 16x16")
        if not 0.0 < self.horizontal_fov_deg < 180.0:
            raise ValueError("horizontal FOV must be in (0, 180) degrees")

    @cached_property
    def tan_half_fov_h(self) -> float:
        return math.tan(math.radians(self.horizontal_fov_deg) / 2.0)

    @cached_property
    def tan_half_fov_v(self) -> float:
        # Square pixels: the image plane scales with the pixel grid.
        return self.tan_half_fov_h * self.height_px / self.width_px

    @property
    def vertical_fov_deg(self) -> float:
        return math.degrees(2.0 * math.atan(self.tan_half_fov_v))

    @cached_property
    def focal_px(self) -> float:
        return (self.width_px / 2.0) / self.tan_half_fov_h

    def world_to_cam(self, point) -> tuple[float, float, float]:
        dx = point[0] - self.position[0]
        dy = point[1] - self.position[1]
        dz = point[2] - self.position[2]
        if self.yaw_deg == 0.0:
            return (dx, dy, dz)
        c = math.cos(math.radians(self.yaw_deg))
        s = math.sin(math.radians(self.yaw_deg))
        # Yaw turns the camera toward +x; camera-frame coords counter-rotate.
        return (c * dx - s * dz, dy, s * dx + c * dz)


def project(camera: CameraModel, world_point) -> tuple[float, float] | None:
    """World point to pixel (u, v); None when at or behind the image plane."""
    x, y, z = camera.world_to_cam(world_point)
    if z <= 0.0:
        return None
    u = (camera.width_px / 2.0) * (1.0 + x / (z * camera.tan_half_fov_h))
    v = (camera.height_px / 2.0) * (1.0 - y / (z * camera.tan_half_fov_v))
    return (u, v)


@dataclass(frozen=True)
class ScenarioInstance:
    """One concrete trial setup: a pedestrian performing one gesture track
    in front of a parameterized camera, with a per-trial seed."""

    scenario: int
    gesture: GestureClass
    camera: CameraModel
    pedestrian_position: tuple[float, float, float]
    pedestrian_height_m: float
    track: GestureTrack
    trial_seed: int
    jitter_amplitude_rad: float = 0.05

    def __post_init__(self):
        if self.scenario not in ADMISSIBLE:
            raise UnknownScenario(f"unknown scenario id {self.scenario}")
        if self.gesture not in ADMISSIBLE[self.scenario]:
            raise InadmissibleGesture(
                f"gesture {self.gesture.value} not admissible in scenario {self.scenario}"
            )
        if self.pedestrian_height_m <= 0:
            raise ValueError("pedestrian height must be positive")
        if self.jitter_amplitude_rad < 0:
            raise ValueError("jitter amplitude must be >= 0")


def _data_text(rel: str) -> str:
    return resources.files("crosswalk").joinpath("data").joinpath(rel).read_text()


@lru_cache(maxsize=None)
def load_track(gesture: GestureClass) -> GestureTrack:
    raw = json.loads(_data_text(f"gestures/{gesture.value}.json"))
    if raw["class"] != gesture.value:
        raise ValueError(f"track file class mismatch for {gesture.value}")
    kfs = tuple(
        Keyframe(int(k["frame"]), JointAngles(**{j: float(k["joints"][j]) for j in ("ls", "le", "rs", "re")}))
        for k in raw["keyframes"]
    )
    track = GestureTrack(gesture, int(raw["duration_frames"]), kfs)
    if gesture is GestureClass.NO_GESTURE:
        first = track.keyframes[0].joints
        for k in track.keyframes:
            if k.joints != first:
                raise ValueError("no_gesture track must hold a constant pose")
    return track


@lru_cache(maxsize=None)
def _scenario_geometry() -> dict:
    return json.loads(_data_text("scenarios.json"))


def scenario_geometry(scenario: int) -> dict:
    geo = _scenario_geometry()
    key = str(scenario)
    if key not in geo:
        raise UnknownScenario(f"unknown scenario id {scenario}")
    return geo[key]


def build_scenario(
    scenario: int,
    gesture: GestureClass,
    master_seed: int,
    trial_index: int,
    *,
    width_px: int = 1280,
    height_px: int = 480,
    fov_deg: float = 50.0,
    jitter_amplitude_rad: float = 0.05,
) -> ScenarioInstance:
    """Assemble the ScenarioInstance for one trial.

    Placement geometry comes from data/scenarios.json; the camera intrinsics
    are run parameters.  The trial seed is derived once here and everything
    downstream (jitter, temporal sampling, lighting, oracle draws) hangs off
    it, so a record is reproducible from (master_seed, scenario, gesture,
    trial_index) alone.
    """
    if scenario not in ADMISSIBLE:
        raise UnknownScenario(f"unknown scenario id {scenario}")
    if gesture not in ADMISSIBLE[scenario]:
        raise InadmissibleGesture(
            f"gesture {gesture.value} not admissible in scenario {scenario}"
        )
    geo = scenario_geometry(scenario)
    cam = CameraModel(
        width_px=width_px,
        height_px=height_px,
        horizontal_fov_deg=fov_deg,
        position=tuple(float(v) for v in geo["camera"]["position"]),
        yaw_deg=float(geo["camera"].get("yaw_deg", 0.0)),
    )
    seed = _trial_seed(master_seed, scenario, gesture.ord, trial_index)
    return ScenarioInstance(
        scenario=scenario,
        gesture=gesture,
        camera=cam,
        pedestrian_position=tuple(float(v) for v in geo["pedestrian"]["position"]),
        pedestrian_height_m=float(geo["pedestrian"]["height_m"]),
        track=load_track(gesture),
        trial_seed=seed,
        jitter_amplitude_rad=jitter_amplitude_rad,
    )


def jitter_stream(instance: ScenarioInstance, frame_index: int) -> np.random.Generator:
    """Per-frame jitter stream; depends only on trial seed and frame index."""
    return np_stream(mix64(instance.trial_seed, STREAM_JITTER, frame_index))


def pose_at(instance: ScenarioInstance, frame_index: int, rng: np.random.Generator) -> JointAngles:
    """Joint angles at a frame: linear keyframe interpolation plus jitter.

    Frames past the last keyframe clamp to its pose.  Jitter draws four
    uniforms in [-1, 1] per call (always, so streams stay aligned when the
    amplitude is zero) and scales them by the instance amplitude.
    """
    if frame_index < 0:
        raise ValueError("frame_index must be >= 0")
    kfs = instance.track.keyframes
    if frame_index >= kfs[-1].frame:
        base = kfs[-1].joints.as_array()
    else:
        # bracketing pair: last keyframe at or before, first strictly after
        lo = kfs[0]
        hi = kfs[-1]
        for k in kfs:
            if k.frame <= frame_index:
                lo = k
            else:
                hi = k
                break
        t = (frame_index - lo.frame) / (hi.frame - lo.frame)
        base = (1.0 - t) * lo.joints.as_array() + t * hi.joints.as_array()
    unit = rng.uniform(-1.0, 1.0, size=4)
    vals = base + instance.jitter_amplitude_rad * unit
    return JointAngles(*[float(v) for v in vals])
