"""Procedural frame synthesis and the simulated camera stream.

Frames are stylized but geometrically honest: a flat two-band background
(sky over road, horizon at mid-frame) and a pedestrian drawn as filled
capsules whose endpoints come from the articulated pose projected through
the pinhole camera.  Hard masks, no anti-aliasing, so pixel content is
exactly reproducible.
"""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

import numpy as np

from .rng import STREAM_LIGHTING, mix64, np_stream
from .scenario import CameraModel, GestureClass, JointAngles, ScenarioInstance, jitter_stream, pose_at

SKY_COLOR = (135, 185, 235)
ROAD_COLOR = (95, 95, 100)
PEDESTRIAN_COLOR = (186, 50, 40)

LIGHTING_RANGE = (0.8, 1.2)


class InsufficientFrames(RuntimeError):
    pass


@dataclass(frozen=True)
class Frame:
    """One rendered camera frame.  Pixels are immutable row-major RGB bytes."""

    index: int
    width_px: int
    height_px: int
    pixels: bytes
    sim_time_s: float
    wall_time_s: float
    channels: int = 3

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("frame index must be >= 0")
        if self.channels != 3:
            raise ValueError("frames are RGB (3 channels)")
        expect = self.width_px * self.height_px * self.channels
        if len(self.pixels) != expect:
            raise ValueError(f"pixel buffer has {len(self.pixels)} bytes, expected {expect}")

    def to_array(self) -> np.ndarray:
        """Read-only (h, w, 3) uint8 view over the pixel bytes."""
        a = np.frombuffer(self.pixels, dtype=np.uint8)
        return a.reshape(self.height_px, self.width_px, self.channels)


@dataclass(frozen=True)
class SimClock:
    """Maps the wall-clock frame cadence into simulator time.

    The simulator runs slower than real time by clock_scale, so a frame
    grabbed every wall_interval_s covers wall_interval_s * clock_scale of
    simulated time.
    """

    clock_scale: float
    wall_interval_s: float

    def __post_init__(self):
        if not 0.0 < self.clock_scale <= 1.0:
            raise ValueError("clock_scale must be in (0, 1]")
        if self.wall_interval_s <= 0.0:
            raise ValueError("wall_interval_s must be positive")

    @property
    def frame_interval_sim_s(self) -> float:
        return self.wall_interval_s * self.clock_scale

    @property
    def sim_fps(self) -> float:
        return 1.0 / self.frame_interval_sim_s


def sim_fps(clock_scale: float, wall_interval_s: float) -> float:
    return SimClock(clock_scale, wall_interval_s).sim_fps


class FrameRingBuffer:
    """Bounded frame history with contiguous indices, oldest evicted first.

    Thread-safe: the live streamer pushes while the pipeline reads.
    latest_window returns a snapshot list so later pushes cannot mutate a
    window already handed to the classifier path.
    """

    def __init__(self, capacity: int):
        if capacity < 40:
            raise ValueError("ring buffer capacity must be >= 40")
        self.capacity = capacity
        self._frames: list[Frame] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._frames)

    def push(self, frame: Frame) -> None:
        with self._lock:
            if self._frames and frame.index != self._frames[-1].index + 1:
                raise ValueError(
                    f"non-contiguous push: have head {self._frames[-1].index}, got {frame.index}"
                )
            self._frames.append(frame)
            if len(self._frames) > self.capacity:
                self._frames.pop(0)

    @property
    def head_index(self) -> int | None:
        with self._lock:
            return self._frames[-1].index if self._frames else None

    def latest_window(self, m: int) -> list[Frame]:
        """The newest m frames, ascending by index."""
        if m < 1:
            raise ValueError("window length must be >= 1")
        with self._lock:
            if len(self._frames) < m:
                raise InsufficientFrames(
                    f"buffer holds {len(self._frames)} frames, window needs {m}"
                )
            return list(self._frames[-m:])


# ---------- body plan ----------

# Proportions of standing height H for the capsule figure.  The figure is
# planar and faces the camera; x is the pedestrian's screen-left/right
# offset, y is height above ground.
_HIP_Y = 0.50
_NECK_Y = 0.79
_SHOULDER_Y = 0.76
_SHOULDER_X = 0.105
_HEAD_Y = 0.90
_HEAD_R = 0.075
_TORSO_R = 0.09
_UPPER_ARM = 0.17
_FOREARM = 0.16
_ARM_R = 0.033
_FOOT_X = 0.08
_FOOT_Y = 0.02
_LEG_R = 0.045


def _arm_points(shoulder: np.ndarray, side: float, s_angle: float, e_angle: float, h: float):
    """Elbow and wrist for one arm.

    side is +1 for the figure's right arm (drawn toward screen +x) and -1
    for the left.  At angle 0 the arm hangs straight down; positive shoulder
    angles swing the arm outward/up in the figure plane, and the elbow angle
    bends the forearm further in the same rotational sense, so the left arm
    is an exact mirror of the right.
    """
    ux = side * math.sin(s_angle)
    uy = -math.cos(s_angle)
    elbow = shoulder + h * _UPPER_ARM * np.array([ux, uy])
    f_angle = s_angle + e_angle
    fx = side * math.sin(f_angle)
    fy = -math.cos(f_angle)
    wrist = elbow + h * _FOREARM * np.array([fx, fy])
    return elbow, wrist


def skeleton_capsules(pose: JointAngles, height_m: float) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Figure-local capsules [(p0, p1, radius_m)]; p = (lateral, up) meters."""
    h = height_m
    hip = np.array([0.0, _HIP_Y * h])
    neck = np.array([0.0, _NECK_Y * h])
    head = np.array([0.0, _HEAD_Y * h])
    sh_r = np.array([_SHOULDER_X * h, _SHOULDER_Y * h])
    sh_l = np.array([-_SHOULDER_X * h, _SHOULDER_Y * h])
    foot_r = np.array([_FOOT_X * h, _FOOT_Y * h])
    foot_l = np.array([-_FOOT_X * h, _FOOT_Y * h])

    caps = [
        (hip, neck, _TORSO_R * h),
        (head, head, _HEAD_R * h),
        (hip, foot_r, _LEG_R * h),
        (hip, foot_l, _LEG_R * h),
    ]
    elbow_r, wrist_r = _arm_points(sh_r, +1.0, pose.rs, pose.re, h)
    elbow_l, wrist_l = _arm_points(sh_l, -1.0, pose.ls, pose.le, h)
    caps.append((sh_r, elbow_r, _ARM_R * h))
    caps.append((elbow_r, wrist_r, _ARM_R * h))
    caps.append((sh_l, elbow_l, _ARM_R * h))
    caps.append((elbow_l, wrist_l, _ARM_R * h))
    return caps


def _scaled_colors(lighting_scale: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 0.0 < lighting_scale <= 2.0:
        raise ValueError(f"lighting_scale must be in (0, 2], got {lighting_scale}")

    def scale(c):
        v = np.floor(np.asarray(c, dtype=np.float64) * lighting_scale + 0.5)
        return np.clip(v, 0, 255).astype(np.uint8)

    return scale(SKY_COLOR), scale(ROAD_COLOR), scale(PEDESTRIAN_COLOR)


def render_background(camera: CameraModel, lighting_scale: float = 1.0) -> np.ndarray:
    """(h, w, 3) uint8 background: sky band above the mid-frame horizon,
    road band below."""
    sky, road, _ = _scaled_colors(lighting_scale)
    img = np.empty((camera.height_px, camera.width_px, 3), dtype=np.uint8)
    horizon = camera.height_px // 2
    img[:horizon] = sky
    img[horizon:] = road
    return img


def _capsules_px(instance: ScenarioInstance, pose: JointAngles, camera: CameraModel):
    """Project the figure's capsules to pixel space.

    Returns [(p0_px, p1_px, radius_px)] for capsules fully in front of the
    camera; capsules behind the image plane are dropped.
    """
    px, py, pz = instance.pedestrian_position
    half_w = camera.width_px / 2.0
    half_h = camera.height_px / 2.0
    tan_h = camera.tan_half_fov_h
    tan_v = camera.tan_half_fov_v
    focal = camera.focal_px
    to_cam = camera.world_to_cam
    out = []
    for a, b, r in skeleton_capsules(pose, instance.pedestrian_height_m):
        pts = []
        ok = True
        min_z = math.inf
        for p in (a, b):
            x, y, z = to_cam((px + p[0], py + p[1], pz))
            if z <= 0.0:
                ok = False
                break
            pts.append((half_w * (1.0 + x / (z * tan_h)), half_h * (1.0 - y / (z * tan_v))))
            min_z = min(min_z, z)
        if not ok:
            continue
        out.append((pts[0], pts[1], r * focal / min_z))
    return out


def _draw_figure(img: np.ndarray, capsules, color: np.ndarray) -> None:
    """Fill the union of pixel-space capsules in one vectorized pass.

    A pixel (center at integer coordinates) is filled when its distance to
    any capsule's segment is within that capsule's radius.
    """
    if not capsules:
        return
    h, w = img.shape[:2]
    p0 = np.array([c[0] for c in capsules], dtype=np.float64)
    p1 = np.array([c[1] for c in capsules], dtype=np.float64)
    r = np.array([c[2] for c in capsules], dtype=np.float64)
    x_lo = max(0, int(math.floor((np.minimum(p0[:, 0], p1[:, 0]) - r).min())))
    x_hi = min(w, int(math.ceil((np.maximum(p0[:, 0], p1[:, 0]) + r).max())) + 1)
    y_lo = max(0, int(math.floor((np.minimum(p0[:, 1], p1[:, 1]) - r).min())))
    y_hi = min(h, int(math.ceil((np.maximum(p0[:, 1], p1[:, 1]) + r).max())) + 1)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    xs = np.arange(x_lo, x_hi, dtype=np.float64)
    ys = np.arange(y_lo, y_hi, dtype=np.float64)
    # relative coordinates per capsule: (k, y, x)
    rx = xs[None, None, :] - p0[:, 0, None, None]
    ry = ys[None, :, None] - p0[:, 1, None, None]
    d = p1 - p0
    seg2 = (d * d).sum(axis=1)
    safe = np.where(seg2 > 0.0, seg2, 1.0)
    t = (rx * d[:, 0, None, None] + ry * d[:, 1, None, None]) / safe[:, None, None]
    np.clip(t, 0.0, 1.0, out=t)
    ex = rx - t * d[:, 0, None, None]
    ey = ry - t * d[:, 1, None, None]
    hit = (ex * ex + ey * ey <= (r * r)[:, None, None]).any(axis=0)
    img[y_lo:y_hi, x_lo:x_hi][hit] = color


def render_pose(
    instance: ScenarioInstance,
    pose: JointAngles,
    camera: CameraModel,
    lighting_scale: float,
    background: np.ndarray | None = None,
) -> np.ndarray:
    """Rasterize one pose over the background; returns (h, w, 3) uint8."""
    if background is None:
        img = render_background(camera, lighting_scale)
    else:
        img = background.copy()
    _, _, ped = _scaled_colors(lighting_scale)
    _draw_figure(img, _capsules_px(instance, pose, camera), ped)
    return img


def render_frame(
    instance: ScenarioInstance,
    frame_index: int,
    camera: CameraModel,
    lighting_scale: float = 1.0,
    *,
    clock: SimClock | None = None,
    background: np.ndarray | None = None,
) -> Frame:
    """Deterministically render the frame at frame_index.

    Pose jitter is drawn from the per-frame jitter stream, so rendering the
    same index twice (in any order, in any process) yields identical bytes.
    An optional prescaled background array skips rebuilding the bands.
    """
    pose = pose_at(instance, frame_index, jitter_stream(instance, frame_index))
    img = render_pose(instance, pose, camera, lighting_scale, background)
    interval = clock.frame_interval_sim_s if clock else 0.0
    wall = clock.wall_interval_s if clock else 0.0
    return Frame(
        index=frame_index,
        width_px=camera.width_px,
        height_px=camera.height_px,
        pixels=img.tobytes(),
        sim_time_s=frame_index * interval,
        wall_time_s=frame_index * wall,
    )


def silhouette_bounds(
    instance: ScenarioInstance, pose: JointAngles, camera: CameraModel
) -> tuple[float, float, float, float] | None:
    """Analytic pixel-space bounds (x0, y0, x1, y1) of the figure.

    Conservative union of per-capsule bounds (endpoint projections padded by
    the projected radius).  None when the figure is behind the camera.
    """
    caps = _capsules_px(instance, pose, camera)
    if not caps:
        return None
    x0 = y0 = math.inf
    x1 = y1 = -math.inf
    for p0, p1, r in caps:
        x0 = min(x0, p0[0] - r, p1[0] - r)
        x1 = max(x1, p0[0] + r, p1[0] + r)
        y0 = min(y0, p0[1] - r, p1[1] - r)
        y1 = max(y1, p0[1] + r, p1[1] + r)
    return (x0, y0, x1, y1)


def draw_lighting(trial_seed: int, enabled: bool) -> float:
    """Per-trial lighting scale in [0.8, 1.2], or exactly 1.0 when disabled."""
    if not enabled:
        return 1.0
    rng = np_stream(mix64(trial_seed, STREAM_LIGHTING))
    lo, hi = LIGHTING_RANGE
    return float(rng.uniform(lo, hi))


def write_ppm(frame: Frame, path) -> None:
    """Binary PPM (P6) dump, one file per frame."""
    header = f"P6\n{frame.width_px} {frame.height_px}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(frame.pixels)


def read_ppm(path) -> tuple[int, int, bytes]:
    """Read back a P6 file written by write_ppm; returns (w, h, pixels)."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("expected 8-bit PPM")
    pixels = parts[3]
    if len(pixels) != w * h * 3:
        raise ValueError("truncated PPM payload")
    return w, h, pixels


def stream_frames(
    instance: ScenarioInstance,
    camera: CameraModel,
    clock: SimClock,
    count: int,
    *,
    lighting_scale: float = 1.0,
    fast_forward: bool = True,
    on_frame=None,
):
    """Generate frames 0..count-1 in order, optionally paced in real time.

    In paced mode each frame is released one wall_interval_s after the
    previous one (deadline-based, so pacing error does not accumulate).
    Frame bytes are identical in both modes.
    """
    background = render_background(camera, lighting_scale)
    start = time.monotonic()
    for i in range(count):
        if not fast_forward:
            deadline = start + i * clock.wall_interval_s
            delay = deadline - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        frame = render_frame(
            instance, i, camera, lighting_scale, clock=clock, background=background
        )
        if on_frame is not None:
            on_frame(frame)
        yield frame
