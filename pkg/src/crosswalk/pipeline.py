"""The two-stage recognition pipeline.

A cheap pedestrian detector runs on every stride_s-th frame over a
downscaled copy of the camera image.  When it fires and the frame history
is warm, the classifier path kicks in: scale the winning box back up,
tighten it to the upper body, sample sample_t consecutive frames from the
last window_m, crop and resize them, and ask the gesture classifier for
scores over the full 27-class output space.  Scores outside the five
roadway classes are masked out (no renormalization) and the winner is
returned with its raw confidence; the decision threshold is applied later,
at evaluation time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imageops import resize_bilinear, resize_bilinear_batch
from .render import Frame, FrameRingBuffer, InsufficientFrames
from .scenario import GestureClass

N_MODEL_CLASSES = 27


class DegenerateBox(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box: columns [x0, x1), rows [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError("box origin must be non-negative")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def fits(self, width_px: int, height_px: int) -> bool:
        return self.x1 <= width_px and self.y1 <= height_px


DEFAULT_CLASS_MAP: dict[GestureClass, int] = {g: i for i, g in enumerate(GestureClass)}

# Upper-body crop: fraction of box extent removed per side, as exact
# ratios (numerator, denominator) so floor arithmetic never suffers float
# rounding.  At least one pixel is removed per side.
CROP_TOP = (1, 7)
CROP_BOTTOM = (1, 3)
CROP_LEFT = (1, 9)
CROP_RIGHT = (1, 5)


@dataclass(frozen=True)
class PipelineConfig:
    stride_s: int = 5
    pd_input_frames_n: int = 1
    window_m: int = 40
    sample_t: int = 32
    gc_input_px: tuple[int, int] = (112, 112)
    pd_scale: float = 0.6
    class_map: tuple[tuple[GestureClass, int], ...] = tuple(DEFAULT_CLASS_MAP.items())
    confidence_threshold_delta: float = 0.40

    def __post_init__(self):
        if self.stride_s < 1:
            raise ValueError("stride_s must be >= 1")
        if self.pd_input_frames_n != 1:
            raise ValueError("detector consumes exactly one frame")
        if self.window_m < 1:
            raise ValueError("window_m must be >= 1")
        if not 1 <= self.sample_t <= self.window_m:
            raise ValueError("sample_t must be in [1, window_m]")
        if not 0.0 < self.pd_scale <= 1.0:
            raise ValueError("pd_scale must be in (0, 1]")
        if not 0.0 <= self.confidence_threshold_delta <= 1.0:
            raise ValueError("delta must be in [0, 1]")
        w, h = self.gc_input_px
        if w < 1 or h < 1:
            raise ValueError("gc input size must be positive")
        idx = [i for _, i in self.class_map]
        if len(self.class_map) != len(GestureClass) or set(g for g, _ in self.class_map) != set(GestureClass):
            raise ValueError("class_map must cover exactly the five gesture classes")
        if len(set(idx)) != len(idx):
            raise ValueError("class_map indices must be distinct")
        if any(not 0 <= i < N_MODEL_CLASSES for i in idx):
            raise ValueError(f"class_map indices must lie in [0, {N_MODEL_CLASSES})")

    @property
    def class_index(self) -> dict[GestureClass, int]:
        return dict(self.class_map)


@dataclass(frozen=True)
class GestureDecision:
    predicted: GestureClass
    confidence: float
    raw_scores: tuple[float, ...]
    frame_index: int
    bbox: BBox


def downscale_for_pd(frame: Frame, pd_scale: float) -> Frame:
    """Bilinear downscale of a frame for the detector stage.

    Output dimensions are floor(w * pd_scale) x floor(h * pd_scale).
    Timing metadata carries over: it is the same instant, fewer pixels.
    """
    if not 0.0 < pd_scale <= 1.0:
        raise ValueError("pd_scale must be in (0, 1]")
    out_w = int(math.floor(frame.width_px * pd_scale))
    out_h = int(math.floor(frame.height_px * pd_scale))
    if out_w < 1 or out_h < 1:
        raise DegenerateBox("pd_scale collapses the frame to zero pixels")
    if out_w == frame.width_px and out_h == frame.height_px:
        return frame
    arr = resize_bilinear(frame.to_array(), out_w, out_h)
    return Frame(
        index=frame.index,
        width_px=out_w,
        height_px=out_h,
        pixels=arr.tobytes(),
        sim_time_s=frame.sim_time_s,
        wall_time_s=frame.wall_time_s,
    )


def scale_bbox(box: BBox, from_dims: tuple[int, int], to_dims: tuple[int, int]) -> BBox:
    """Map a box between pixel grids with per-axis ratios, rounding half-up.

    Coordinates clamp to the target grid.  If rounding collapses an axis
    (possible only when scaling down), the box is widened back to one pixel
    rather than failing, so callers always get a valid box.
    """
    fw, fh = from_dims
    tw, th = to_dims
    if min(fw, fh, tw, th) < 1:
        raise ValueError("grid dimensions must be positive")
    rx = tw / fw
    ry = th / fh

    def half_up(v: float) -> int:
        return int(math.floor(v + 0.5))

    x0 = min(max(half_up(box.x0 * rx), 0), tw)
    x1 = min(max(half_up(box.x1 * rx), 0), tw)
    y0 = min(max(half_up(box.y0 * ry), 0), th)
    y1 = min(max(half_up(box.y1 * ry), 0), th)
    if x1 <= x0:
        x1 = min(x0 + 1, tw)
        x0 = x1 - 1
    if y1 <= y0:
        y1 = min(y0 + 1, th)
        y0 = y1 - 1
    return BBox(x0, y0, x1, y1)


def _side_cut(extent: int, ratio: tuple[int, int]) -> int:
    num, den = ratio
    return max(1, extent * num // den)


def crop_upper_body(box: BBox) -> BBox:
    """Tighten a full-body box to the upper body.

    Removes 1/7 of the height from the top, 1/3 from the bottom, 1/9 of
    the width from the left and 1/5 from the right (floor arithmetic, at
    least one pixel per side).  Raises DegenerateBox when nothing is left;
    the pipeline treats that as "skip this detection".
    """
    w = box.width
    h = box.height
    x0 = box.x0 + _side_cut(w, CROP_LEFT)
    x1 = box.x1 - _side_cut(w, CROP_RIGHT)
    y0 = box.y0 + _side_cut(h, CROP_TOP)
    y1 = box.y1 - _side_cut(h, CROP_BOTTOM)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBox(f"upper-body crop of {w}x{h} box is empty")
    return BBox(x0, y0, x1, y1)


def temporal_sample(frames: list[Frame], sample_t: int, rng: np.random.Generator) -> list[Frame]:
    """Uniformly pick sample_t CONSECUTIVE frames from the window.

    The start offset is drawn from the rng (one draw per call); with
    len(frames) == sample_t the sample is the window itself (still one
    draw, keeping streams aligned across configurations).
    """
    m = len(frames)
    if sample_t < 1 or sample_t > m:
        raise InsufficientFrames(f"cannot sample {sample_t} frames from window of {m}")
    start = int(rng.integers(0, m - sample_t + 1))
    return frames[start : start + sample_t]


def prepare_gc_input(
    frames: list[Frame], box: BBox, out_size: tuple[int, int] = (112, 112)
) -> np.ndarray:
    """Crop each frame to the box and resize; returns (t, out_h, out_w, 3) uint8."""
    if not frames:
        raise InsufficientFrames("empty clip")
    out_w, out_h = out_size
    for f in frames:
        if not box.fits(f.width_px, f.height_px):
            raise DimensionMismatch(
                f"box ({box.x0},{box.y0},{box.x1},{box.y1}) exceeds frame {f.width_px}x{f.height_px}"
            )
    crops = np.stack([f.to_array()[box.y0 : box.y1, box.x0 : box.x1] for f in frames])
    return resize_bilinear_batch(crops, out_w, out_h)


def validate_scores(scores) -> np.ndarray:
    """Check a classifier output vector: 27 finite floats in [0, 1]."""
    arr = np.asarray(scores, dtype=np.float32)
    if arr.shape != (N_MODEL_CLASSES,):
        raise ValueError(f"scores must have shape ({N_MODEL_CLASSES},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    return arr


def mask_and_argmax(
    scores, class_map: dict[GestureClass, int], delta: float | None = None
) -> tuple[GestureClass, float]:
    """Pick the winning roadway gesture from raw 27-class scores.

    Only the five mapped indices compete; the rest of the vector is
    ignored, with no renormalization.  Ties go to the lowest mapped index.
    delta is accepted for interface symmetry but is NOT applied here: the
    threshold gates decisions at evaluation time, never the argmax.
    """
    arr = validate_scores(scores)
    best: GestureClass | None = None
    best_val = -1.0
    for g, idx in sorted(class_map.items(), key=lambda kv: kv[1]):
        v = float(arr[idx])
        if v > best_val:
            best = g
            best_val = v
    assert best is not None
    return best, best_val


@dataclass
class StepStats:
    """Optional instrumentation for one pipeline step sequence."""

    triggers: int = 0
    warm_triggers: int = 0
    empty_detections: int = 0
    degenerate_crops: int = 0
    decisions: int = 0


def step(
    frame: Frame,
    buffer: FrameRingBuffer,
    detector,
    classifier,
    config: PipelineConfig,
    rng: np.random.Generator,
    stats: StepStats | None = None,
    prepare=prepare_gc_input,
    downscale=downscale_for_pd,
) -> GestureDecision | None:
    """Advance the pipeline by one frame already pushed to the buffer.

    Returns a GestureDecision when the full detect-then-classify path ran,
    None otherwise (off-stride frame, cold buffer, no detection, or a
    detection too small to crop).  prepare and downscale are injection
    points for the resampling stages; any substitute must be extensionally
    equal to the defaults (the evaluation runner passes memoized variants
    for deterministic scenes).
    """
    if buffer.head_index != frame.index:
        raise ValueError("frame must be the buffer head when stepping")
    if frame.index % config.stride_s != 0:
        return None
    if stats is not None:
        stats.triggers += 1

    pd_frame = downscale(frame, config.pd_scale)
    boxes = detector.detect(pd_frame)
    for b in boxes:
        if not isinstance(b, BBox) or not b.fits(pd_frame.width_px, pd_frame.height_px):
            raise ValueError("detector returned a box outside its input frame")
    warm = len(buffer) >= config.window_m
    if stats is not None and warm:
        stats.warm_triggers += 1
    if not boxes:
        if stats is not None:
            stats.empty_detections += 1
        return None
    if not warm:
        return None

    full_box = scale_bbox(
        max(boxes, key=lambda b: b.area),
        (pd_frame.width_px, pd_frame.height_px),
        (frame.width_px, frame.height_px),
    )
    try:
        ub_box = crop_upper_body(full_box)
    except DegenerateBox:
        if stats is not None:
            stats.degenerate_crops += 1
        return None

    window = buffer.latest_window(config.window_m)
    clip_frames = temporal_sample(window, config.sample_t, rng)
    clip = prepare(clip_frames, ub_box, config.gc_input_px)
    raw = validate_scores(classifier.classify(clip))
    predicted, confidence = mask_and_argmax(raw, config.class_index)
    if stats is not None:
        stats.decisions += 1
    return GestureDecision(
        predicted=predicted,
        confidence=confidence,
        raw_scores=tuple(float(v) for v in raw),
        frame_index=frame.index,
        bbox=ub_box,
    )
