"""Built-in detector and classifier plugins, plus their oracle variants.

Two families:

* Reference models do real work on pixels: background-differencing
  detection and a trajectory-template gesture classifier.  They are simple
  but honest; accuracy comes from the benchmark, not from peeking at truth.

* Oracle models know the trial truth and emit configurable statistics
  (noisy confusion draws, injectable detector misses).  They exist to
  validate the evaluation machinery end to end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .pipeline import (
    BBox,
    N_MODEL_CLASSES,
    PipelineConfig,
    crop_upper_body,
    downscale_for_pd,
    scale_bbox,
    validate_scores,
)
from .render import Frame, render_background, render_frame, silhouette_bounds
from .rng import STREAM_CLASSIFIER, STREAM_DETECTOR, SplitMix64Stream, mix64
from .scenario import (
    CameraModel,
    GestureClass,
    ScenarioInstance,
    build_scenario,
    jitter_stream,
    pose_at,
)


class DetectorPlugin(Protocol):
    def detect(self, frame: Frame) -> list[BBox]: ...


class ClassifierPlugin(Protocol):
    def classify(self, clip: np.ndarray) -> np.ndarray: ...


class PluginFailure(RuntimeError):
    """A model plugin broke its contract or its transport failed."""


# ---------- reference detector ----------

DIFF_THRESHOLD = 25
MIN_AREA_PX = 25


def reference_detect(
    frame: Frame, background: Frame | np.ndarray, min_area_px: int = MIN_AREA_PX
) -> list[BBox]:
    """Background differencing: boxes of connected changed regions.

    The per-pixel change metric is the max channel absolute difference
    thresholded at DIFF_THRESHOLD; components are 8-connected and filtered
    by pixel count, largest first.
    """
    bg = background.to_array() if isinstance(background, Frame) else background
    arr = frame.to_array()
    if bg.shape != arr.shape:
        raise ValueError(f"background {bg.shape} does not match frame {arr.shape}")
    diff = np.abs(arr.astype(np.int16) - bg.astype(np.int16)).max(axis=2)
    mask = diff >= DIFF_THRESHOLD
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return []
    sizes = np.bincount(labels.ravel())
    boxes = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or sizes[lab] < min_area_px:
            continue
        ys, xs = sl
        boxes.append((int(sizes[lab]), BBox(xs.start, ys.start, xs.stop, ys.stop)))
    boxes.sort(key=lambda t: (-t[0], t[1].x0, t[1].y0))
    return [b for _, b in boxes]


class ReferenceDetector:
    """Detector plugin bound to one trial's pedestrian-free background.

    The background must match the frames the detector will see, i.e. it is
    rendered at the trial's lighting scale and downscaled like the input.
    """

    def __init__(self, background: Frame | np.ndarray, min_area_px: int = MIN_AREA_PX):
        self._bg = background.to_array() if isinstance(background, Frame) else background
        self._min_area = min_area_px

    def detect(self, frame: Frame) -> list[BBox]:
        return reference_detect(frame, self._bg, self._min_area)


def pd_background(camera: CameraModel, lighting_scale: float, pd_scale: float) -> np.ndarray:
    """The background as the detector sees it: lit, then downscaled."""
    full = render_background(camera, lighting_scale)
    bg_frame = Frame(0, camera.width_px, camera.height_px, full.tobytes(), 0.0, 0.0)
    return downscale_for_pd(bg_frame, pd_scale).to_array()


# ---------- oracle detector ----------

class OracleDetector:
    """Geometry-true detector: computes the figure's box analytically.

    Never misses by accident; misses are injected with miss_rate, drawn
    from the trial's detector stream (one draw per detect call).
    """

    def __init__(self, instance: ScenarioInstance, miss_rate: float = 0.0):
        if not 0.0 <= miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        self._instance = instance
        self._miss_rate = miss_rate
        self._stream = SplitMix64Stream(mix64(instance.trial_seed, STREAM_DETECTOR))

    def detect(self, frame: Frame) -> list[BBox]:
        u = self._stream.random()
        if u < self._miss_rate:
            return []
        inst = self._instance
        pose = pose_at(inst, frame.index, jitter_stream(inst, frame.index))
        bounds = silhouette_bounds(inst, pose, inst.camera)
        if bounds is None:
            return []
        # silhouette bounds are in full camera pixels; the detector answers
        # in its input frame's grid
        sx = frame.width_px / inst.camera.width_px
        sy = frame.height_px / inst.camera.height_px
        x0 = max(0, int(math.floor(bounds[0] * sx)))
        y0 = max(0, int(math.floor(bounds[1] * sy)))
        x1 = min(frame.width_px, int(math.ceil(bounds[2] * sx)) + 1)
        y1 = min(frame.height_px, int(math.ceil(bounds[3] * sy)) + 1)
        if x1 <= x0 or y1 <= y0:
            return []
        return [BBox(x0, y0, x1, y1)]


# ---------- template classifier ----------

# Foreground = pedestrian pixels.  The figure color is strongly
# red-dominant under the whole lighting range while both background bands
# are not, so a ratio test is lighting-invariant.
_FG_MIN_RED = 60
_FG_RATIO = 1.8

TEMPLATE_ALPHA = 8.0
_EXTRANEOUS_SCORE = 0.01


def foreground_mask(img: np.ndarray) -> np.ndarray:
    r = img[..., 0].astype(np.int32)
    g = img[..., 1].astype(np.int32)
    b = img[..., 2].astype(np.int32)
    return (r >= _FG_MIN_RED) & (10 * r >= int(_FG_RATIO * 10) * g) & (10 * r >= int(_FG_RATIO * 10) * b)


def clip_features(clip: np.ndarray) -> np.ndarray:
    """Per-frame (cx, cy) centroid of foreground in the clip's upper half.

    Coordinates are normalized to the crop; frames with no foreground sit
    at the neutral (0.5, 0.5).  Returns (t, 2) float64.
    """
    t, h, w = clip.shape[:3]
    half = max(1, h // 2)
    feats = np.empty((t, 2), dtype=np.float64)
    for i in range(t):
        mask = foreground_mask(clip[i, :half])
        ys, xs = np.nonzero(mask)
        if xs.size == 0:
            feats[i] = (0.5, 0.5)
        else:
            feats[i, 0] = (xs.mean() + 0.5) / w
            feats[i, 1] = (ys.mean() + 0.5) / half
    return feats


@dataclass(frozen=True)
class TemplateBank:
    """Reference feature trajectories, one per gesture class.

    Each trajectory covers track frames 0..duration (inclusive of the
    clamped frame after the last keyframe) as rendered jitter-free in
    scenario 1 and pushed through the same crop/resize path the live
    pipeline uses.
    """

    trajectories: tuple[tuple[GestureClass, np.ndarray], ...]

    def get(self) -> dict[GestureClass, np.ndarray]:
        return dict(self.trajectories)


def build_template_bank(
    width_px: int,
    height_px: int,
    fov_deg: float,
    config: PipelineConfig,
) -> TemplateBank:
    """Render canonical jitter-free executions and extract trajectories.

    The box comes from the reference detector on the final frame, exactly
    as at run time, so a live jitter-free clip reproduces a template
    subwindow bit for bit.
    """
    trajs = []
    for g in GestureClass:
        inst = build_scenario(
            1, g, master_seed=0, trial_index=0,
            width_px=width_px, height_px=height_px, fov_deg=fov_deg,
            jitter_amplitude_rad=0.0,
        )
        cam = inst.camera
        background = render_background(cam, 1.0)
        n = inst.track.duration_frames
        frames = [
            render_frame(inst, i, cam, 1.0, background=background) for i in range(n + 1)
        ]
        pd_frame = downscale_for_pd(frames[n], config.pd_scale)
        bg = pd_background(cam, 1.0, config.pd_scale)
        boxes = reference_detect(pd_frame, bg)
        if not boxes:
            raise PluginFailure(f"template build: no detection for {g.value}")
        full = scale_bbox(
            boxes[0], (pd_frame.width_px, pd_frame.height_px), (cam.width_px, cam.height_px)
        )
        ub = crop_upper_body(full)
        out_w, out_h = config.gc_input_px
        crops = np.stack(
            [
                _resize_crop(f.to_array(), ub, out_w, out_h)
                for f in frames
            ]
        )
        trajs.append((g, clip_features(crops)))
    return TemplateBank(tuple(trajs))


def _resize_crop(arr: np.ndarray, box: BBox, out_w: int, out_h: int) -> np.ndarray:
    from .imageops import resize_bilinear

    return resize_bilinear(arr[box.y0 : box.y1, box.x0 : box.x1], out_w, out_h)


def template_classify(
    clip: np.ndarray, bank: TemplateBank, class_map: dict[GestureClass, int],
    alpha: float = TEMPLATE_ALPHA,
) -> np.ndarray:
    """Score a clip against each gesture trajectory.

    Both the clip trajectory and each candidate template subwindow are
    mean-centered, then compared by euclidean distance; the best alignment
    over all subwindow offsets wins and the score is exp(-alpha * dist).
    An all-background clip therefore degenerates to the constant
    trajectory, which matches the no-gesture template exactly.  Unmapped
    output slots get a small constant floor.
    """
    feats = clip_features(clip)
    t = feats.shape[0]
    feats = feats - feats.mean(axis=0)
    scores = np.full(N_MODEL_CLASSES, _EXTRANEOUS_SCORE, dtype=np.float32)
    for g, traj in bank.get().items():
        n = traj.shape[0]
        if t > n:
            raise ValueError(f"clip of {t} frames exceeds template length {n}")
        best = math.inf
        for s in range(n - t + 1):
            win = traj[s : s + t]
            win = win - win.mean(axis=0)
            d = float(np.sqrt(((feats - win) ** 2).sum()))
            best = min(best, d)
        scores[class_map[g]] = np.float32(math.exp(-alpha * best))
    return validate_scores(scores)


class TemplateClassifier:
    def __init__(self, bank: TemplateBank, class_map: dict[GestureClass, int],
                 alpha: float = TEMPLATE_ALPHA):
        self._bank = bank
        self._map = dict(class_map)
        self._alpha = alpha

    def classify(self, clip: np.ndarray) -> np.ndarray:
        return template_classify(clip, self._bank, self._map, self._alpha)


# ---------- noisy oracle classifier ----------

@dataclass(frozen=True)
class NoisyOracleConfig:
    """Target statistics for the oracle classifier.

    confusion is a row-stochastic 5x5 ndarray over the canonical gesture
    order: row = truth, column = emitted class.  confidence is a 5x5 array
    of (mean, half_width) pairs; the emitted confidence for a (truth,
    predicted) cell is uniform in [mean - half_width, mean + half_width].
    extraneous_floor fills the 22 unmapped output slots.
    """

    confusion: tuple[tuple[float, ...], ...]
    confidence: tuple[tuple[tuple[float, float], ...], ...]
    extraneous_floor: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=np.float64)
        if c.shape != (5, 5):
            raise ValueError("confusion must be 5x5")
        if c.min() < 0.0:
            raise ValueError("confusion entries must be >= 0")
        if np.abs(c.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("confusion rows must sum to 1")
        conf = np.asarray(self.confidence, dtype=np.float64)
        if conf.shape != (5, 5, 2):
            raise ValueError("confidence must be 5x5 (mean, half_width) pairs")
        mean, hw = conf[..., 0], conf[..., 1]
        if (hw < 0).any() or ((mean - hw) < 0.0).any() or ((mean + hw) > 1.0).any():
            raise ValueError("confidence intervals must stay inside [0, 1]")
        if not 0.0 <= self.extraneous_floor <= 1.0:
            raise ValueError("extraneous_floor must be in [0, 1]")

    @staticmethod
    def make(confusion, confidence_mean: float = 0.85, confidence_half_width: float = 0.10,
             extraneous_floor: float = 0.0) -> "NoisyOracleConfig":
        """Build a config from a 5x5 confusion and one shared confidence cell."""
        c = tuple(tuple(float(v) for v in row) for row in np.asarray(confusion, dtype=np.float64))
        cell = (float(confidence_mean), float(confidence_half_width))
        conf = tuple(tuple(cell for _ in range(5)) for _ in range(5))
        return NoisyOracleConfig(c, conf, float(extraneous_floor))

    @staticmethod
    def identity(confidence_mean: float = 1.0, confidence_half_width: float = 0.0) -> "NoisyOracleConfig":
        return NoisyOracleConfig.make(np.eye(5), confidence_mean, confidence_half_width)


def oracle_classify(truth: GestureClass, cfg: NoisyOracleConfig,
                    stream: SplitMix64Stream,
                    class_map: dict[GestureClass, int] | None = None) -> np.ndarray:
    """Emit one 27-class score vector realizing the configured statistics.

    Exactly two stream draws per call, in order: u1 selects the emitted
    class by inverse CDF over the truth row (smallest k with u1 < cumsum),
    u2 places the confidence inside the cell's interval.  The emitted
    class gets the confidence; the other four mapped classes get
    min(conf / 2, (1 - conf) / 4), which keeps the winner strict and the
    residual mass plausible; unmapped slots get the configured floor.
    All values are float32 so a remote round-trip is bit-exact.
    """
    if class_map is None:
        class_map = {g: i for i, g in enumerate(GestureClass)}
    gestures = list(GestureClass)
    row = np.asarray(cfg.confusion[truth.ord], dtype=np.float64)
    cum = np.cumsum(row)
    u1 = stream.random()
    k = int(np.searchsorted(cum, u1, side="right"))
    k = min(k, 4)
    mean, hw = cfg.confidence[truth.ord][k]
    u2 = stream.random()
    conf = np.float32(mean + hw * (2.0 * u2 - 1.0))
    others = np.float32(min(float(conf) / 2.0, (1.0 - float(conf)) / 4.0))
    scores = np.full(N_MODEL_CLASSES, np.float32(cfg.extraneous_floor), dtype=np.float32)
    for g in gestures:
        scores[class_map[g]] = others
    scores[class_map[gestures[k]]] = conf
    return validate_scores(scores)


class NoisyOracleClassifier:
    """Classifier plugin that ignores pixels and samples from the truth row."""

    def __init__(self, truth: GestureClass, cfg: NoisyOracleConfig, trial_seed: int,
                 class_map: dict[GestureClass, int] | None = None):
        self._truth = truth
        self._cfg = cfg
        self._map = class_map
        self._stream = SplitMix64Stream(mix64(trial_seed, STREAM_CLASSIFIER))

    def classify(self, clip: np.ndarray) -> np.ndarray:
        return oracle_classify(self._truth, self._cfg, self._stream, self._map)


# ---------- per-trial model factories ----------
#
# The evaluation runner builds fresh plugins per trial from small picklable
# spec objects, so trials can run in worker processes.  Bare plugin
# instances are also accepted by the runner (wrapped in a constant spec)
# but then force single-process execution.

_BANK_CACHE: dict[tuple, TemplateBank] = {}


def _cached_bank(camera: CameraModel, config: PipelineConfig) -> TemplateBank:
    key = (camera.width_px, camera.height_px, camera.horizontal_fov_deg, config)
    bank = _BANK_CACHE.get(key)
    if bank is None:
        bank = build_template_bank(
            camera.width_px, camera.height_px, camera.horizontal_fov_deg, config
        )
        _BANK_CACHE[key] = bank
    return bank


@dataclass(frozen=True)
class ReferenceDetectorSpec:
    min_area_px: int = MIN_AREA_PX

    def build(self, instance: ScenarioInstance, lighting_scale: float,
              config: PipelineConfig) -> ReferenceDetector:
        bg = pd_background(instance.camera, lighting_scale, config.pd_scale)
        return ReferenceDetector(bg, self.min_area_px)


@dataclass(frozen=True)
class OracleDetectorSpec:
    miss_rate: float = 0.0

    def build(self, instance: ScenarioInstance, lighting_scale: float,
              config: PipelineConfig) -> OracleDetector:
        return OracleDetector(instance, self.miss_rate)


@dataclass(frozen=True)
class TemplateClassifierSpec:
    alpha: float = TEMPLATE_ALPHA

    def build(self, instance: ScenarioInstance, lighting_scale: float,
              config: PipelineConfig) -> TemplateClassifier:
        bank = _cached_bank(instance.camera, config)
        return TemplateClassifier(bank, config.class_index, self.alpha)


@dataclass(frozen=True)
class OracleClassifierSpec:
    cfg: NoisyOracleConfig

    def build(self, instance: ScenarioInstance, lighting_scale: float,
              config: PipelineConfig) -> NoisyOracleClassifier:
        return NoisyOracleClassifier(
            instance.gesture, self.cfg, instance.trial_seed, config.class_index
        )


@dataclass(frozen=True)
class ConstantSpec:
    """Wraps an existing plugin instance; not safe across processes."""

    plugin: object

    def build(self, instance, lighting_scale, config):
        return self.plugin
