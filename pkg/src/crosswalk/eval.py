"""Trial execution and the evaluation protocol.

A run simulates trials_per_sg independent trials for every admissible
(scenario, gesture) pair.  Each trial streams a fresh scenario through the
pipeline in lockstep and stops at the first decision it produces.
Records are totally ordered by (scenario, gesture ordinal, trial index) no
matter how many worker processes executed them.

Scoring treats each scenario-gesture pair as a one-vs-rest problem: its
own trials supply TP/FN and the other gestures of the SAME scenario supply
FP/TN, so a gesture is never scored against frames from scenes it cannot
occur in.  A trial counts as positive for gesture g when the pipeline
predicted g with confidence >= delta.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import models as _models
from .pipeline import PipelineConfig, StepStats, downscale_for_pd, prepare_gc_input, step
from .render import Frame, FrameRingBuffer, SimClock, draw_lighting, render_background, render_frame, write_ppm
from .rng import STREAM_TEMPORAL, mix64, np_stream
from .scenario import (
    ADMISSIBLE,
    GestureClass,
    ScenarioInstance,
    UnknownScenario,
    admissible_pairs,
    build_scenario,
)


class UnknownSG(ValueError):
    pass


class EmptyPositives(ValueError):
    pass


class WrongRowCount(ValueError):
    pass


@dataclass(frozen=True)
class TrialRecord:
    scenario: int
    truth: GestureClass
    trial_index: int
    predicted: GestureClass
    confidence: float
    decision_frame: int
    detector_miss: bool
    not_warm: bool

    def sort_key(self):
        return (self.scenario, self.truth.ord, self.trial_index)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    accuracy: float
    f1: float


@dataclass(frozen=True)
class PRPoint:
    delta: float
    precision: float
    recall: float


@dataclass(frozen=True)
class PRCurve:
    scenario: int
    gesture: GestureClass
    points: tuple[PRPoint, ...]


@dataclass(frozen=True)
class SGRow:
    scenario: int
    gesture: GestureClass
    confusion: ConfusionMatrix
    metrics: Metrics


@dataclass(frozen=True)
class ReportBundle:
    delta: float
    rows: tuple[SGRow, ...]
    macro_f1: float
    macro_accuracy: float


# ---------- trial execution ----------

@dataclass(frozen=True)
class RunPlan:
    """Everything a worker needs to simulate any trial of the run."""

    master_seed: int
    trials_per_sg: int
    scenarios: tuple[int, ...]
    width_px: int
    height_px: int
    fov_deg: float
    config: PipelineConfig
    detector_spec: object
    classifier_spec: object
    jitter_amplitude_rad: float = 0.05
    lighting_variation: bool = True
    clock: SimClock = SimClock(0.14, 0.566)
    frames_per_trial: int = 45
    dump_frames_dir: str | None = None


def _frames_needed(plan: RunPlan) -> int:
    # enough frames that at least one stride tick lands after the buffer
    # warms up: the first trigger index >= window_m, plus slack for misses
    cfg = plan.config
    first_warm = ((cfg.window_m - 1) // cfg.stride_s + 1) * cfg.stride_s
    return max(plan.frames_per_trial, first_warm + 1)


class _TrialContext:
    """Per-process state: render caches valid only for deterministic scenes."""

    def __init__(self, plan: RunPlan):
        self.plan = plan
        self.cacheable = plan.jitter_amplitude_rad == 0.0 and not plan.lighting_variation
        self._frame_cache: dict[tuple, list[Frame]] = {}
        self._bg_cache: dict[tuple, np.ndarray] = {}
        self._clip_cache: dict[tuple, np.ndarray] = {}
        self._pd_cache: dict[tuple, Frame] = {}

    def background(self, instance: ScenarioInstance, lighting: float) -> np.ndarray:
        key = (instance.camera, lighting)
        bg = self._bg_cache.get(key)
        if bg is None:
            bg = render_background(instance.camera, lighting)
            self._bg_cache[key] = bg
        return bg

    def frames(self, instance: ScenarioInstance, lighting: float, count: int) -> list[Frame]:
        if not self.cacheable:
            bg = self.background(instance, lighting)
            return [
                render_frame(instance, i, instance.camera, lighting,
                             clock=self.plan.clock, background=bg)
                for i in range(count)
            ]
        # jitter-free, fixed lighting: all trials of one SG see identical
        # frames, so render once and share (frames are immutable)
        key = (instance.scenario, instance.gesture, instance.camera, count)
        frames = self._frame_cache.get(key)
        if frames is None:
            bg = self.background(instance, lighting)
            frames = [
                render_frame(instance, i, instance.camera, lighting,
                             clock=self.plan.clock, background=bg)
                for i in range(count)
            ]
            self._frame_cache[key] = frames
        return frames

    def make_prepare(self, instance: ScenarioInstance):
        """Clip preparation, memoized when frames are shared across trials.

        In cacheable runs every trial of an SG sees identical frames, so a
        clip is fully determined by (SG, sampled frame range, box); caching
        it is pure memoization with bit-identical results.
        """
        if not self.cacheable:
            return prepare_gc_input
        cache = self._clip_cache

        def prepare(frames, box, out_size):
            key = (
                instance.scenario, instance.gesture,
                frames[0].index, frames[-1].index, box, out_size,
            )
            clip = cache.get(key)
            if clip is None:
                clip = prepare_gc_input(frames, box, out_size)
                clip.flags.writeable = False
                cache[key] = clip
            return clip

        return prepare

    def make_downscale(self, instance: ScenarioInstance):
        """Detector downscale, memoized per shared frame in cacheable runs."""
        if not self.cacheable:
            return downscale_for_pd
        cache = self._pd_cache

        def downscale(frame, pd_scale):
            key = (instance.scenario, instance.gesture, frame.index, pd_scale)
            out = cache.get(key)
            if out is None:
                out = downscale_for_pd(frame, pd_scale)
                cache[key] = out
            return out

        return downscale


def simulate_trial(plan: RunPlan, ctx: _TrialContext, scenario: int,
                   gesture: GestureClass, trial_index: int) -> TrialRecord:
    instance = build_scenario(
        scenario, gesture, plan.master_seed, trial_index,
        width_px=plan.width_px, height_px=plan.height_px, fov_deg=plan.fov_deg,
        jitter_amplitude_rad=plan.jitter_amplitude_rad,
    )
    lighting = draw_lighting(instance.trial_seed, plan.lighting_variation)
    detector = plan.detector_spec.build(instance, lighting, plan.config)
    classifier = plan.classifier_spec.build(instance, lighting, plan.config)
    count = _frames_needed(plan)
    frames = ctx.frames(instance, lighting, count)
    rng = np_stream(mix64(instance.trial_seed, STREAM_TEMPORAL))
    buffer = FrameRingBuffer(capacity=max(40, plan.config.window_m))
    stats = StepStats()
    prepare = ctx.make_prepare(instance)
    downscale = ctx.make_downscale(instance)
    decision = None
    for frame in frames:
        buffer.push(frame)
        d = step(frame, buffer, detector, classifier, plan.config, rng, stats,
                 prepare=prepare, downscale=downscale)
        if d is not None:
            decision = d
            break  # first decision is the trial's verdict
    if plan.dump_frames_dir is not None:
        _dump_trial_frames(plan, scenario, gesture, trial_index, frames)
    if decision is None:
        return TrialRecord(
            scenario=scenario,
            truth=gesture,
            trial_index=trial_index,
            predicted=GestureClass.NO_GESTURE,
            confidence=0.0,
            decision_frame=-1,
            detector_miss=stats.warm_triggers > 0,
            not_warm=stats.warm_triggers == 0,
        )
    return TrialRecord(
        scenario=scenario,
        truth=gesture,
        trial_index=trial_index,
        predicted=decision.predicted,
        confidence=float(decision.confidence),
        decision_frame=decision.frame_index,
        detector_miss=False,
        not_warm=False,
    )


def _dump_trial_frames(plan: RunPlan, scenario: int, gesture: GestureClass,
                       trial_index: int, frames: list[Frame]) -> None:
    d = Path(plan.dump_frames_dir) / f"s{scenario}_{gesture.value}_t{trial_index:05d}"
    d.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_ppm(f, d / f"frame_{f.index:05d}.ppm")


_WORKER_STATE: dict = {}


def _init_worker(plan: RunPlan) -> None:
    _WORKER_STATE["plan"] = plan
    _WORKER_STATE["ctx"] = _TrialContext(plan)


def _run_chunk(chunk: list[tuple[int, int, int]]) -> list[TrialRecord]:
    plan = _WORKER_STATE["plan"]
    ctx = _WORKER_STATE["ctx"]
    gestures = list(GestureClass)
    return [
        simulate_trial(plan, ctx, sid, gestures[g_ord], idx) for sid, g_ord, idx in chunk
    ]


def run_trials(plan: RunPlan, workers: int = 1, progress=None) -> list[TrialRecord]:
    """Execute the full trial grid; records come back in canonical order."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    pairs = admissible_pairs(plan.scenarios)
    schedule = [
        (sid, g.ord, idx)
        for sid, g in pairs
        for idx in range(plan.trials_per_sg)
    ]
    records: list[TrialRecord] = []
    if workers == 1:
        ctx = _TrialContext(plan)
        gestures = list(GestureClass)
        for i, (sid, g_ord, idx) in enumerate(schedule):
            records.append(simulate_trial(plan, ctx, sid, gestures[g_ord], idx))
            if progress is not None and (i + 1) % 500 == 0:
                progress(i + 1, len(schedule))
    else:
        # one chunk per SG keeps per-worker render caches hot
        chunks = [
            schedule[i : i + plan.trials_per_sg]
            for i in range(0, len(schedule), plan.trials_per_sg)
        ]
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(plan,)
        ) as pool:
            done = 0
            for part in pool.map(_run_chunk, chunks):
                records.extend(part)
                done += len(part)
                if progress is not None:
                    progress(done, len(schedule))
    records.sort(key=TrialRecord.sort_key)
    return records


# ---------- scoring ----------

def _check_sg(scenario: int, gesture: GestureClass) -> None:
    if scenario not in ADMISSIBLE or gesture not in ADMISSIBLE[scenario]:
        raise UnknownSG(f"({scenario}, {gesture.value}) is not an admissible pair")


def confusion_at(records: list[TrialRecord], scenario: int, gesture: GestureClass,
                 delta: float) -> ConfusionMatrix:
    """One-vs-rest confusion for one SG at threshold delta.

    Positive prediction: predicted == gesture and confidence >= delta.
    Negative pool: trials of the same scenario with a different truth.
    """
    _check_sg(scenario, gesture)
    tp = fn = fp = tn = 0
    for r in records:
        if r.scenario != scenario:
            continue
        positive = r.predicted is gesture and r.confidence >= delta
        if r.truth is gesture:
            tp += positive
            fn += not positive
        else:
            fp += positive
            tn += not positive
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Standard binary metrics with the usual empty-denominator conventions:
    precision is 1 when nothing was predicted positive, f1 is 0 when both
    precision and recall are 0."""
    if cm.tp + cm.fn == 0:
        raise EmptyPositives("no positive-class trials in the record set")
    precision = 1.0 if cm.tp + cm.fp == 0 else cm.tp / (cm.tp + cm.fp)
    recall = cm.tp / (cm.tp + cm.fn)
    accuracy = (cm.tp + cm.tn) / cm.total
    f1 = 0.0 if precision + recall == 0.0 else 2.0 * precision * recall / (precision + recall)
    return Metrics(precision=precision, recall=recall, accuracy=accuracy, f1=f1)


def pr_sweep(records: list[TrialRecord], scenario: int, gesture: GestureClass,
             k: int = 1000) -> PRCurve:
    """Precision/recall at k evenly spaced thresholds delta_i = i / (k - 1).

    Vectorized but exactly equivalent to calling confusion_at per point.
    """
    _check_sg(scenario, gesture)
    if k < 2:
        raise ValueError("sweep needs at least 2 thresholds")
    is_scenario = [r for r in records if r.scenario == scenario]
    target = np.array([r.truth is gesture for r in is_scenario], dtype=bool)
    pred = np.array([r.predicted is gesture for r in is_scenario], dtype=bool)
    conf = np.array([r.confidence for r in is_scenario], dtype=np.float64)
    n_pos = int(target.sum())
    if n_pos == 0:
        raise EmptyPositives("no positive-class trials in the record set")
    points = []
    for i in range(k):
        delta = i / (k - 1)
        positive = pred & (conf >= delta)
        tp = int((positive & target).sum())
        fp = int((positive & ~target).sum())
        precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
        recall = tp / n_pos
        points.append(PRPoint(delta=delta, precision=precision, recall=recall))
    return PRCurve(scenario=scenario, gesture=gesture, points=tuple(points))


def macro_average(rows: tuple[SGRow, ...] | list[SGRow],
                  expected_rows: int = 14) -> tuple[float, float]:
    """Unweighted mean (f1, accuracy) over the per-SG rows."""
    if len(rows) != expected_rows:
        raise WrongRowCount(f"expected {expected_rows} rows, got {len(rows)}")
    f1 = sum(r.metrics.f1 for r in rows) / len(rows)
    acc = sum(r.metrics.accuracy for r in rows) / len(rows)
    return f1, acc


def build_report(records: list[TrialRecord], delta: float,
                 scenarios=None) -> ReportBundle:
    """Per-SG table plus macro averages at one operating threshold."""
    if scenarios is None:
        scenarios = sorted({r.scenario for r in records})
    rows = []
    for sid, g in admissible_pairs(scenarios):
        cm = confusion_at(records, sid, g, delta)
        rows.append(SGRow(scenario=sid, gesture=g, confusion=cm, metrics=metrics(cm)))
    macro_f1, macro_acc = macro_average(rows, expected_rows=len(rows))
    return ReportBundle(
        delta=delta, rows=tuple(rows), macro_f1=macro_f1, macro_accuracy=macro_acc
    )


# ---------- persistence ----------
#
# All writers emit byte-stable output: sorted keys, fixed field order,
# fixed float formatting.  records.json keeps full float precision (repr)
# so rescoring a saved run reproduces in-memory results exactly; report
# tables round to 6 decimals.

def record_to_obj(r: TrialRecord) -> dict:
    return {
        "scenario": r.scenario,
        "truth": r.truth.value,
        "trial_index": r.trial_index,
        "predicted": r.predicted.value,
        "confidence": r.confidence,
        "decision_frame": r.decision_frame,
        "outcome_flags": {"detector_miss": r.detector_miss, "not_warm": r.not_warm},
    }


def record_from_obj(obj: dict) -> TrialRecord:
    return TrialRecord(
        scenario=int(obj["scenario"]),
        truth=GestureClass(obj["truth"]),
        trial_index=int(obj["trial_index"]),
        predicted=GestureClass(obj["predicted"]),
        confidence=float(obj["confidence"]),
        decision_frame=int(obj["decision_frame"]),
        detector_miss=bool(obj["outcome_flags"]["detector_miss"]),
        not_warm=bool(obj["outcome_flags"]["not_warm"]),
    )


def write_records(records: list[TrialRecord], path) -> None:
    lines = ",\n".join(
        "  " + json.dumps(record_to_obj(r), sort_keys=True) for r in records
    )
    Path(path).write_text("[\n" + lines + "\n]\n")


def read_records(path) -> list[TrialRecord]:
    return [record_from_obj(o) for o in json.loads(Path(path).read_text())]


def _f6(x: float) -> str:
    return f"{x:.6f}"


def report_to_obj(bundle: ReportBundle, config_echo: dict | None = None) -> dict:
    obj = {
        "delta": _f6(bundle.delta),
        "macro_accuracy": _f6(bundle.macro_accuracy),
        "macro_f1": _f6(bundle.macro_f1),
        "rows": [
            {
                "scenario": row.scenario,
                "gesture": row.gesture.value,
                "tp": row.confusion.tp,
                "fp": row.confusion.fp,
                "tn": row.confusion.tn,
                "fn": row.confusion.fn,
                "precision": _f6(row.metrics.precision),
                "recall": _f6(row.metrics.recall),
                "accuracy": _f6(row.metrics.accuracy),
                "f1": _f6(row.metrics.f1),
            }
            for row in bundle.rows
        ],
    }
    if config_echo is not None:
        obj["config"] = config_echo
    return obj


def write_report(bundle: ReportBundle, out_dir, config_echo: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obj = report_to_obj(bundle, config_echo)
    (out / "report.json").write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    lines = ["scenario,gesture,accuracy,f1,tp,fp,tn,fn"]
    for row in bundle.rows:
        m = row.metrics
        c = row.confusion
        lines.append(
            f"{row.scenario},{row.gesture.value},{_f6(m.accuracy)},{_f6(m.f1)},"
            f"{c.tp},{c.fp},{c.tn},{c.fn}"
        )
    (out / "tables.csv").write_text("\n".join(lines) + "\n")


def write_pr_curve(curve: PRCurve, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"pr_{curve.scenario}_{curve.gesture.value}.csv"
    lines = ["delta,precision,recall"]
    for p in curve.points:
        lines.append(f"{_f6(p.delta)},{_f6(p.precision)},{_f6(p.recall)}")
    path.write_text("\n".join(lines) + "\n")
    return path
