"""Deterministic simulator and benchmark harness for pedestrian
hand-gesture recognition pipelines."""

from .scenario import (
    ADMISSIBLE,
    CameraModel,
    GestureClass,
    GestureTrack,
    InadmissibleGesture,
    JointAngles,
    Keyframe,
    ScenarioInstance,
    UnknownScenario,
    admissible_pairs,
    build_scenario,
    pose_at,
    project,
)
from .render import (
    Frame,
    FrameRingBuffer,
    InsufficientFrames,
    SimClock,
    render_frame,
    sim_fps,
    write_ppm,
)
from .pipeline import (
    BBox,
    DegenerateBox,
    DimensionMismatch,
    GestureDecision,
    PipelineConfig,
    crop_upper_body,
    downscale_for_pd,
    mask_and_argmax,
    prepare_gc_input,
    scale_bbox,
    step,
    temporal_sample,
)
from .models import (
    NoisyOracleClassifier,
    NoisyOracleConfig,
    OracleDetector,
    PluginFailure,
    ReferenceDetector,
    TemplateClassifier,
    build_template_bank,
    oracle_classify,
    reference_detect,
    template_classify,
)
from .eval import (
    ConfusionMatrix,
    EmptyPositives,
    PRCurve,
    ReportBundle,
    RunPlan,
    TrialRecord,
    UnknownSG,
    WrongRowCount,
    build_report,
    confusion_at,
    macro_average,
    metrics,
    pr_sweep,
    read_records,
    run_trials,
    write_records,
    write_report,
)
from .config import RunConfig, load_config

__version__ = "0.1.0"
