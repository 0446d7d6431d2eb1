"""Command-line interface.

    crosswalk run    simulate trials and write the full report bundle
    crosswalk sweep  rescore saved records at a threshold (no simulation)
    crosswalk report print the summary table from a report bundle
    crosswalk serve  stream a live scenario to an inbound remote plugin

Exit codes: 0 success, 1 runtime failure (plugin/model/config/IO),
2 usage errors.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import eval as evalmod
from . import models, wire
from .config import ConfigError, RunConfig, load_config, load_oracle_config
from .pipeline import PipelineConfig, StepStats, step
from .render import FrameRingBuffer, SimClock, stream_frames
from .rng import STREAM_TEMPORAL, mix64, np_stream
from .scenario import ADMISSIBLE, GestureClass, admissible_pairs, build_scenario


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crosswalk", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--seed", type=int, default=None, dest="master_seed")
        sp.add_argument("--trials", type=int, default=None, dest="trials_per_sg")
        sp.add_argument("--scenarios", type=str, default=None,
                        help="comma-separated scenario ids, e.g. 1,3")
        sp.add_argument("--width", type=int, default=None, dest="width_px")
        sp.add_argument("--height", type=int, default=None, dest="height_px")
        sp.add_argument("--fov", type=float, default=None, dest="fov_deg")
        sp.add_argument("--clock-scale", type=float, default=None, dest="clock_scale")
        sp.add_argument("--wall-interval", type=float, default=None, dest="wall_interval_s")
        sp.add_argument("--stride", type=int, default=None, dest="stride_s")
        sp.add_argument("--window", type=int, default=None, dest="window_m")
        sp.add_argument("--sample", type=int, default=None, dest="sample_t")
        sp.add_argument("--delta", type=float, default=None)
        sp.add_argument("--model", type=str, default=None,
                        help="builtin:template | builtin:oracle | remote:<host:port>")
        sp.add_argument("--oracle-confusion", type=str, default=None,
                        dest="oracle_confusion", help="JSON file with the oracle statistics")
        sp.add_argument("--out", type=str, default=None, dest="out_dir", required=out_required)
        sp.add_argument("--fast-forward", action="store_const", const=True, default=None,
                        dest="fast_forward", help="ignore wall pacing (default for run)")
        sp.add_argument("--real-time", action="store_const", const=False, default=None,
                        dest="fast_forward", help="honor the wall-clock frame interval")
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--dump-frames", action="store_const", const=True, default=None,
                        dest="dump_frames", help="write every rendered frame as PPM")

    run = sub.add_parser("run", help="simulate trials and write the report bundle")
    common(run)

    sweep = sub.add_parser("sweep", help="rescore saved records at a threshold")
    sweep.add_argument("--records", type=str, default=None,
                       help="records.json path (default <out>/records.json)")
    common(sweep)

    rep = sub.add_parser("report", help="print the summary table from report.json")
    rep.add_argument("--out", type=str, required=True, dest="out_dir")

    srv = sub.add_parser("serve", help="stream a live scenario to an inbound plugin")
    common(srv)
    srv.add_argument("--listen", type=str, default="127.0.0.1:0",
                     help="host:port to accept the plugin connection on")
    srv.add_argument("--gesture", type=str, default="stop",
                     help="gesture class value to stream (e.g. go_forward)")
    srv.add_argument("--frames", type=int, default=0,
                     help="stop after this many frames (0 = until disconnect)")
    return p


def _flag_values(args: argparse.Namespace) -> dict:
    keep = (
        "master_seed", "trials_per_sg", "scenarios", "width_px", "height_px",
        "fov_deg", "clock_scale", "wall_interval_s", "stride_s", "window_m",
        "sample_t", "delta", "model", "oracle_confusion", "out_dir",
        "fast_forward", "workers", "dump_frames",
    )
    return {k: getattr(args, k) for k in keep if hasattr(args, k)}


def _pipeline_config(cfg: RunConfig) -> PipelineConfig:
    return PipelineConfig(
        stride_s=cfg.stride_s,
        window_m=cfg.window_m,
        sample_t=cfg.sample_t,
        confidence_threshold_delta=cfg.delta,
    )


def _model_specs(cfg: RunConfig):
    """(detector_spec, classifier_spec, needs_single_worker)"""
    name = cfg.model
    if name == "builtin:template":
        return models.ReferenceDetectorSpec(), models.TemplateClassifierSpec(), False
    if name == "builtin:oracle":
        oc = load_oracle_config(cfg.oracle_confusion)
        return models.OracleDetectorSpec(), models.OracleClassifierSpec(oc), False
    if name.startswith("remote:"):
        host, port = wire.parse_address(name[len("remote:"):])
        # remote plugins see requests in trial order on one connection
        return models.OracleDetectorSpec(), wire.RemoteClassifierSpec(host, port), True
    raise ConfigError(f"unknown model spec {name!r}")


def _plan(cfg: RunConfig) -> evalmod.RunPlan:
    return evalmod.RunPlan(
        master_seed=cfg.master_seed,
        trials_per_sg=cfg.trials_per_sg,
        scenarios=cfg.scenarios,
        width_px=cfg.width_px,
        height_px=cfg.height_px,
        fov_deg=cfg.fov_deg,
        config=_pipeline_config(cfg),
        detector_spec=None,
        classifier_spec=None,
        jitter_amplitude_rad=cfg.jitter_amplitude_rad,
        lighting_variation=cfg.lighting_variation,
        clock=SimClock(cfg.clock_scale, cfg.wall_interval_s),
        dump_frames_dir=str(Path(cfg.out_dir) / "frames") if cfg.dump_frames else None,
    )


def _write_bundle(records, cfg: RunConfig) -> evalmod.ReportBundle:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = evalmod.build_report(records, cfg.delta, cfg.scenarios)
    evalmod.write_report(bundle, out, config_echo=cfg.echo())
    for sid, g in admissible_pairs(cfg.scenarios):
        evalmod.write_pr_curve(evalmod.pr_sweep(records, sid, g), out)
    return bundle


def _print_bundle(bundle: evalmod.ReportBundle) -> None:
    print("scenario  gesture      accuracy      f1")
    for row in bundle.rows:
        print(
            f"{row.scenario:>8}  {row.gesture.value:<12} "
            f"{row.metrics.accuracy:>8.4f}  {row.metrics.f1:>6.4f}"
        )
    print(f"macro accuracy {bundle.macro_accuracy:.4f}   macro f1 {bundle.macro_f1:.4f}")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(_flag_values(args))
    det, cls, single = _model_specs(cfg)
    plan = replace(_plan(cfg), detector_spec=det, classifier_spec=cls)
    workers = 1 if single else cfg.effective_workers()
    try:
        records = evalmod.run_trials(plan, workers=workers)
    finally:
        wire.close_cached_channels()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evalmod.write_records(records, out / "records.json")
    bundle = _write_bundle(records, cfg)
    _print_bundle(bundle)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(_flag_values(args))
    rec_path = args.records or str(Path(cfg.out_dir) / "records.json")
    records = evalmod.read_records(rec_path)
    bundle = _write_bundle(records, cfg)
    _print_bundle(bundle)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    import json

    path = Path(args.out_dir) / "report.json"
    obj = json.loads(path.read_text())
    print("scenario  gesture      accuracy      f1")
    for row in obj["rows"]:
        print(
            f"{row['scenario']:>8}  {row['gesture']:<12} "
            f"{float(row['accuracy']):>8.4f}  {float(row['f1']):>6.4f}"
        )
    print(
        f"macro accuracy {float(obj['macro_accuracy']):.4f}   "
        f"macro f1 {float(obj['macro_f1']):.4f}"
    )
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import socket

    cfg = load_config(_flag_values(args))
    gesture = GestureClass(args.gesture)
    scenario = cfg.scenarios[0]
    if gesture not in ADMISSIBLE[scenario]:
        raise ConfigError(f"gesture {gesture.value} not admissible in scenario {scenario}")
    pcfg = _pipeline_config(cfg)
    clock = SimClock(cfg.clock_scale, cfg.wall_interval_s)
    host, port = wire.parse_address(args.listen)
    srv = socket.create_server((host, port))
    bound = srv.getsockname()
    print(f"listening on {bound[0]}:{bound[1]}", flush=True)
    try:
        conn, peer = srv.accept()
    finally:
        srv.close()
    with conn:
        channel = wire.PluginChannel.accept(conn)
        role = "detector" if channel.role == wire.ROLE_DETECTOR else "classifier"
        print(f"plugin connected from {peer[0]}:{peer[1]} as {role}", flush=True)
        det_spec, cls_spec, _ = _model_specs(cfg)
        budget = args.frames
        total = 0
        trial = 0
        fast = cfg.fast_forward if cfg.fast_forward is not None else False
        try:
            while budget == 0 or total < budget:
                instance = build_scenario(
                    scenario, gesture, cfg.master_seed, trial,
                    width_px=cfg.width_px, height_px=cfg.height_px, fov_deg=cfg.fov_deg,
                    jitter_amplitude_rad=cfg.jitter_amplitude_rad,
                )
                from .render import draw_lighting

                lighting = draw_lighting(instance.trial_seed, cfg.lighting_variation)
                detector = det_spec.build(instance, lighting, pcfg)
                classifier = cls_spec.build(instance, lighting, pcfg)
                if channel.role == wire.ROLE_DETECTOR:
                    detector = channel
                else:
                    classifier = channel
                rng = np_stream(mix64(instance.trial_seed, STREAM_TEMPORAL))
                buffer = FrameRingBuffer(capacity=max(40, pcfg.window_m))
                count = 45 if budget == 0 else min(45, budget - total)
                for frame in stream_frames(
                    instance, instance.camera, clock, count,
                    lighting_scale=lighting, fast_forward=fast,
                ):
                    buffer.push(frame)
                    decision = step(frame, buffer, detector, classifier, pcfg, rng)
                    total += 1
                    if decision is not None:
                        print(
                            f"[decision] trial={trial} frame={decision.frame_index} "
                            f"predicted={decision.predicted.value} "
                            f"confidence={decision.confidence:.4f}",
                            flush=True,
                        )
                trial += 1
        except models.PluginFailure as e:
            print(f"plugin failed: {e}", file=sys.stderr)
            return 1
        finally:
            channel.close()
    print(f"served {total} frames over {trial} trials", flush=True)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "run": cmd_run,
        "sweep": cmd_sweep,
        "report": cmd_report,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, models.PluginFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
