import math
from dataclasses import replace

import numpy as np
import pytest

from crosswalk.rng import mix64, trial_seed
from crosswalk.scenario import (
    ADMISSIBLE,
    CameraModel,
    GestureClass,
    GestureTrack,
    InadmissibleGesture,
    JointAngles,
    Keyframe,
    UnknownScenario,
    admissible_pairs,
    build_scenario,
    jitter_stream,
    load_track,
    pose_at,
    project,
    scenario_geometry,
)

ALL_GESTURES = list(GestureClass)


# ---------- admissibility ----------


def test_gesture_class_ordinals():
    assert [g.ord for g in ALL_GESTURES] == [0, 1, 2, 3, 4]
    assert len(ALL_GESTURES) == 5


def test_admissible_pairs_count_is_14():
    pairs = admissible_pairs()
    assert len(pairs) == 14
    assert len(set(pairs)) == 14


def test_scenario_1_admits_all_5_others_admit_3():
    assert set(ADMISSIBLE[1]) == set(ALL_GESTURES)
    core = {GestureClass.GO_FORWARD, GestureClass.STOP, GestureClass.NO_GESTURE}
    for sid in (2, 3, 4):
        assert set(ADMISSIBLE[sid]) == core


def test_inadmissible_pairs_raise():
    for sid in (2, 3, 4):
        for g in (GestureClass.GO_RIGHT, GestureClass.GO_LEFT):
            with pytest.raises(InadmissibleGesture):
                build_scenario(sid, g, master_seed=1, trial_index=0)


def test_unknown_scenario_raises():
    with pytest.raises(UnknownScenario):
        build_scenario(5, GestureClass.STOP, master_seed=1, trial_index=0)
    with pytest.raises(UnknownScenario):
        scenario_geometry(0)


def test_all_14_pairs_constructible():
    for sid, g in admissible_pairs():
        inst = build_scenario(sid, g, master_seed=3, trial_index=1)
        assert inst.scenario == sid and inst.gesture is g


# ---------- build_scenario determinism ----------


def test_build_scenario_is_pure():
    for sid, g in admissible_pairs():
        a = build_scenario(sid, g, master_seed=7, trial_index=2)
        b = build_scenario(sid, g, master_seed=7, trial_index=2)
        assert a == b


def test_trial_seed_matches_documented_derivation():
    inst = build_scenario(1, GestureClass.STOP, master_seed=7, trial_index=0)
    assert inst.trial_seed == trial_seed(7, 1, GestureClass.STOP.ord, 0)


def test_trial_seeds_differ_per_trial():
    seeds = {
        build_scenario(1, GestureClass.STOP, master_seed=7, trial_index=t).trial_seed
        for t in range(50)
    }
    assert len(seeds) == 50


def test_pedestrian_in_front_of_camera():
    for sid, g in admissible_pairs():
        inst = build_scenario(sid, g, master_seed=1, trial_index=0)
        _, _, z = inst.camera.world_to_cam(inst.pedestrian_position)
        assert z > 0


# ---------- camera model ----------


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(width_px=15, height_px=480, horizontal_fov_deg=50.0)
    with pytest.raises(ValueError):
        CameraModel(width_px=64, height_px=64, horizontal_fov_deg=0.0)
    with pytest.raises(ValueError):
        CameraModel(width_px=64, height_px=64, horizontal_fov_deg=180.0)


def test_vertical_fov_follows_aspect_ratio():
    cam = CameraModel(width_px=1280, height_px=480, horizontal_fov_deg=50.0)
    assert cam.tan_half_fov_v == pytest.approx(cam.tan_half_fov_h * 480 / 1280)


def test_project_optical_axis_hits_center():
    cam = CameraModel(
        width_px=320, height_px=240, horizontal_fov_deg=60.0, position=(0.0, 1.1, 0.0)
    )
    u, v = project(cam, (0.0, 1.1, 10.0))
    assert u == pytest.approx(160.0)
    assert v == pytest.approx(120.0)


def test_project_fov_edge_lands_at_width():
    cam = CameraModel(width_px=640, height_px=480, horizontal_fov_deg=90.0,
                      position=(0.0, 0.0, 0.0))
    z = 5.0
    u, _ = project(cam, (z * cam.tan_half_fov_h, 0.0, z))
    assert u == pytest.approx(640.0)


def test_project_paper_geometry_example():
    # 1280 px wide, 50 deg hFOV, point 2 m right at 10 m depth.
    cam = CameraModel(width_px=1280, height_px=480, horizontal_fov_deg=50.0,
                      position=(0.0, 0.0, 0.0))
    u, _ = project(cam, (2.0, 0.0, 10.0))
    expected = 640.0 * (1.0 + 2.0 / (10.0 * math.tan(math.radians(25.0))))
    assert u == pytest.approx(expected)
    assert u == pytest.approx(914.5, abs=0.05)


def test_project_behind_camera_is_none():
    cam = CameraModel(width_px=64, height_px=64, horizontal_fov_deg=50.0,
                      position=(0.0, 0.0, 0.0))
    assert project(cam, (0.0, 0.0, -1.0)) is None
    assert project(cam, (1.0, 2.0, 0.0)) is None


def test_positive_yaw_moves_straight_ahead_point_left():
    cam = CameraModel(width_px=200, height_px=100, horizontal_fov_deg=60.0,
                      position=(0.0, 0.0, 0.0), yaw_deg=10.0)
    u, _ = project(cam, (0.0, 0.0, 10.0))
    assert u < 100.0


def _rasterizer_pixel(cam, point):
    """Brute-force ray search: scan rays through a dense pixel grid and keep
    the pixel whose ray direction best matches the point's direction."""
    x, y, z = (point[i] - cam.position[i] for i in range(3))
    assert cam.yaw_deg == 0.0
    us = np.arange(0.0, cam.width_px + 0.0625, 0.125)
    ray_az = np.arctan((2.0 * us / cam.width_px - 1.0) * cam.tan_half_fov_h)
    u = us[np.argmin(np.abs(ray_az - math.atan2(x, z)))]
    vs = np.arange(0.0, cam.height_px + 0.0625, 0.125)
    ray_el = np.arctan((1.0 - 2.0 * vs / cam.height_px) * cam.tan_half_fov_v)
    v = vs[np.argmin(np.abs(ray_el - math.atan2(y, z)))]
    return u, v


def test_project_agrees_with_brute_force_rasterizer():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        w = int(rng.integers(16, 320))
        h = int(rng.integers(16, 240))
        fov = float(rng.uniform(20.0, 120.0))
        pos = tuple(rng.uniform(-5.0, 5.0, size=3))
        cam = CameraModel(width_px=w, height_px=h, horizontal_fov_deg=fov,
                          position=pos)
        z = float(rng.uniform(2.0, 50.0))
        x = z * cam.tan_half_fov_h * float(rng.uniform(-0.95, 0.95))
        y = z * cam.tan_half_fov_v * float(rng.uniform(-0.95, 0.95))
        point = (pos[0] + x, pos[1] + y, pos[2] + z)
        u, v = project(cam, point)
        bu, bv = _rasterizer_pixel(cam, point)
        assert abs(u - bu) <= 0.5 and abs(v - bv) <= 0.5


# ---------- gesture tracks ----------


def test_all_tracks_load_with_valid_keyframes():
    for g in ALL_GESTURES:
        track = load_track(g)
        assert track.gesture is g
        assert track.duration_frames == 40
        frames = [k.frame for k in track.keyframes]
        assert frames[0] == 0
        assert frames == sorted(set(frames))
        assert frames[-1] == track.duration_frames - 1


def test_no_gesture_track_is_constant():
    track = load_track(GestureClass.NO_GESTURE)
    first = track.keyframes[0].joints
    assert all(k.joints == first for k in track.keyframes)


def test_track_validation_rejects_bad_keyframes():
    j = JointAngles(0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        GestureTrack(GestureClass.STOP, 40, (Keyframe(1, j), Keyframe(39, j)))
    with pytest.raises(ValueError):
        GestureTrack(GestureClass.STOP, 40, (Keyframe(0, j), Keyframe(0, j)))
    with pytest.raises(ValueError):
        GestureTrack(GestureClass.STOP, 10, (Keyframe(0, j), Keyframe(10, j)))
    with pytest.raises(ValueError):
        GestureTrack(GestureClass.STOP, 10, ())


# ---------- pose interpolation ----------


def _clean_instance(track=None):
    inst = build_scenario(1, GestureClass.STOP, master_seed=5, trial_index=0,
                          jitter_amplitude_rad=0.0)
    return replace(inst, track=track) if track is not None else inst


def test_pose_at_frame_0_is_first_keyframe():
    for g in ALL_GESTURES:
        inst = replace(_clean_instance(), track=load_track(g))
        pose = pose_at(inst, 0, jitter_stream(inst, 0))
        assert pose == inst.track.keyframes[0].joints


def test_pose_linear_interpolation_midpoint():
    track = GestureTrack(
        GestureClass.STOP,
        11,
        (
            Keyframe(0, JointAngles(0.0, 0.0, 0.0, 0.0)),
            Keyframe(10, JointAngles(1.0, 1.0, 1.0, 1.0)),
        ),
    )
    inst = _clean_instance(track)
    pose = pose_at(inst, 5, jitter_stream(inst, 5))
    assert pose.as_array() == pytest.approx([0.5, 0.5, 0.5, 0.5])


def test_pose_matches_manual_lerp_between_all_keyframes():
    for g in ALL_GESTURES:
        inst = replace(_clean_instance(), track=load_track(g))
        kfs = inst.track.keyframes
        for lo, hi in zip(kfs, kfs[1:]):
            for f in range(lo.frame, hi.frame + 1):
                t = (f - lo.frame) / (hi.frame - lo.frame)
                expected = (1 - t) * lo.joints.as_array() + t * hi.joints.as_array()
                got = pose_at(inst, f, jitter_stream(inst, f)).as_array()
                assert got == pytest.approx(expected, abs=1e-12)


def test_pose_clamps_past_last_keyframe():
    inst = _clean_instance()
    last = inst.track.keyframes[-1]
    for f in (last.frame, last.frame + 1, last.frame + 100):
        assert pose_at(inst, f, jitter_stream(inst, f)) == last.joints


def test_pose_rejects_negative_frame():
    inst = _clean_instance()
    with pytest.raises(ValueError):
        pose_at(inst, -1, jitter_stream(inst, 0))


def test_jitter_bounded_and_zero_mean_range():
    noisy = build_scenario(1, GestureClass.STOP, master_seed=5, trial_index=0,
                           jitter_amplitude_rad=0.05)
    clean = replace(noisy, jitter_amplitude_rad=0.0)
    deltas = []
    for f in range(40):
        a = pose_at(noisy, f, jitter_stream(noisy, f)).as_array()
        b = pose_at(clean, f, jitter_stream(clean, f)).as_array()
        deltas.append(a - b)
    deltas = np.array(deltas)
    assert np.all(np.abs(deltas) <= 0.05 + 1e-12)
    assert np.any(deltas != 0.0)


def test_jitter_stream_keyed_by_trial_seed_and_frame():
    inst = build_scenario(1, GestureClass.STOP, master_seed=5, trial_index=0)
    a = pose_at(inst, 3, jitter_stream(inst, 3))
    b = pose_at(inst, 3, jitter_stream(inst, 3))
    assert a == b
    other = build_scenario(1, GestureClass.STOP, master_seed=5, trial_index=1)
    c = pose_at(other, 3, jitter_stream(other, 3))
    assert a != c
    assert mix64(inst.trial_seed, 1, 3) != mix64(other.trial_seed, 1, 3)
