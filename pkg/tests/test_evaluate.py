"""Metric fixtures, baseline data checks, and repositioning round trips."""

import math

import numpy as np
import pytest

from egospan.camera import CameraPose, HeadPose, attach_rig
from egospan.evaluate import (
    EvalReport,
    baseline_pose,
    build_report,
    facing_yaw,
    head_angle_error,
    keypoint_error,
    reposition_global,
)
from egospan.exceptions import ConfigError, DataError, NumericalError
from egospan.motions import make_motion
from egospan.skeleton import HEAD, normalize_pose, rot_x, rot_y
from egospan.synth import generate_sequence


def _base_pose():
    frame = make_motion("stand", rng=np.random.default_rng(0),
                        params={"head_pitch": 0.4})
    kp, head = frame(0.0)
    return kp, head


class TestKeypointError:
    def test_zero_for_identical(self):
        kp, _ = _base_pose()
        assert keypoint_error(kp, kp) == 0.0

    def test_single_displacement(self):
        kp, _ = _base_pose()
        moved = kp.copy()
        moved[7] += np.array([0.0, 0.15, 0.0])
        assert keypoint_error(moved, kp) == pytest.approx(1.0, abs=1e-12)

    def test_baseline_cross_error_matches_hand_computation(self):
        stand, _ = baseline_pose("allstand")
        sit, _ = baseline_pose("allsit")
        expected = float(np.linalg.norm(stand - sit, axis=1).mean()) * 100.0
        assert keypoint_error(stand, sit) == pytest.approx(expected)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((15, 3))
        b = rng.standard_normal((15, 3))
        assert keypoint_error(a, b) == pytest.approx(keypoint_error(b, a))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((15, 3))
        b = rng.standard_normal((15, 3))
        c = rng.standard_normal((15, 3))
        assert (keypoint_error(a, c)
                <= keypoint_error(a, b) + keypoint_error(b, c) + 1e-12)

    def test_accepts_flat_vectors(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal(45)
        b = rng.standard_normal(45)
        assert keypoint_error(a, b) == pytest.approx(
            keypoint_error(a.reshape(15, 3), b.reshape(15, 3)))


class TestHeadAngleError:
    def test_identical_is_zero(self):
        h = HeadPose(f=np.array([0.0, -0.3, -0.95]),
                     u=np.array([0.0, 0.95, -0.3]))
        assert head_angle_error(h, h) == (0.0, 0.0)

    def test_orthogonal_facing(self):
        a = HeadPose(f=np.array([1.0, 0.0, 0.0]), u=np.array([0.0, 1.0, 0.0]))
        b = HeadPose(f=np.array([0.0, 0.0, -1.0]),
                     u=np.array([0.0, 1.0, 0.0]))
        df, du = head_angle_error(a, b)
        assert df == pytest.approx(90.0)
        assert du == 0.0

    def test_forty_five_degree_yaw(self):
        base = HeadPose()
        yawed = HeadPose(f=rot_y(math.radians(45.0)) @ np.array([0, 0, -1.0]),
                         u=np.array([0.0, 1.0, 0.0]))
        df, _ = head_angle_error(yawed, base)
        assert df == pytest.approx(45.0, abs=1e-9)

    def test_scale_invariant(self):
        a = HeadPose(f=np.array([0.0, 0.0, -2.5]), u=np.array([0.0, 3.0, 0.0]))
        b = HeadPose()
        assert head_angle_error(a, b) == (0.0, 0.0)

    def test_zero_vector_raises(self):
        bad = HeadPose(f=np.zeros(3), u=np.array([0.0, 1.0, 0.0]))
        with pytest.raises(NumericalError):
            head_angle_error(bad, HeadPose())


class TestBaselinePose:
    def test_kinds_and_case(self):
        for kind in ("allstand", "AllStand", "ALLSIT"):
            body, head = baseline_pose(kind)
            assert body.shape == (15, 3)
            assert np.isfinite(body).all()
            f = np.asarray(head.f)
            u = np.asarray(head.u)
            assert abs(np.linalg.norm(f) - 1.0) < 1e-9
            assert abs(float(f @ u)) < 1e-9

    def test_normalized_extent(self):
        for kind in ("allstand", "allsit"):
            body, _ = baseline_pose(kind)
            extent = body[:, 1].max() - body[:, 1].min()
            assert extent == pytest.approx(1.70, abs=1e-9)

    def test_stand_differs_from_sit(self):
        stand, _ = baseline_pose("allstand")
        sit, _ = baseline_pose("allsit")
        assert keypoint_error(stand, sit) > 10.0

    def test_deterministic_across_loads(self):
        a, _ = baseline_pose("allstand")
        b, _ = baseline_pose("allstand")
        assert np.array_equal(a, b)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            baseline_pose("allrun")


class TestFacingYaw:
    def test_reference_directions(self):
        assert facing_yaw(np.array([0.0, 0.0, -1.0])) == 0.0
        assert facing_yaw(np.array([-1.0, 0.0, 0.0])) == pytest.approx(
            math.pi / 2)

    def test_rotation_adds(self):
        f = np.array([0.0, -0.4, -0.9])
        base = facing_yaw(f)
        for a in (0.3, -1.2, 2.5):
            assert facing_yaw(rot_y(a) @ f) == pytest.approx(
                base + a if abs(base + a) <= math.pi
                else base + a - np.sign(base + a) * 2 * math.pi)

    def test_near_vertical_is_none(self):
        down = np.array([0.0, -1.0, 0.0])
        assert facing_yaw(down) is None
        tilted = rot_x(math.radians(4.0)) @ down
        assert facing_yaw(tilted) is None
        clearly = rot_x(math.radians(7.0)) @ down
        assert facing_yaw(clearly) is not None

    def test_zero_vector_is_none(self):
        assert facing_yaw(np.zeros(3)) is None


class TestRepositionGlobal:
    @pytest.mark.parametrize("seed", range(5))
    def test_exact_round_trip_for_level_placement(self, seed):
        rng = np.random.default_rng(100 + seed)
        base, _ = _base_pose()
        f = np.array([0.0, 0.0, -1.0])
        u = np.array([0.0, 1.0, 0.0])
        pitch = rot_x(rng.uniform(-0.6, 0.2))
        f, u = pitch @ f, pitch @ u
        Q = rot_y(rng.uniform(-math.pi, math.pi))
        t = rng.uniform(-3, 3, 3)
        world = base @ Q.T + t
        f_w, u_w = Q @ f, Q @ u
        cam = attach_rig(world[HEAD], HeadPose(f=f_w, u=u_w))
        local, tf = normalize_pose(world)
        head_local = HeadPose(f=tf.apply_direction(f_w),
                              u=tf.apply_direction(u_w))
        recon, yaw = reposition_global(local, head_local, cam,
                                       scale=tf.scale)
        assert np.max(np.abs(recon - world)) < 1e-9

    def test_camera_translation_translates_output(self):
        base, head = _base_pose()
        local, tf = normalize_pose(base)
        head_local = HeadPose(f=tf.apply_direction(head.f),
                              u=tf.apply_direction(head.u))
        cam = attach_rig(base[HEAD], head)
        shift = np.array([2.0, -0.3, 1.1])
        moved = CameraPose(rotation=cam.rotation,
                           position=cam.position + shift)
        a, _ = reposition_global(local, head_local, cam, scale=tf.scale)
        b, _ = reposition_global(local, head_local, moved, scale=tf.scale)
        assert np.allclose(b - a, shift, atol=1e-12)

    def test_pitch_only_change_keeps_yaw(self):
        base, head = _base_pose()
        local, tf = normalize_pose(base)
        f_l = tf.apply_direction(head.f)
        u_l = tf.apply_direction(head.u)
        cam = attach_rig(base[HEAD], head)
        _, yaw0 = reposition_global(local, HeadPose(f=f_l, u=u_l), cam,
                                    scale=tf.scale)
        # pitch the local prediction further down; heading is untouched
        pitched = rot_x(-0.4)
        _, yaw1 = reposition_global(local, HeadPose(f=pitched @ f_l,
                                                    u=pitched @ u_l),
                                    cam, scale=tf.scale)
        assert yaw1 == pytest.approx(yaw0, abs=1e-12)

    def test_vertical_facing_uses_fallback(self):
        base, head = _base_pose()
        local, tf = normalize_pose(base)
        cam = attach_rig(base[HEAD], head)
        down = HeadPose(f=np.array([0.0, -1.0, 0.0]),
                        u=np.array([0.0, 0.0, -1.0]))
        with pytest.raises(NumericalError):
            reposition_global(local, down, cam, scale=tf.scale)
        world, yaw = reposition_global(local, down, cam, scale=tf.scale,
                                       fallback_yaw=0.25)
        assert yaw == 0.25
        assert np.isfinite(world).all()

    def test_synth_round_trip_under_two_centimeters(self):
        frames = generate_sequence("walk_cycle", duration=2.0, fps=15.0,
                                   seed=5, render="none")
        fallback = None
        checked = 0
        for fr in frames:
            world, yaw = reposition_global(fr.body, fr.head_local,
                                           fr.camera, scale=fr.norm_scale,
                                           fallback_yaw=fallback)
            fallback = yaw
            err = np.linalg.norm(world - fr.body_world, axis=1)
            assert err.max() < 0.02
            checked += 1
        assert checked >= 30


class TestReport:
    def _samples(self):
        return [
            ("walk", 3.0, 10.0, 6.0),
            ("walk", 5.0, 14.0, 10.0),
            ("sit", 2.0, 4.0, 2.0),
        ]

    def test_aggregates_match_recomputation(self):
        report = build_report(self._samples())
        assert isinstance(report, EvalReport)
        walk = report.sequences[0]
        assert walk.name == "walk"
        assert walk.frames == 2
        assert walk.keypoint_avg_cm == pytest.approx(4.0)
        assert walk.keypoint_std_cm == pytest.approx(1.0)
        assert walk.facing_avg_deg == pytest.approx(12.0)
        overall = report.overall
        assert overall.frames == 3
        kp = np.array([3.0, 5.0, 2.0])
        assert overall.keypoint_avg_cm == pytest.approx(kp.mean())
        assert overall.keypoint_std_cm == pytest.approx(kp.std())

    def test_errors_nonnegative_fixture(self):
        report = build_report(self._samples())
        for s in (*report.sequences, report.overall):
            assert s.keypoint_avg_cm >= 0.0
            assert s.keypoint_std_cm >= 0.0

    def test_csv_layout(self):
        csv = build_report(self._samples()).to_csv()
        lines = csv.strip().split("\n")
        assert lines[0].startswith("sequence,frames,keypoint_avg_cm")
        assert len(lines) == 4
        assert lines[1].split(",")[0] == "walk"
        assert lines[-1].split(",")[0] == "overall"
        assert lines[1].split(",")[1] == "2"

    def test_table_layout(self):
        table = build_report(self._samples()).to_table()
        lines = table.strip().split("\n")
        assert "kp avg" in lines[0]
        assert lines[-1].startswith("overall")
        assert len(lines) == 5

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            build_report([])
