"""Procedural full-body motions for the synthetic data generator.

Poses are built from a parametric skeleton with fixed segment lengths,
so left/right bone pairs match exactly. All motions are generated in a
canonical placement: the body faces -z and the feet are near the
origin; the sequence generator yaws and translates the whole body into
the world afterwards.

Angle conventions (radians): torso and head pitch are positive when
folding/looking forward-and-down; leg and arm pitch are zero when the
limb hangs straight down and positive when it swings forward (-z);
knee and elbow bend angles are non-negative.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .camera import HeadPose
from .exceptions import ConfigError, NumericalError
from .skeleton import (HEAD, L_ANKLE, L_ELBOW, L_HIP, L_KNEE, L_SHOULDER,
                       L_WRIST, NECK, NUM_KEYPOINTS, PELVIS, R_ANKLE, R_ELBOW,
                       R_HIP, R_KNEE, R_SHOULDER, R_WRIST, rot_x)


@dataclass(frozen=True)
class BodyShape:
    """Segment lengths (metres) of the parametric body, before scaling."""

    pelvis_height: float = 0.95
    hip_half: float = 0.10
    hip_drop: float = 0.03
    thigh: float = 0.42
    shin: float = 0.40
    torso: float = 0.50
    neck_to_head: float = 0.17
    shoulder_half: float = 0.19
    shoulder_drop: float = 0.03
    upper_arm: float = 0.28
    forearm: float = 0.26
    scale: float = 1.0

    def scaled(self):
        if self.scale == 1.0:
            return self
        s = self.scale
        return BodyShape(*(getattr(self, f) * s for f in (
            "pelvis_height", "hip_half", "hip_drop", "thigh", "shin",
            "torso", "neck_to_head", "shoulder_half", "shoulder_drop",
            "upper_arm", "forearm")), scale=1.0)

    @property
    def standing_head_y(self):
        b = self.scaled()
        return b.pelvis_height + b.torso + b.neck_to_head

    @property
    def standing_camera_height(self):
        """Rig camera height above ground when standing and looking level."""
        from .camera import RIG_DOWN_OFFSET

        return self.standing_head_y - RIG_DOWN_OFFSET


def _swing(angle):
    """Unit direction of a limb hanging down, swung forward by `angle`."""
    return np.array([0.0, -math.cos(angle), -math.sin(angle)])


def solve_leg(hip, ankle, thigh, shin):
    """Knee position for a 2-link leg in the sagittal plane (knee forward).

    hip and ankle must share their x coordinate.
    """
    v = ankle - hip
    if abs(v[0]) > 1e-9:
        raise NumericalError("leg IK requires hip and ankle in one sagittal plane")
    L = math.hypot(v[1], v[2])
    reach = thigh + shin
    if L > reach - 1e-9:
        raise NumericalError(f"ankle out of reach: {L:.3f} > {reach:.3f}")
    if L < abs(thigh - shin) + 1e-9:
        raise NumericalError("ankle too close to hip for leg IK")
    a = (thigh**2 - shin**2 + L**2) / (2 * L)
    h = math.sqrt(max(thigh**2 - a**2, 0.0))
    vy, vz = v[1] / L, v[2] / L
    normal = np.array([0.0, -vz, vy])  # in-plane, knee bows toward -z
    return hip + a * np.array([0.0, vy, vz]) + h * normal


@dataclass
class PoseParams:
    """One frame of joint parameters for build_pose."""

    pelvis: np.ndarray
    torso_pitch: float = 0.0
    head_pitch: float = 0.0
    hip_pitch_l: float = 0.0
    hip_pitch_r: float = 0.0
    knee_bend_l: float = 0.0
    knee_bend_r: float = 0.0
    shoulder_pitch_l: float = 0.05
    shoulder_pitch_r: float = 0.05
    elbow_bend_l: float = 0.05
    elbow_bend_r: float = 0.05
    ankle_target_l: np.ndarray = None
    ankle_target_r: np.ndarray = None


def build_pose(shape, params):
    """Assemble canonical keypoints and head orientation for one frame.

    Legs follow hip/knee angles unless an ankle target is given, in
    which case a 2-link IK keeps the foot planted.

    Returns:
        ((15, 3) keypoints, HeadPose).
    """
    b = shape.scaled()
    kp = np.zeros((NUM_KEYPOINTS, 3))
    P = np.asarray(params.pelvis, dtype=np.float64)
    kp[PELVIS] = P

    for side, hip_i, knee_i, ankle_i, pitch, bend, target in (
            ("l", L_HIP, L_KNEE, L_ANKLE, params.hip_pitch_l,
             params.knee_bend_l, params.ankle_target_l),
            ("r", R_HIP, R_KNEE, R_ANKLE, params.hip_pitch_r,
             params.knee_bend_r, params.ankle_target_r)):
        sign = 1.0 if side == "l" else -1.0
        hip = P + np.array([sign * b.hip_half, -b.hip_drop, 0.0])
        kp[hip_i] = hip
        if target is not None:
            ankle = np.asarray(target, dtype=np.float64)
            knee = solve_leg(hip, ankle, b.thigh, b.shin)
        else:
            knee = hip + b.thigh * _swing(pitch)
            ankle = knee + b.shin * _swing(pitch - bend)
        kp[knee_i] = knee
        kp[ankle_i] = ankle

    # upper body is built unpitched, then folded forward about the pelvis
    neck = P + np.array([0.0, b.torso, 0.0])
    hp = params.head_pitch
    up_dir = np.array([0.0, math.cos(hp), -math.sin(hp)])
    head = neck + b.neck_to_head * up_dir
    f0 = np.array([0.0, -math.sin(hp), -math.cos(hp)])
    u0 = up_dir
    upper = {NECK: neck, HEAD: head}
    for side, sho_i, elb_i, wri_i, pitch, bend in (
            ("l", L_SHOULDER, L_ELBOW, L_WRIST, params.shoulder_pitch_l,
             params.elbow_bend_l),
            ("r", R_SHOULDER, R_ELBOW, R_WRIST, params.shoulder_pitch_r,
             params.elbow_bend_r)):
        sign = 1.0 if side == "l" else -1.0
        sho = neck + np.array([sign * b.shoulder_half, -b.shoulder_drop, 0.0])
        elb = sho + b.upper_arm * _swing(pitch)
        wri = elb + b.forearm * _swing(pitch + bend)
        upper.update({sho_i: sho, elb_i: elb, wri_i: wri})

    fold = rot_x(-params.torso_pitch)
    for idx, point in upper.items():
        kp[idx] = P + fold @ (point - P)
    f = fold @ f0
    u = fold @ u0
    return kp, HeadPose(f=f, u=u)


def _phase(t, period):
    return (1.0 - math.cos(2.0 * math.pi * t / period)) / 2.0


def _make_stand(shape, rng, params):
    head_pitch = params.get("head_pitch", rng.uniform(0.0, 0.5))
    arm = rng.uniform(0.03, 0.12)
    pose = PoseParams(pelvis=np.array([0.0, shape.scaled().pelvis_height, 0.0]),
                      head_pitch=head_pitch,
                      shoulder_pitch_l=arm, shoulder_pitch_r=arm * 0.9,
                      elbow_bend_l=0.08, elbow_bend_r=0.08)

    def frame(t):
        return build_pose(shape, pose)

    return frame


def _make_sit(shape, rng, params):
    b = shape.scaled()
    head_pitch = params.get("head_pitch", rng.uniform(0.1, 0.5))
    hip = math.radians(rng.uniform(78, 88))
    knee = hip + math.radians(rng.uniform(2, 8))
    arm = rng.uniform(0.2, 0.45)
    seat = b.hip_drop + b.thigh * math.cos(hip) + b.shin * math.cos(hip - knee)
    pose = PoseParams(pelvis=np.array([0.0, seat + 0.02, 0.0]),
                      head_pitch=head_pitch,
                      hip_pitch_l=hip, hip_pitch_r=hip,
                      knee_bend_l=knee, knee_bend_r=knee,
                      shoulder_pitch_l=arm, shoulder_pitch_r=arm,
                      elbow_bend_l=0.3, elbow_bend_r=0.3)

    def frame(t):
        return build_pose(shape, pose)

    return frame


def _make_squat(shape, rng, params):
    b = shape.scaled()
    period = params.get("period", rng.uniform(3.0, 5.0))
    head_pitch0 = params.get("head_pitch", rng.uniform(0.25, 0.4))
    ratio = b.pelvis_height / 0.95
    top = b.pelvis_height
    # deep crouch with the torso folded forward, so the camera bottoms
    # out roughly one squat-clearance above the floor
    bottom = params.get("bottom", 0.30 * ratio)
    max_fold = params.get("torso_pitch", 1.0)
    ankle_y = 0.105 * ratio
    targets = {
        "l": np.array([b.hip_half, ankle_y, -0.02 * ratio]),
        "r": np.array([-b.hip_half, ankle_y, -0.02 * ratio]),
    }

    def frame(t):
        s = _phase(t, period)
        pelvis_y = top + (bottom - top) * s
        pose = PoseParams(
            pelvis=np.array([0.0, pelvis_y, 0.0]),
            torso_pitch=max_fold * s,
            head_pitch=head_pitch0 + 0.15 * s,
            shoulder_pitch_l=0.2 + 0.9 * s, shoulder_pitch_r=0.2 + 0.9 * s,
            elbow_bend_l=0.15, elbow_bend_r=0.15,
            ankle_target_l=targets["l"], ankle_target_r=targets["r"])
        return build_pose(shape, pose)

    return frame


def _make_walk(shape, rng, params):
    b = shape.scaled()
    period = params.get("period", rng.uniform(0.9, 1.4))
    head_pitch = params.get("head_pitch", rng.uniform(0.1, 0.45))
    swing = rng.uniform(0.3, 0.5)
    bend = rng.uniform(0.5, 0.9)
    arm = rng.uniform(0.2, 0.4)

    def frame(t):
        w = 2.0 * math.pi * t / period
        pose = PoseParams(
            pelvis=np.array([0.0,
                             b.pelvis_height + 0.02 * math.sin(2 * w) - 0.02,
                             0.01 * math.sin(w)]),
            head_pitch=head_pitch,
            hip_pitch_l=swing * math.sin(w),
            hip_pitch_r=-swing * math.sin(w),
            knee_bend_l=bend * (1 - math.cos(w)) / 2,
            knee_bend_r=bend * (1 + math.cos(w)) / 2,
            shoulder_pitch_l=0.1 - arm * math.sin(w),
            shoulder_pitch_r=0.1 + arm * math.sin(w),
            elbow_bend_l=0.25, elbow_bend_r=0.25)
        return build_pose(shape, pose)

    return frame


def _make_wave(shape, rng, params):
    b = shape.scaled()
    period = params.get("period", rng.uniform(1.2, 2.0))
    head_pitch = params.get("head_pitch", rng.uniform(0.0, 0.3))
    phase_r = rng.uniform(0.5, math.pi)
    lift = params.get("lift", 0.55 * math.pi)
    amp = params.get("amp", 0.3 * math.pi)

    def frame(t):
        w = 2.0 * math.pi * t / period
        pose = PoseParams(
            pelvis=np.array([0.0, b.pelvis_height, 0.0]),
            head_pitch=head_pitch,
            shoulder_pitch_l=lift + amp * math.sin(w),
            shoulder_pitch_r=lift + amp * math.sin(w + phase_r),
            elbow_bend_l=0.3 + 0.25 * math.sin(2.0 * w),
            elbow_bend_r=0.3 + 0.25 * math.sin(2.0 * w + phase_r))
        return build_pose(shape, pose)

    return frame


def _make_lean(shape, rng, params):
    b = shape.scaled()
    period = params.get("period", rng.uniform(2.5, 4.0))
    fold = params.get("fold", rng.uniform(0.4, 0.7))
    head_pitch = params.get("head_pitch", rng.uniform(0.2, 0.4))

    def frame(t):
        s = _phase(t, period)
        pose = PoseParams(
            pelvis=np.array([0.0, b.pelvis_height - 0.03 * s, 0.0]),
            torso_pitch=fold * s,
            head_pitch=head_pitch,
            knee_bend_l=0.15 * s, knee_bend_r=0.15 * s,
            hip_pitch_l=0.08 * s, hip_pitch_r=0.08 * s,
            shoulder_pitch_l=0.1 + 0.2 * s, shoulder_pitch_r=0.1 + 0.2 * s,
            elbow_bend_l=0.1, elbow_bend_r=0.1)
        return build_pose(shape, pose)

    return frame


MOTIONS = {
    "stand": _make_stand,
    "sit": _make_sit,
    "squat_cycle": _make_squat,
    "walk_cycle": _make_walk,
    "arm_wave": _make_wave,
    "lean": _make_lean,
}


def procedural_motions():
    """Names of the built-in motions, sorted."""
    return sorted(MOTIONS)


def make_motion(name, shape=None, rng=None, params=None):
    """Instantiate a named motion: returns frame(t) -> (keypoints, HeadPose).

    Randomized parameters (periods, amplitudes, head pitch) are drawn
    once from `rng` at creation, so the motion itself is deterministic
    in t.
    """
    if name not in MOTIONS:
        raise ConfigError(
            f"unknown motion {name!r}; choose from {sorted(MOTIONS)}")
    if shape is None:
        shape = BodyShape()
    if rng is None:
        rng = np.random.default_rng(0)
    return MOTIONS[name](shape, rng, dict(params or {}))
