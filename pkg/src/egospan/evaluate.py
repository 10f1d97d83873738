"""Pose metrics, canonical baselines, and global repositioning.

Errors are reported the way a results table reads: centimeters for
keypoints in the normalized body frame, degrees for the two head axes.
The constant-pose baselines ship as data files so every run scores the
same reference.
"""

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .camera import (
    RIG_DOWN_OFFSET,
    RIG_FORWARD_OFFSET,
    HeadPose,
)
from .exceptions import ConfigError, DataError, NumericalError
from .skeleton import HEAD, NUM_KEYPOINTS, rot_y
from .validation import as_float_array

VERTICAL_FACING_LIMIT = math.radians(5.0)

_BASELINE_FILES = {"allstand": "allstand.txt", "allsit": "allsit.txt"}


def keypoint_error(est, gt):
    """Mean per-keypoint Euclidean distance, in centimeters.

    Both poses are expected in the same (normalized) frame; accepts
    (15, 3) arrays or flat 45-vectors.
    """
    a = as_float_array(est, "est").reshape(NUM_KEYPOINTS, 3)
    b = as_float_array(gt, "gt").reshape(NUM_KEYPOINTS, 3)
    return float(np.linalg.norm(a - b, axis=1).mean() * 100.0)


def _angle_deg(a, b, name):
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-9 or nb < 1e-9:
        raise NumericalError(f"{name} vector has near-zero length")
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return math.degrees(math.acos(cos))


def head_angle_error(est, gt):
    """Angles in degrees between estimated and true head axes: (facing, up)."""
    return (_angle_deg(np.asarray(est.f, dtype=np.float64),
                       np.asarray(gt.f, dtype=np.float64), "facing"),
            _angle_deg(np.asarray(est.u, dtype=np.float64),
                       np.asarray(gt.u, dtype=np.float64), "up"))


def facing_yaw(f, vertical_limit=VERTICAL_FACING_LIMIT):
    """Heading angle of a facing direction, or None when near vertical.

    The yaw is measured so a facing of (0, 0, -1) reads 0 and rotating
    by rot_y(a) adds a. Directions within `vertical_limit` of straight
    up or down have no reliable heading and return None.
    """
    v = as_float_array(f, "f", shape=(3,))
    n = float(np.linalg.norm(v))
    if n < 1e-9:
        return None
    horiz = math.hypot(v[0], v[2])
    if horiz < math.sin(vertical_limit) * n:
        return None
    return math.atan2(-v[0], -v[2])


def reposition_global(body_local, head_local, cam_pose, scale=1.0,
                      fallback_yaw=None):
    """Place a normalized local pose back into the world, yaw only.

    The rotation aligns the local head facing with the world camera
    facing using just their horizontal headings, so noisy pitch and
    roll in the prediction cannot tilt the whole body. The translation
    then puts the rig-attached head at the camera position (the inverse
    of the rig mounting offset).

    When either facing is within 5 degrees of vertical the heading is
    unreliable; `fallback_yaw` (the yaw returned for an earlier frame)
    is used instead, and missing that, the call fails.

    Args:
        body_local: (15, 3) keypoints in the normalized body frame.
        head_local: HeadPose in the same frame.
        cam_pose: world CameraPose of the rig.
        scale: similarity scale that produced the local pose (local
            units per meter), undone on the way out.
        fallback_yaw: yaw to reuse when the facing is near vertical.

    Returns:
        (world_keypoints, yaw): the (15, 3) world pose and the yaw that
        was applied, suitable as the next frame's fallback.
    """
    body = as_float_array(body_local, "body_local",
                          shape=(NUM_KEYPOINTS, 3))
    f_local = as_float_array(head_local.f, "head_local.f", shape=(3,))
    u_local = as_float_array(head_local.u, "head_local.u", shape=(3,))
    cam_facing = -cam_pose.rotation[:, 2]
    yaw_world = facing_yaw(cam_facing)
    yaw_local = facing_yaw(f_local)
    if yaw_world is None or yaw_local is None:
        if fallback_yaw is None:
            raise NumericalError(
                "facing direction is near vertical and no fallback yaw"
                " is available")
        yaw = float(fallback_yaw)
    else:
        yaw = yaw_world - yaw_local
    nf = float(np.linalg.norm(f_local))
    nu = float(np.linalg.norm(u_local))
    if nf < 1e-9 or nu < 1e-9:
        raise NumericalError("head axes have near-zero length")
    R = rot_y(yaw)
    f_w = R @ (f_local / nf)
    u_w = R @ (u_local / nu)
    head_w = (cam_pose.position - RIG_FORWARD_OFFSET * f_w
              + RIG_DOWN_OFFSET * u_w)
    rel = (body - body[HEAD]) / scale
    return head_w + rel @ R.T, yaw


def _load_pose_file(filename):
    text = (resources.files("egospan.data") / filename).read_text()
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise DataError(f"{filename}: expected 3 values per row,"
                            f" got {line!r}")
        rows.append([float(v) for v in fields])
    if len(rows) != NUM_KEYPOINTS + 2:
        raise DataError(f"{filename}: expected {NUM_KEYPOINTS + 2} rows,"
                        f" got {len(rows)}")
    arr = np.array(rows)
    return arr[:NUM_KEYPOINTS], HeadPose(f=arr[NUM_KEYPOINTS],
                                         u=arr[NUM_KEYPOINTS + 1])


def baseline_pose(kind):
    """Canonical constant pose used as a no-learning reference.

    Args:
        kind: "allstand" or "allsit" (case insensitive).

    Returns:
        (body, head): normalized (15, 3) keypoints and local HeadPose.
    """
    key = str(kind).lower()
    if key not in _BASELINE_FILES:
        options = ", ".join(sorted(_BASELINE_FILES))
        raise ConfigError(f"unknown baseline {kind!r} (options: {options})")
    return _load_pose_file(_BASELINE_FILES[key])


@dataclass(frozen=True)
class SequenceStats:
    """Per-sequence error summary: averages and spreads per metric."""

    name: str
    frames: int
    keypoint_avg_cm: float
    keypoint_std_cm: float
    facing_avg_deg: float
    facing_std_deg: float
    up_avg_deg: float
    up_std_deg: float


@dataclass(frozen=True)
class EvalReport:
    """Evaluation rollup: one row per sequence plus an overall row."""

    sequences: tuple
    overall: SequenceStats

    def to_csv(self):
        header = ("sequence,frames,keypoint_avg_cm,keypoint_std_cm,"
                  "facing_avg_deg,facing_std_deg,up_avg_deg,up_std_deg")
        lines = [header]
        for s in (*self.sequences, self.overall):
            lines.append(
                f"{s.name},{s.frames},{s.keypoint_avg_cm:.4f},"
                f"{s.keypoint_std_cm:.4f},{s.facing_avg_deg:.4f},"
                f"{s.facing_std_deg:.4f},{s.up_avg_deg:.4f},"
                f"{s.up_std_deg:.4f}")
        return "\n".join(lines) + "\n"

    def to_table(self):
        header = (f"{'sequence':<16}{'frames':>7}"
                  f"{'kp avg':>9}{'kp std':>9}"
                  f"{'f avg':>9}{'f std':>9}{'u avg':>9}{'u std':>9}")
        rows = [header, "-" * len(header)]
        for s in (*self.sequences, self.overall):
            rows.append(
                f"{s.name:<16}{s.frames:>7}"
                f"{s.keypoint_avg_cm:>9.2f}{s.keypoint_std_cm:>9.2f}"
                f"{s.facing_avg_deg:>9.2f}{s.facing_std_deg:>9.2f}"
                f"{s.up_avg_deg:>9.2f}{s.up_std_deg:>9.2f}")
        return "\n".join(rows) + "\n"


def _stats(name, kp, f, u):
    kp = np.asarray(kp, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return SequenceStats(
        name=name, frames=kp.size,
        keypoint_avg_cm=float(kp.mean()), keypoint_std_cm=float(kp.std()),
        facing_avg_deg=float(f.mean()), facing_std_deg=float(f.std()),
        up_avg_deg=float(u.mean()), up_std_deg=float(u.std()))


def build_report(samples):
    """Aggregate per-frame errors into an EvalReport.

    Args:
        samples: iterable of (sequence_name, keypoint_cm, facing_deg,
            up_deg) tuples, one per frame.

    Standard deviations are population deviations over frames; the
    overall row pools every frame, not the per-sequence averages.
    """
    by_name = {}
    order = []
    for name, kp, f, u in samples:
        if name not in by_name:
            by_name[name] = ([], [], [])
            order.append(name)
        by_name[name][0].append(float(kp))
        by_name[name][1].append(float(f))
        by_name[name][2].append(float(u))
    if not order:
        raise DataError("no evaluation samples")
    sequences = tuple(_stats(name, *by_name[name]) for name in order)
    all_kp = np.concatenate([by_name[n][0] for n in order])
    all_f = np.concatenate([by_name[n][1] for n in order])
    all_u = np.concatenate([by_name[n][2] for n in order])
    return EvalReport(sequences=sequences,
                      overall=_stats("overall", all_kp, all_f, all_u))
