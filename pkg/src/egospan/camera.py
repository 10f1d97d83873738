"""Fisheye camera model and head-mounted rig geometry.

Conventions used throughout the package:

* world and camera frames are right-handed with y up;
* the camera looks along its local -z axis, +x right, +y up;
* image coordinates are (px, py) with px growing right and py growing
  down, so camera +y maps to -py;
* the lens follows the equidistant fisheye model r = focal * theta,
  where theta is the angle between a ray and the optical axis.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, NumericalError
from .validation import as_float_array, check_positive, check_rotation

RIG_FORWARD_OFFSET = 0.07
RIG_DOWN_OFFSET = 0.03
SQUAT_CLEARANCE = 0.55
MIN_CALIBRATION_SPAN = 0.3


@dataclass(frozen=True)
class FisheyeIntrinsics:
    """Equidistant fisheye intrinsics.

    focal is expressed in pixels per radian; a ray theta radians off the
    optical axis lands focal * theta pixels from the principal point.
    """

    width: int
    height: int
    fov: float
    focal: float
    cx: float
    cy: float

    @classmethod
    def make(cls, width=256, height=256, fov=math.pi):
        """Build intrinsics whose image circle inscribes the frame."""
        check_positive(width, "width")
        check_positive(height, "height")
        if not 0 < fov <= 2 * math.pi:
            raise ConfigError(f"fov must be in (0, 2*pi], got {fov!r}")
        focal = (min(width, height) / 2.0) / (fov / 2.0)
        return cls(int(width), int(height), float(fov),
                   focal, width / 2.0, height / 2.0)

    @property
    def rim_radius(self):
        """Pixel radius of the theta == fov/2 circle."""
        return self.focal * self.fov / 2.0


@dataclass(frozen=True)
class CameraPose:
    """World pose of the camera: rotation is world-from-camera."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           check_rotation(self.rotation, "CameraPose.rotation"))
        object.__setattr__(self, "position",
                           as_float_array(self.position, "CameraPose.position",
                                          shape=(3,)))

    def world_to_camera(self, points):
        """Map world points (..., 3) into the camera frame."""
        points = np.asarray(points, dtype=np.float64)
        return (points - self.position) @ self.rotation

    def camera_to_world(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.position


@dataclass(frozen=True)
class HeadPose:
    """Head orientation: f faces out of the face, u points out of the skull top."""

    f: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    u: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "f", as_float_array(self.f, "HeadPose.f",
                                                     shape=(3,)))
        object.__setattr__(self, "u", as_float_array(self.u, "HeadPose.u",
                                                     shape=(3,)))


@dataclass(frozen=True)
class HeightCalibration:
    """Stand/squat calibration: wearer's standing camera height and floor level."""

    standing_height: float
    ground_y: float


def project(points, intrinsics):
    """Project camera-frame points through the equidistant fisheye.

    Args:
        points: (..., 3) array in the camera frame.
        intrinsics: FisheyeIntrinsics.

    Returns:
        (pixels, valid): pixels is (..., 2) float64 (px, py); valid is a
        boolean array marking rays strictly inside the field of view
        (theta < fov / 2). Pixels are computed for invalid points too
        whenever the math is defined, but only valid ones are meaningful.
    """
    p = as_float_array(points, "points")
    if p.shape[-1] != 3:
        raise NumericalError(f"points: last axis must be 3, got {p.shape}")
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, -z)
    # focal * theta / rho, with the on-axis limit focal / (-z)
    safe_rho = np.where(rho > 1e-12, rho, 1.0)
    scale = np.where(
        rho > 1e-12,
        intrinsics.focal * theta / safe_rho,
        intrinsics.focal / np.where(np.abs(z) > 1e-12, -z, 1.0),
    )
    px = intrinsics.cx + scale * x
    py = intrinsics.cy - scale * y
    valid = theta < intrinsics.fov / 2.0
    return np.stack([px, py], axis=-1), valid


def project_with_jacobian(points, intrinsics):
    """project() plus the (..., 2, 3) Jacobian d(px, py)/d(x, y, z)."""
    p = as_float_array(points, "points")
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho2 = x * x + y * y
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    theta = np.arctan2(rho, -z)
    f = intrinsics.focal

    on_axis = rho <= 1e-9
    safe_rho = np.where(on_axis, 1.0, rho)
    safe_z = np.where(np.abs(z) > 1e-12, z, -1.0)

    scale = np.where(on_axis, f / -safe_z, f * theta / safe_rho)
    # dtheta/drho and dtheta/dz from atan2(rho, -z)
    dth_drho = -z / r2
    dth_dz = rho / r2
    # A = f * (dth_drho * rho - theta) / rho^2, smooth O(rho) near the axis
    A = np.where(on_axis, 0.0, f * (dth_drho * safe_rho - theta) / safe_rho**2)
    ds_dx = A * x / safe_rho
    ds_dy = A * y / safe_rho
    ds_dz = np.where(on_axis, f / safe_z**2, f * dth_dz / safe_rho)

    J = np.empty(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = scale + x * ds_dx
    J[..., 0, 1] = x * ds_dy
    J[..., 0, 2] = x * ds_dz
    J[..., 1, 0] = -y * ds_dx
    J[..., 1, 1] = -scale - y * ds_dy
    J[..., 1, 2] = -y * ds_dz

    px = intrinsics.cx + scale * x
    py = intrinsics.cy - scale * y
    valid = theta < intrinsics.fov / 2.0
    return np.stack([px, py], axis=-1), valid, J


def backproject(pixels, intrinsics):
    """Map pixels (..., 2) to unit rays (..., 3) in the camera frame."""
    q = as_float_array(pixels, "pixels")
    dx = q[..., 0] - intrinsics.cx
    dy = intrinsics.cy - q[..., 1]
    r = np.hypot(dx, dy)
    theta = r / intrinsics.focal
    safe_r = np.where(r > 1e-12, r, 1.0)
    sin_over_r = np.where(r > 1e-12, np.sin(theta) / safe_r, 1.0 / intrinsics.focal)
    ray = np.stack([sin_over_r * dx, sin_over_r * dy, -np.cos(theta)], axis=-1)
    return ray


def _orthonormal_pair(f, u):
    f = as_float_array(f, "f", shape=(3,))
    u = as_float_array(u, "u", shape=(3,))
    nf = np.linalg.norm(f)
    nu = np.linalg.norm(u)
    if nf < 1e-9 or nu < 1e-9:
        raise NumericalError("head orientation vectors must be nonzero")
    if abs(nf - 1.0) > 1e-6 or abs(nu - 1.0) > 1e-6:
        raise NumericalError("head orientation vectors must be unit length")
    if abs(np.dot(f, u)) > 1e-6:
        raise NumericalError("head orientation vectors must be orthogonal")
    f = f / nf
    u = u - np.dot(u, f) * f
    u = u / np.linalg.norm(u)
    return f, u


def head_to_camera(head, position=None):
    """Rotation of a camera rigidly aligned with the head.

    The camera's -z axis is aligned with the facing vector f and its +y
    axis with the head-up vector u. Returns a CameraPose at `position`
    (default origin).
    """
    f, u = _orthonormal_pair(head.f, head.u)
    x_axis = np.cross(f, u)
    R = np.stack([x_axis, u, -f], axis=1)
    if position is None:
        position = np.zeros(3)
    return CameraPose(rotation=R, position=position)


def attach_rig(head_keypoint, head):
    """Pose of the head-mounted camera for a given head keypoint and orientation.

    The camera sits slightly in front of and below the head keypoint,
    between the eyes: head + 0.07 * f - 0.03 * u.
    """
    k = as_float_array(head_keypoint, "head_keypoint", shape=(3,))
    f, u = _orthonormal_pair(head.f, head.u)
    position = k + RIG_FORWARD_OFFSET * f - RIG_DOWN_OFFSET * u
    return head_to_camera(HeadPose(f=f, u=u), position=position)


def calibrate_height(trajectory, squat_clearance=SQUAT_CLEARANCE):
    """Estimate (standing camera height above ground, ground level).

    Expects a stand-then-squat calibration clip. The floor is placed
    `squat_clearance` metres below the mean of the lowest decile of
    camera heights; the standing height is the mean of the highest
    decile measured from that floor.

    Returns:
        HeightCalibration.

    Raises:
        NumericalError: when the clip spans less than 0.3 m vertically.
    """
    if hasattr(trajectory, "dtype") or (len(trajectory) and
                                        not hasattr(trajectory[0], "position")):
        ys = as_float_array(trajectory, "trajectory", ndim=1)
    else:
        ys = np.array([pose.position[1] for pose in trajectory], dtype=np.float64)
    if ys.size < 10:
        raise NumericalError(
            f"calibration clip too short: {ys.size} frames, need >= 10")
    span = float(np.max(ys) - np.min(ys))
    if span < MIN_CALIBRATION_SPAN:
        raise NumericalError(
            f"calibration clip spans {span:.3f} m vertically, need >= "
            f"{MIN_CALIBRATION_SPAN} m (stand then squat)")
    ys = np.sort(ys)
    k = max(1, ys.size // 10)
    ground_y = float(np.mean(ys[:k])) - squat_clearance
    standing = float(np.mean(ys[-k:])) - ground_y
    if standing <= 0:
        raise NumericalError(f"calibration produced standing height {standing:.3f}")
    return HeightCalibration(standing_height=standing, ground_y=ground_y)
