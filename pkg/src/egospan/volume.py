"""Binary occupancy volume built by back-projecting a silhouette.

The refinement stage consumes a cube of voxels anchored to the wearer's
head: a voxel is occupied when its center projects onto a foreground
pixel of the silhouette mask. The cube rides the wearer's horizontal
heading but stays upright, so pitching or rolling the head never tilts
the grid.
"""

from dataclasses import dataclass

import numpy as np

from .camera import project
from .exceptions import DataError, NumericalError
from .validation import as_float_array, check_positive

VOLUME_GRID = 41
DEFAULT_VOLUME_SIDE = 2.0 ** (1.0 / 3.0)
CENTER_DROP = 0.63
WORLD_UP = np.array([0.0, 1.0, 0.0])

_MAGIC = "posevolume v1"


def _orthonormal_head(f, u):
    f = as_float_array(f, "f", shape=(3,))
    u = as_float_array(u, "u", shape=(3,))
    nf = float(np.linalg.norm(f))
    if nf < 1e-9:
        raise NumericalError("head facing vector has near-zero length")
    fn = f / nf
    ur = u - float(u @ fn) * fn
    nu = float(np.linalg.norm(ur))
    if nu < 1e-9:
        raise NumericalError("head up vector is parallel to the facing")
    return fn, ur / nu


def yaw_level_frame(f, u):
    """World-from-local rotation of the yaw-leveled head frame.

    The local frame keeps the wearer's horizontal heading (x right,
    y world-up, z backward) regardless of head pitch or roll. When the
    face points straight up or down the heading comes from the skull's
    up axis instead, which is horizontal in exactly that situation.
    """
    fn, un = _orthonormal_head(f, u)
    fh = fn - float(fn @ WORLD_UP) * WORLD_UP
    if float(np.linalg.norm(fh)) < 1e-9:
        uh = un - float(un @ WORLD_UP) * WORLD_UP
        fh = uh if float(fn @ WORLD_UP) < 0.0 else -uh
    fwd = fh / float(np.linalg.norm(fh))
    return np.stack([np.cross(fwd, WORLD_UP), WORLD_UP, -fwd], axis=1)


def world_to_volume_frame(points, f, u, camera_position):
    """Express world points in the yaw-leveled head frame at the camera."""
    frame = yaw_level_frame(f, u)
    pos = as_float_array(camera_position, "camera_position", shape=(3,))
    pts = np.asarray(points, dtype=np.float64)
    return (pts - pos) @ frame


@dataclass(frozen=True)
class PoseVolume:
    """Occupancy cube in the yaw-leveled head frame.

    origin is the corner of the cube in that frame (the camera sits at
    the frame's origin); voxel [i, j, k] spans origin + [i, j, k] *
    voxel_size along the frame's x, y, z axes.
    """

    grid: np.ndarray
    origin: np.ndarray
    voxel_size: float

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.uint8)
        if g.shape != (VOLUME_GRID,) * 3:
            raise DataError(f"grid must be {(VOLUME_GRID,) * 3},"
                            f" got {g.shape}")
        object.__setattr__(self, "grid", g)
        object.__setattr__(
            self, "origin", as_float_array(self.origin, "origin", shape=(3,)))
        check_positive(self.voxel_size, "voxel_size")

    @property
    def side(self):
        return self.voxel_size * VOLUME_GRID

    def voxel_index(self, point_local):
        """Grid index containing a point, or None when outside the cube."""
        p = as_float_array(point_local, "point_local", shape=(3,))
        idx = np.floor((p - self.origin) / self.voxel_size).astype(int)
        if np.any(idx < 0) or np.any(idx >= VOLUME_GRID):
            return None
        return tuple(int(v) for v in idx)

    def occupied(self, point_local):
        """True when the point falls inside an occupied voxel."""
        idx = self.voxel_index(point_local)
        return bool(idx is not None and self.grid[idx])

    def voxel_centers(self):
        """Centers of every voxel in the local frame, shape (41, 41, 41, 3)."""
        per_axis = [self.origin[a]
                    + (np.arange(VOLUME_GRID) + 0.5) * self.voxel_size
                    for a in range(3)]
        ii, jj, kk = np.meshgrid(*per_axis, indexing="ij")
        return np.stack([ii, jj, kk], axis=-1)


def build_pose_volume(mask, head, intrinsics, side=DEFAULT_VOLUME_SIDE):
    """Back-project a silhouette into an occupancy cube around the wearer.

    The cube is centered CENTER_DROP meters straight below the camera in
    the yaw-leveled head frame. A voxel is set when its center lies in
    front of the camera, projects inside the field of view, and the
    nearest mask pixel (clamped to the image) is foreground.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DataError(f"mask must be 2-d, got shape {m.shape}")
    if m.shape != (intrinsics.height, intrinsics.width):
        raise DataError(
            f"mask shape {m.shape} does not match intrinsics"
            f" {(intrinsics.height, intrinsics.width)}")
    check_positive(side, "side")
    fn, un = _orthonormal_head(head.f, head.u)
    cam_rot = np.stack([np.cross(fn, un), un, -fn], axis=1)
    frame = yaw_level_frame(fn, un)
    local_to_cam = cam_rot.T @ frame

    voxel_size = side / VOLUME_GRID
    origin = np.array([-0.5 * side, -CENTER_DROP - 0.5 * side, -0.5 * side])
    centers = origin + (np.stack(np.meshgrid(*[np.arange(VOLUME_GRID)] * 3,
                                             indexing="ij"),
                                 axis=-1) + 0.5) * voxel_size
    flat = centers.reshape(-1, 3)
    p_cam = flat @ local_to_cam.T
    pix, valid = project(p_cam, intrinsics)
    cols = np.clip(np.rint(pix[:, 0]).astype(int), 0, intrinsics.width - 1)
    rows = np.clip(np.rint(pix[:, 1]).astype(int), 0, intrinsics.height - 1)
    occupied = valid & (p_cam[:, 2] < 0.0) & (m[rows, cols] != 0)
    grid = occupied.reshape((VOLUME_GRID,) * 3).astype(np.uint8)
    return PoseVolume(grid=grid, origin=origin, voxel_size=voxel_size)


def save_volume(vol, path):
    """Write an occupancy volume as an ASCII header plus a packed bitset."""
    lines = [_MAGIC,
             "dims {} {} {}".format(*vol.grid.shape),
             "origin {!r} {!r} {!r}".format(*vol.origin.tolist()),
             f"voxel_size {vol.voxel_size!r}",
             "end"]
    payload = np.packbits(vol.grid.ravel().astype(bool)).tobytes()
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii") + b"\n")
        fh.write(payload)


def load_volume(path):
    """Read a volume written by save_volume, validating the header."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = blob.find(b"\nend\n")
    if marker < 0:
        raise DataError(f"{path}: missing header terminator")
    header = blob[:marker].decode("ascii", errors="replace").split("\n")
    payload = blob[marker + len(b"\nend\n"):]
    if header[0] != _MAGIC:
        raise DataError(f"{path}: bad magic line {header[0]!r}")
    dims = None
    origin = None
    voxel_size = None
    for line in header[1:]:
        fields = line.split()
        if not fields:
            raise DataError(f"{path}: blank header line")
        if fields[0] == "dims":
            dims = tuple(int(v) for v in fields[1:])
        elif fields[0] == "origin":
            origin = np.array([float(v) for v in fields[1:]])
        elif fields[0] == "voxel_size":
            voxel_size = float(fields[1])
        else:
            raise DataError(f"{path}: unknown header line {line!r}")
    if dims is None or origin is None or voxel_size is None:
        raise DataError(f"{path}: incomplete header")
    if dims != (VOLUME_GRID,) * 3:
        raise DataError(f"{path}: dims {dims} are not {(VOLUME_GRID,) * 3}")
    total = VOLUME_GRID ** 3
    expected = (total + 7) // 8
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes,"
                        f" expected {expected}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if bits[total:].any():
        raise DataError(f"{path}: nonzero padding bits")
    grid = bits[:total].reshape((VOLUME_GRID,) * 3)
    return PoseVolume(grid=grid, origin=origin, voxel_size=voxel_size)
