"""Motion history images: per-frame camera motion stacked over a window.

Each frame contributes a 13-channel column:

* 9 values: the relative camera rotation between the previous and the
  current frame, expressed in the current camera frame, minus identity,
  flattened row-major;
* 3 values: the camera displacement in a yaw-leveled local frame
  (right, up, forward axes), divided by the wearer's standing camera
  height and amplified by ``DISPLACEMENT_GAIN``;
* 1 value: the camera height above ground as a fraction of standing
  height, shifted by ``HEIGHT_MIDPOINT`` and scaled by
  ``HEIGHT_GAIN``.

Columns are invariant to world yaw and to uniform scene rescaling with
matching calibration, so the features describe the wearer's motion, not
where they are.
"""

import numpy as np

from .exceptions import DataError
from .validation import as_float_array

DISPLACEMENT_GAIN = 15.0
HEIGHT_MIDPOINT = 0.5
HEIGHT_GAIN = 0.3
WINDOW = 64
COLUMN_DIM = 13


def _leveled_axes(rotation):
    """Right/up/forward axes of the yaw-leveled camera frame."""
    f = -rotation[:, 2]
    fh = np.array([f[0], 0.0, f[2]])
    n = np.linalg.norm(fh)
    if n < 1e-6:
        # looking straight up or down: recover heading from the up vector
        u = rotation[:, 1]
        sign = 1.0 if f[1] < 0 else -1.0
        fh = sign * np.array([u[0], 0.0, u[2]])
        n = np.linalg.norm(fh)
        if n < 1e-9:
            raise DataError("camera orientation has no recoverable heading")
    forward = fh / n
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    return right, up, forward


def incremental_motion(prev, curr, calib):
    """13-channel motion column between two consecutive camera poses."""
    rel = curr.rotation.T @ prev.rotation
    right, up, forward = _leveled_axes(curr.rotation)
    d = curr.position - prev.position
    disp = np.array([d @ right, d @ up, d @ forward])
    disp *= DISPLACEMENT_GAIN / calib.standing_height
    g = (curr.position[1] - calib.ground_y) / calib.standing_height
    column = np.empty(COLUMN_DIM)
    column[:9] = (rel - np.eye(3)).reshape(-1)
    column[9:12] = disp
    column[12] = HEIGHT_GAIN * (g - HEIGHT_MIDPOINT)
    return column


def motion_columns(trajectory, calib):
    """Columns for frames 1..F-1 of a camera trajectory, as (F-1, 13)."""
    if len(trajectory) < 2:
        raise DataError("trajectory needs at least 2 frames")
    return np.stack([incremental_motion(trajectory[i - 1], trajectory[i], calib)
                     for i in range(1, len(trajectory))])


def history_from_columns(columns, t, window=WINDOW):
    """Assemble the (window, 13) history ending at frame t.

    ``columns[k]`` is the motion column of frame k+1. Frames earlier
    than the first available column repeat it (standstill padding with
    the earliest observed motion).
    """
    columns = as_float_array(columns, "columns", ndim=2)
    if columns.shape[1] != COLUMN_DIM:
        raise DataError(f"columns must be (*, {COLUMN_DIM})")
    if not 1 <= t <= columns.shape[0]:
        raise DataError(f"frame {t} outside 1..{columns.shape[0]}")
    out = np.empty((window, COLUMN_DIM))
    for row in range(window):
        frame = t - window + 1 + row
        out[row] = columns[max(frame, 1) - 1]
    return out


def build_motion_history(trajectory, t, calib, window=WINDOW):
    """Motion history image (window, 13) for frame t of a trajectory.

    Row ``window - 1`` is the newest frame; windows reaching before the
    start of the clip repeat the earliest column.
    """
    if not 1 <= t < len(trajectory):
        raise DataError(f"frame {t} outside 1..{len(trajectory) - 1}")
    start = max(1, t - window + 1)
    cols = {k: incremental_motion(trajectory[k - 1], trajectory[k], calib)
            for k in range(start, t + 1)}
    out = np.empty((window, COLUMN_DIM))
    for row in range(window):
        frame = t - window + 1 + row
        out[row] = cols[max(frame, start)]
    return out
