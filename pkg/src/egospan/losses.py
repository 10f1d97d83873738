"""Training losses: keypoint regression plus geometric consistency terms.

Four ingredients combine into the total training loss:

* an L1 term on body coordinates (and head orientation in stage 1);
* an orientation regularizer pushing the predicted facing/up vectors
  toward an orthonormal pair;
* a bone symmetry penalty over mirrored limb pairs;
* a silhouette consistency penalty that projects the predicted pose
  through the rig camera implied by the predicted head orientation and
  charges each keypoint the (truncated) distance-field value at its
  pixel.

Every loss has a plain value form and a ``*_grad`` form returning the
value together with analytic gradients; all of them are verified
against finite differences in the test suite.
"""

import math
from dataclasses import dataclass

import numpy as np

from .camera import (
    RIG_DOWN_OFFSET,
    RIG_FORWARD_OFFSET,
    CameraPose,
    project_with_jacobian,
)
from .exceptions import ConfigError, DataError
from .skeleton import HEAD, NUM_KEYPOINTS, SYMMETRIC_BONE_PAIRS
from .validation import as_float_array

__all__ = [
    "DEFAULT_TRUNCATION",
    "LossWeights",
    "bilinear_sample",
    "bone_symmetry_grad",
    "bone_symmetry_loss",
    "distance_transform",
    "orientation_unit_grad",
    "orientation_unit_loss",
    "pose_l1_grad",
    "pose_l1_loss",
    "rig_camera_from_prediction",
    "silhouette_consistency_grad",
    "silhouette_consistency_loss",
    "silhouette_consistency_terms",
    "total_loss",
    "total_loss_grad",
]

DEFAULT_TRUNCATION = 20.0


@dataclass(frozen=True)
class LossWeights:
    """Term weights and the consistency truncation radius (pixels)."""

    alpha: float = 0.01
    beta: float = 0.01
    gamma: float = 0.001
    q: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "q"):
            if getattr(self, name) < 0:
                raise ConfigError(f"LossWeights.{name} must be >= 0")


def _as_pose(x, name):
    arr = as_float_array(x, name)
    if arr.shape == (NUM_KEYPOINTS * 3,):
        arr = arr.reshape(NUM_KEYPOINTS, 3)
    if arr.shape != (NUM_KEYPOINTS, 3):
        raise DataError(
            f"{name}: expected ({NUM_KEYPOINTS}, 3) or flat "
            f"({NUM_KEYPOINTS * 3},), got {arr.shape}")
    return arr


def pose_l1_loss(pred_body, true_body, pred_head=None, true_head=None):
    """Sum of absolute coordinate errors, plus head terms when given.

    Heads are 6-vectors (facing then up, concatenated). Passing neither
    head drops the orientation part, the stage-2 configuration.
    """
    pb = _as_pose(pred_body, "pred_body")
    tb = _as_pose(true_body, "true_body")
    value = float(np.abs(pb - tb).sum())
    if (pred_head is None) != (true_head is None):
        raise DataError("pose_l1_loss needs both heads or neither")
    if pred_head is not None:
        ph = as_float_array(pred_head, "pred_head", shape=(6,))
        th = as_float_array(true_head, "true_head", shape=(6,))
        value += float(np.abs(ph - th).sum())
    return value


def pose_l1_grad(pred_body, true_body, pred_head=None, true_head=None):
    """(value, d/d pred_body (15, 3), d/d pred_head (6,) or None)."""
    pb = _as_pose(pred_body, "pred_body")
    tb = _as_pose(true_body, "true_body")
    value = float(np.abs(pb - tb).sum())
    gbody = np.sign(pb - tb)
    ghead = None
    if (pred_head is None) != (true_head is None):
        raise DataError("pose_l1_grad needs both heads or neither")
    if pred_head is not None:
        ph = as_float_array(pred_head, "pred_head", shape=(6,))
        th = as_float_array(true_head, "true_head", shape=(6,))
        value += float(np.abs(ph - th).sum())
        ghead = np.sign(ph - th)
    return value, gbody, ghead


def orientation_unit_loss(f, u):
    """|f.u| + |(f.f) - 1| + |(u.u) - 1|: zero exactly on orthonormal pairs."""
    f = as_float_array(f, "f", shape=(3,))
    u = as_float_array(u, "u", shape=(3,))
    return float(abs(f @ u) + abs(f @ f - 1.0) + abs(u @ u - 1.0))


def orientation_unit_grad(f, u):
    """(value, d/df, d/du)."""
    f = as_float_array(f, "f", shape=(3,))
    u = as_float_array(u, "u", shape=(3,))
    dot = float(f @ u)
    nf = float(f @ f) - 1.0
    nu = float(u @ u) - 1.0
    value = abs(dot) + abs(nf) + abs(nu)
    gf = np.sign(dot) * u + np.sign(nf) * 2.0 * f
    gu = np.sign(dot) * f + np.sign(nu) * 2.0 * u
    return value, gf, gu


def bone_symmetry_loss(body, pairs=SYMMETRIC_BONE_PAIRS):
    """Sum over mirrored bone pairs of |left length - right length|."""
    kp = _as_pose(body, "body")
    total = 0.0
    for (i, j), (k, m) in pairs:
        total += abs(float(np.linalg.norm(kp[i] - kp[j]))
                     - float(np.linalg.norm(kp[k] - kp[m])))
    return total


def bone_symmetry_grad(body, pairs=SYMMETRIC_BONE_PAIRS):
    """(value, d/d body (15, 3))."""
    kp = _as_pose(body, "body")
    grad = np.zeros_like(kp)
    total = 0.0
    for (i, j), (k, m) in pairs:
        va = kp[i] - kp[j]
        vb = kp[k] - kp[m]
        la = float(np.linalg.norm(va))
        lb = float(np.linalg.norm(vb))
        total += abs(la - lb)
        s = np.sign(la - lb)
        if la > 1e-12:
            grad[i] += s * va / la
            grad[j] -= s * va / la
        if lb > 1e-12:
            grad[k] -= s * vb / lb
            grad[m] += s * vb / lb
    return total, grad


def distance_transform(mask):
    """Exact Euclidean distance (pixels) to the nearest foreground pixel.

    Column sweeps find the nearest foreground row per column, then each
    row takes an exact minimum over source columns of the combined
    squared distance. Backgrounds with no foreground at all come out as
    a uniform value of at least the image diagonal.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DataError(f"mask must be 2d, got shape {m.shape}")
    fg = m != 0
    height, width = m.shape
    sentinel = float(height + width)
    g = np.where(fg, 0.0, sentinel)
    for r in range(1, height):
        np.minimum(g[r], g[r - 1] + 1.0, out=g[r])
    for r in range(height - 2, -1, -1):
        np.minimum(g[r], g[r + 1] + 1.0, out=g[r])
    cols = np.arange(width, dtype=np.float64)
    delta2 = (cols[:, None] - cols[None, :]) ** 2
    out = np.empty((height, width))
    rows_per_chunk = max(1, 2_000_000 // (width * width))
    for r0 in range(0, height, rows_per_chunk):
        gs = g[r0:r0 + rows_per_chunk] ** 2
        combined = delta2[None, :, :] + gs[:, None, :]
        out[r0:r0 + rows_per_chunk] = np.sqrt(combined.min(axis=2))
    return out


def bilinear_sample(field, x, y, with_grad=False):
    """Sample a 2d field at continuous (x=column, y=row) positions.

    Coordinates are clamped to the field; where clamping bites, the
    spatial gradient is zero. Returns values, or (values, dx, dy).
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise DataError(f"field must be 2d, got shape {f.shape}")
    height, width = f.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = np.clip(x, 0.0, width - 1.0)
    yc = np.clip(y, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(xc), width - 2.0).astype(int) if width > 1 \
        else np.zeros_like(xc, dtype=int)
    y0 = np.minimum(np.floor(yc), height - 2.0).astype(int) if height > 1 \
        else np.zeros_like(yc, dtype=int)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    v00 = f[y0, x0]
    v01 = f[y0, x1]
    v10 = f[y1, x0]
    v11 = f[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    values = top * (1.0 - fy) + bot * fy
    if not with_grad:
        return values
    inside_x = (x == xc).astype(np.float64)
    inside_y = (y == yc).astype(np.float64)
    dx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) * inside_x
    dy = (bot - top) * inside_y
    return values, dx, dy


def rig_camera_from_prediction(body, f, u):
    """Camera pose implied by a predicted pose and head orientation.

    The head frame is orthonormalized leniently (predictions are never
    exactly orthonormal); returns None when it is degenerate, which the
    consistency loss treats as nothing being projectable.
    """
    kp = _as_pose(body, "body")
    f = as_float_array(f, "f", shape=(3,))
    u = as_float_array(u, "u", shape=(3,))
    nf = float(np.linalg.norm(f))
    if nf < 1e-9:
        return None
    fn = f / nf
    ur = u - float(u @ fn) * fn
    nu = float(np.linalg.norm(ur))
    if nu < 1e-9:
        return None
    un = ur / nu
    position = kp[HEAD] + RIG_FORWARD_OFFSET * fn - RIG_DOWN_OFFSET * un
    rotation = np.stack([np.cross(fn, un), un, -fn], axis=1)
    return CameraPose(rotation=rotation, position=position)


def silhouette_consistency_terms(body, f, u, dist_field, intrinsics,
                                 q=DEFAULT_TRUNCATION, cam=None):
    """Per-keypoint truncated distance-field charges, shape (15,).

    Each keypoint is projected through the rig camera implied by the
    head orientation (or an explicitly supplied camera); its charge is
    the bilinearly sampled distance capped at q. Keypoints that do not
    project (behind the hemisphere, or no valid camera) charge q.
    """
    kp = _as_pose(body, "body")
    field = np.asarray(dist_field, dtype=np.float64)
    if cam is None:
        cam = rig_camera_from_prediction(kp, f, u)
    if cam is None:
        return np.full(NUM_KEYPOINTS, float(q))
    pix, valid, _ = project_with_jacobian(cam.world_to_camera(kp), intrinsics)
    sampled = bilinear_sample(field, pix[:, 0], pix[:, 1])
    return np.where(valid, np.minimum(sampled, float(q)), float(q))


def silhouette_consistency_loss(body, f, u, dist_field, intrinsics,
                                q=DEFAULT_TRUNCATION, cam=None):
    """Sum of the per-keypoint truncated distance charges."""
    return float(silhouette_consistency_terms(
        body, f, u, dist_field, intrinsics, q=q, cam=cam).sum())


def silhouette_consistency_grad(body, f, u, dist_field, intrinsics,
                                q=DEFAULT_TRUNCATION, cam=None):
    """(value, d/d body (15, 3)).

    The gradient flows only into the body keypoints through the
    projection Jacobian; the camera implied by the head orientation is
    held fixed (no gradient into f, u, or through the camera position).
    """
    kp = _as_pose(body, "body")
    field = np.asarray(dist_field, dtype=np.float64)
    if cam is None:
        cam = rig_camera_from_prediction(kp, f, u)
    grad = np.zeros_like(kp)
    if cam is None:
        return float(NUM_KEYPOINTS * q), grad
    pix, valid, jac = project_with_jacobian(cam.world_to_camera(kp),
                                            intrinsics)
    sampled, dx, dy = bilinear_sample(field, pix[:, 0], pix[:, 1],
                                      with_grad=True)
    terms = np.where(valid, np.minimum(sampled, float(q)), float(q))
    live = valid & (sampled < q)
    # d pixel / d world point: projection Jacobian times the camera rotation
    for k in np.nonzero(live)[0]:
        gpix = np.array([dx[k], dy[k]])
        grad[k] = cam.rotation @ (jac[k].T @ gpix)
    return float(terms.sum()), grad


def total_loss(pred_body, pred_f, pred_u, true_body, true_f, true_u,
               dist_field=None, intrinsics=None, weights=None, stage=1,
               cam=None):
    """Combined training loss -> (value, breakdown dict).

    Stage 1 charges all four terms; stage 2 drops the head orientation
    from the L1 term and the orientation regularizer entirely (the
    refinement stage only moves body keypoints).
    """
    value, breakdown, _ = _total(pred_body, pred_f, pred_u, true_body,
                                 true_f, true_u, dist_field, intrinsics,
                                 weights, stage, cam, with_grad=False)
    return value, breakdown


def total_loss_grad(pred_body, pred_f, pred_u, true_body, true_f, true_u,
                    dist_field=None, intrinsics=None, weights=None, stage=1,
                    cam=None):
    """total_loss plus gradients {body (15, 3), f (3,), u (3,)}."""
    return _total(pred_body, pred_f, pred_u, true_body, true_f, true_u,
                  dist_field, intrinsics, weights, stage, cam,
                  with_grad=True)


def _total(pred_body, pred_f, pred_u, true_body, true_f, true_u,
           dist_field, intrinsics, weights, stage, cam, with_grad):
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage!r}")
    w = weights if weights is not None else LossWeights()
    pb = _as_pose(pred_body, "pred_body")
    tb = _as_pose(true_body, "true_body")
    pf = as_float_array(pred_f, "pred_f", shape=(3,))
    pu = as_float_array(pred_u, "pred_u", shape=(3,))
    tf = as_float_array(true_f, "true_f", shape=(3,))
    tu = as_float_array(true_u, "true_u", shape=(3,))

    gbody = np.zeros_like(pb)
    gf = np.zeros(3)
    gu = np.zeros(3)

    if stage == 1:
        pose, g_b, g_h = pose_l1_grad(pb, tb, np.concatenate([pf, pu]),
                                      np.concatenate([tf, tu]))
        orient, gof, gou = orientation_unit_grad(pf, pu)
        gf += g_h[:3] + w.alpha * gof
        gu += g_h[3:] + w.alpha * gou
    else:
        pose, g_b, _ = pose_l1_grad(pb, tb)
        orient = 0.0
    gbody += g_b

    sym, g_s = bone_symmetry_grad(pb)
    gbody += w.beta * g_s

    consistency = 0.0
    if w.gamma > 0.0:
        if dist_field is None or intrinsics is None:
            raise ConfigError(
                "total_loss needs dist_field and intrinsics when the "
                "consistency weight is nonzero")
        consistency, g_c = silhouette_consistency_grad(
            pb, pf, pu, dist_field, intrinsics, q=w.q, cam=cam)
        gbody += w.gamma * g_c

    value = pose + w.alpha * orient + w.beta * sym + w.gamma * consistency
    breakdown = {
        "pose": pose,
        "orientation": orient,
        "symmetry": sym,
        "consistency": consistency,
        "total": value,
    }
    if not with_grad:
        return value, breakdown, None
    return value, breakdown, {"body": gbody, "f": gf, "u": gu}
