"""Synthetic egocentric sequences: a capsule body rendered through the rig.

A skeleton track (procedural motion, parsed mocap clip, or raw keypoint
array) is dressed in capsules, the head-mounted fisheye camera is
attached, and each frame is rendered to a ground-truth silhouette with
an optional shaded composite over a procedural background. Labels come
out normalized to the canonical body frame together with the camera
track and motion history, so the whole pipeline downstream of capture
can be trained and evaluated without any real footage.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import (
    CameraPose,
    FisheyeIntrinsics,
    HeadPose,
    HeightCalibration,
    attach_rig,
    backproject,
)
from .exceptions import ConfigError, DataError, NumericalError
from .motionhist import build_motion_history
from .motions import BodyShape, make_motion, procedural_motions
from .skeleton import (
    HEAD,
    L_ANKLE,
    L_ELBOW,
    L_HIP,
    L_KNEE,
    L_SHOULDER,
    L_WRIST,
    NECK,
    NUM_KEYPOINTS,
    PELVIS,
    R_ANKLE,
    R_ELBOW,
    R_HIP,
    R_KNEE,
    R_SHOULDER,
    R_WRIST,
    BvhClip,
    extract_keypoints,
    load_joint_map,
    normalize_pose,
    rot_x,
    rot_y,
    rot_z,
)
from .validation import as_float_array

__all__ = [
    "CAPSULE_SPECS",
    "NEAR_CLIP",
    "CapsuleBody",
    "LabeledFrame",
    "SlamNoise",
    "capsule_clearance",
    "composite_input",
    "generate_sequence",
    "head_pose_from_keypoints",
    "procedural_background",
    "procedural_motions",
    "render_frame",
    "render_silhouette",
    "resolve_workers",
]

NEAR_CLIP = 0.05

# (name, (keypoint a, keypoint b), radius in metres)
CAPSULE_SPECS = (
    ("torso", (PELVIS, NECK), 0.13),
    ("head", (NECK, HEAD), 0.10),
    ("l_upper_arm", (L_SHOULDER, L_ELBOW), 0.045),
    ("r_upper_arm", (R_SHOULDER, R_ELBOW), 0.045),
    ("l_forearm", (L_ELBOW, L_WRIST), 0.04),
    ("r_forearm", (R_ELBOW, R_WRIST), 0.04),
    ("l_thigh", (L_HIP, L_KNEE), 0.07),
    ("r_thigh", (R_HIP, R_KNEE), 0.07),
    ("l_shin", (L_KNEE, L_ANKLE), 0.05),
    ("r_shin", (R_KNEE, R_ANKLE), 0.05),
)


@dataclass(frozen=True)
class CapsuleBody:
    """The body as capsules strung between keypoints.

    capsules holds (name, (i, j), radius) triples indexing the canonical
    keypoints. The default build leaves the head capsule out: the rig
    camera sits inside it, so to the wearer's own camera the head is
    never a visible surface and including it would flood every mask.
    """

    capsules: tuple

    def __post_init__(self):
        if not self.capsules:
            raise ConfigError("CapsuleBody needs at least one capsule")
        for name, (i, j), radius in self.capsules:
            if not (0 <= i < NUM_KEYPOINTS and 0 <= j < NUM_KEYPOINTS):
                raise ConfigError(
                    f"capsule {name!r} references keypoints ({i}, {j}) "
                    f"outside 0..{NUM_KEYPOINTS - 1}")
            if not radius > 0:
                raise ConfigError(f"capsule {name!r} has radius {radius!r}")

    @classmethod
    def make(cls, radius_scale=1.0, include_head=False):
        if not radius_scale > 0:
            raise ConfigError(f"radius_scale must be > 0, got {radius_scale!r}")
        caps = tuple(
            (name, bone, radius * radius_scale)
            for name, bone, radius in CAPSULE_SPECS
            if include_head or name != "head")
        return cls(capsules=caps)


def capsule_clearance(keypoints, body, position):
    """Signed distance from a point to the nearest capsule surface.

    Positive means the point is outside every capsule; the rig camera
    must stay clear or its own body would fill the frame.
    """
    kp = as_float_array(keypoints, "keypoints", shape=(NUM_KEYPOINTS, 3))
    p = as_float_array(position, "position", shape=(3,))
    best = np.inf
    for _, (i, j), radius in body.capsules:
        a, b = kp[i], kp[j]
        axis = b - a
        denom = float(axis @ axis)
        s = 0.0 if denom < 1e-18 else float(np.clip((p - a) @ axis / denom,
                                                    0.0, 1.0))
        best = min(best, float(np.linalg.norm(p - (a + s * axis))) - radius)
    return best


_RAY_CACHE = {}


def _ray_grid(intrinsics):
    """(inside, rays): pixels within the image circle and their unit rays."""
    key = (intrinsics.width, intrinsics.height, intrinsics.fov,
           intrinsics.focal, intrinsics.cx, intrinsics.cy)
    hit = _RAY_CACHE.get(key)
    if hit is not None:
        return hit
    cols, rows = np.meshgrid(np.arange(intrinsics.width),
                             np.arange(intrinsics.height))
    pix = np.stack([cols, rows], axis=-1).reshape(-1, 2).astype(np.float64)
    r = np.hypot(pix[:, 0] - intrinsics.cx, intrinsics.cy - pix[:, 1])
    inside = r < intrinsics.rim_radius
    rays = backproject(pix[inside], intrinsics)
    _RAY_CACHE[key] = (inside, rays)
    return inside, rays


def _capsule_interval(origin, dirs, a_pt, b_pt, radius):
    """Ray parameter interval inside the solid capsule, per ray.

    Returns (lo, hi); rays that miss carry lo=+inf, hi=-inf. The capsule
    is convex, so its cylinder-band and cap-sphere pieces always merge
    into one interval.
    """
    n_rays = dirs.shape[0]
    lo = np.full(n_rays, np.inf)
    hi = np.full(n_rays, -np.inf)

    axis = b_pt - a_pt
    length = float(np.linalg.norm(axis))
    if length > 1e-12:
        n = axis / length
        m = origin - a_pt
        dd = dirs @ n
        md = float(m @ n)
        d_perp = dirs - dd[:, None] * n
        m_perp = m - md * n
        a = np.einsum("ij,ij->i", d_perp, d_perp)
        b = 2.0 * (d_perp @ m_perp)
        c = float(m_perp @ m_perp) - radius * radius

        disc = b * b - 4.0 * a * c
        quad = (a > 1e-14) & (disc >= 0.0)
        safe_a = np.where(quad, a, 1.0)
        sq = np.sqrt(np.maximum(disc, 0.0))
        lat_lo = np.where(quad, (-b - sq) / (2.0 * safe_a), np.inf)
        lat_hi = np.where(quad, (-b + sq) / (2.0 * safe_a), -np.inf)
        # rays parallel to the axis sit inside the infinite cylinder iff c <= 0
        par_in = (a <= 1e-14) & (c <= 0.0)
        lat_lo = np.where(par_in, -np.inf, lat_lo)
        lat_hi = np.where(par_in, np.inf, lat_hi)

        along = np.abs(dd) > 1e-14
        safe_dd = np.where(along, dd, 1.0)
        t_a = (0.0 - md) / safe_dd
        t_b = (length - md) / safe_dd
        in_band = 0.0 <= md <= length
        ax_lo = np.where(along, np.minimum(t_a, t_b),
                         -np.inf if in_band else np.inf)
        ax_hi = np.where(along, np.maximum(t_a, t_b),
                         np.inf if in_band else -np.inf)

        cyl_lo = np.maximum(lat_lo, ax_lo)
        cyl_hi = np.minimum(lat_hi, ax_hi)
        ok = cyl_lo <= cyl_hi
        lo = np.where(ok, cyl_lo, lo)
        hi = np.where(ok, cyl_hi, hi)

    for center in (a_pt, b_pt):
        m = origin - center
        b = 2.0 * (dirs @ m)
        c = float(m @ m) - radius * radius
        disc = b * b - 4.0 * c
        ok = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        lo = np.where(ok, np.minimum(lo, (-b - sq) / 2.0), lo)
        hi = np.where(ok, np.maximum(hi, (-b + sq) / 2.0), hi)

    return lo, hi


def render_frame(keypoints, body, cam, intrinsics, with_shading=True,
                 near_clip=NEAR_CLIP):
    """Render one frame analytically.

    A pixel is foreground when its backprojected ray passes through any
    solid capsule beyond the near clip. Shading, when requested, is the
    Lambert term of the first-hit surface normal against the ray
    (headlight lighting), zero on background.

    Returns:
        (mask, shade): mask is (H, W) uint8 in {0, 1}; shade is a float
        (H, W) array, or None when with_shading is false.
    """
    kp = as_float_array(keypoints, "keypoints", shape=(NUM_KEYPOINTS, 3))
    inside, rays_cam = _ray_grid(intrinsics)
    dirs = rays_cam @ cam.rotation.T
    origin = cam.position
    n_rays = dirs.shape[0]

    hit_any = np.zeros(n_rays, dtype=bool)
    best_lo = np.full(n_rays, np.inf)
    best_cap = np.full(n_rays, -1, dtype=np.int32)
    for idx, (_, (i, j), radius) in enumerate(body.capsules):
        lo, hi = _capsule_interval(origin, dirs, kp[i], kp[j], radius)
        hit = hi > near_clip
        hit_any |= hit
        closer = hit & (lo < best_lo)
        best_lo[closer] = lo[closer]
        best_cap[closer] = idx

    height, width = intrinsics.height, intrinsics.width
    mask_flat = np.zeros(height * width, dtype=np.uint8)
    mask_flat[inside] = hit_any
    mask = mask_flat.reshape(height, width)
    if not with_shading:
        return mask, None

    shade_rays = np.zeros(n_rays)
    for idx, (_, (i, j), radius) in enumerate(body.capsules):
        sel = hit_any & (best_cap == idx)
        if not sel.any():
            continue
        t = np.maximum(best_lo[sel], 0.0)
        p = origin + t[:, None] * dirs[sel]
        axis = kp[j] - kp[i]
        denom = max(float(axis @ axis), 1e-18)
        s = np.clip((p - kp[i]) @ axis / denom, 0.0, 1.0)
        normal = p - (kp[i] + s[:, None] * axis)
        norms = np.linalg.norm(normal, axis=1, keepdims=True)
        normal = normal / np.maximum(norms, 1e-12)
        shade_rays[sel] = np.maximum(
            -np.einsum("ij,ij->i", dirs[sel], normal), 0.0)
    shade_flat = np.zeros(height * width)
    shade_flat[inside] = shade_rays
    return mask, shade_flat.reshape(height, width)


def render_silhouette(keypoints, body, cam, intrinsics, near_clip=NEAR_CLIP):
    """Ground-truth foreground mask of the capsule body: (H, W) uint8."""
    mask, _ = render_frame(keypoints, body, cam, intrinsics,
                           with_shading=False, near_clip=near_clip)
    return mask


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng, height, width, cells):
    """One octave of lattice value noise, smooth-interpolated."""
    grid = rng.random((cells + 1, cells + 1))
    rr = np.linspace(0.0, cells, height, endpoint=False)
    cc = np.linspace(0.0, cells, width, endpoint=False)
    r0 = np.floor(rr).astype(int)
    c0 = np.floor(cc).astype(int)
    fr = _smoothstep(rr - r0)[:, None]
    fc = _smoothstep(cc - c0)[None, :]
    r1 = np.minimum(r0 + 1, cells)
    c1 = np.minimum(c0 + 1, cells)
    top = grid[np.ix_(r0, c0)] * (1.0 - fc) + grid[np.ix_(r0, c1)] * fc
    bot = grid[np.ix_(r1, c0)] * (1.0 - fc) + grid[np.ix_(r1, c1)] * fc
    return top * (1.0 - fr) + bot * fr


_OCTAVES = ((4, 1.0), (8, 0.5), (16, 0.25), (32, 0.125))


def procedural_background(seed, height=256, width=256):
    """Seeded multi-octave value noise plus a random linear gradient."""
    rng = np.random.default_rng(seed)
    img = np.empty((height, width, 3))
    total = sum(amp for _, amp in _OCTAVES)
    for ch in range(3):
        acc = np.zeros((height, width))
        for cells, amp in _OCTAVES:
            acc += amp * _value_noise(rng, height, width, cells)
        img[..., ch] = acc / total
    angle = rng.uniform(0.0, 2.0 * math.pi)
    strength = rng.uniform(0.05, 0.2)
    tint = rng.uniform(0.5, 1.0, 3)
    rows = np.linspace(-0.5, 0.5, height)[:, None]
    colsv = np.linspace(-0.5, 0.5, width)[None, :]
    ramp = math.cos(angle) * colsv + math.sin(angle) * rows
    img = 0.5 + (img - 0.5) * 0.75 + strength * ramp[..., None] * tint
    return np.clip(img, 0.02, 0.98)


FOREGROUND_FLOOR = 0.12
FOREGROUND_GAIN = 0.78
FLAT_SHADE = 0.6


def composite_input(mask, seed, shade=None):
    """Composite a silhouette over a seeded procedural background.

    Foreground pixels become achromatic gray driven by the shading term
    (a flat mid value when no shading is given); the background is
    procedural noise. Deterministic in (mask, seed, shade).

    Returns:
        (H, W, 3) float32 image with values in [0, 1].
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DataError(f"mask must be 2d, got shape {m.shape}")
    img = procedural_background(seed, m.shape[0], m.shape[1])
    if shade is None:
        gray = np.full(m.shape, FOREGROUND_FLOOR + FOREGROUND_GAIN * FLAT_SHADE)
    else:
        shade = as_float_array(shade, "shade", shape=m.shape)
        gray = FOREGROUND_FLOOR + FOREGROUND_GAIN * np.clip(shade, 0.0, 1.0)
    fg = m.astype(bool)
    img[fg] = gray[fg, None]
    return img.astype(np.float32)


def head_pose_from_keypoints(keypoints):
    """Head orientation implied by the skeleton alone.

    The up vector follows the neck-to-head axis; the facing vector is
    its cross product with the shoulder line (right-to-left), which
    points horizontally forward for an upright head and pitches with
    the neck. Works in whatever frame the keypoints are expressed.
    """
    kp = as_float_array(keypoints, "keypoints", shape=(NUM_KEYPOINTS, 3))
    shoulder = kp[L_SHOULDER] - kp[R_SHOULDER]
    neck_axis = kp[HEAD] - kp[NECK]
    ns = float(np.linalg.norm(shoulder))
    na = float(np.linalg.norm(neck_axis))
    if ns < 1e-9 or na < 1e-9:
        raise NumericalError("degenerate shoulders or neck; no head frame")
    u = neck_axis / na
    f = np.cross(u, shoulder / ns)
    nf = float(np.linalg.norm(f))
    if nf < 1e-9:
        raise NumericalError("neck axis parallel to shoulder line")
    f = f / nf
    u = u - float(u @ f) * f
    u = u / np.linalg.norm(u)
    return HeadPose(f=f, u=u)


@dataclass(frozen=True)
class SlamNoise:
    """Camera-track perturbation: per-frame jitter plus random-walk drift."""

    rot_sigma_deg: float = 0.2
    pos_sigma: float = 0.002
    drift_rot_deg: float = 0.01
    drift_pos: float = 0.0005


def perturb_track(track, noise, rng):
    """Apply SlamNoise to a camera track; returns a new list of poses."""
    drift_rot = np.zeros(3)
    drift_pos = np.zeros(3)
    out = []
    for pose in track:
        drift_rot += rng.normal(0.0, math.radians(noise.drift_rot_deg), 3)
        drift_pos += rng.normal(0.0, noise.drift_pos, 3)
        ang = rng.normal(0.0, math.radians(noise.rot_sigma_deg), 3) + drift_rot
        dp = rng.normal(0.0, noise.pos_sigma, 3) + drift_pos
        wobble = rot_x(ang[0]) @ rot_y(ang[1]) @ rot_z(ang[2])
        out.append(CameraPose(rotation=pose.rotation @ wobble,
                              position=pose.position + dp))
    return out


@dataclass
class LabeledFrame:
    """One fully labeled synthetic frame."""

    time: float
    mask: np.ndarray
    input_image: np.ndarray
    body: np.ndarray
    head: HeadPose
    head_local: HeadPose
    camera: CameraPose
    mhi: np.ndarray
    norm_scale: float
    body_world: np.ndarray


def resolve_workers(requested=None):
    """Worker count for frame rendering, capped by EGOSPAN_THREADS."""
    cap = os.environ.get("EGOSPAN_THREADS")
    limit = os.cpu_count() or 1
    if cap is not None:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ConfigError(
                f"EGOSPAN_THREADS must be an integer, got {cap!r}") from None
    if requested is None:
        return limit
    return max(1, min(int(requested), limit))


def _keypoint_track(motion, duration, fps, rng, shape, motion_params):
    if isinstance(motion, str):
        frame_fn = make_motion(motion, shape=shape, rng=rng,
                               params=motion_params)
        count = max(2, int(round(duration * fps)))
        return [frame_fn(i / fps)[0] for i in range(count)], fps
    if isinstance(motion, BvhClip):
        joint_map = load_joint_map()
        clip_fps = 1.0 / motion.frame_time
        count = motion.num_frames
        if duration is not None:
            count = min(count, max(2, int(round(duration * clip_fps))))
        track = [extract_keypoints(motion, motion.forward_kinematics(i),
                                   joint_map)
                 for i in range(count)]
        return track, clip_fps
    arr = as_float_array(motion, "motion", ndim=3)
    if arr.shape[1:] != (NUM_KEYPOINTS, 3):
        raise DataError(
            f"keypoint track must be (n, {NUM_KEYPOINTS}, 3), "
            f"got {arr.shape}")
    if arr.shape[0] < 2:
        raise DataError("keypoint track needs at least 2 frames")
    return list(arr), fps


def _track_calibration(kp_track, cams, shape):
    """Ground level and standing camera height for the MHI."""
    if shape is not None:
        return HeightCalibration(
            standing_height=shape.standing_camera_height, ground_y=0.0)
    ankles = np.array([[kp[L_ANKLE][1], kp[R_ANKLE][1]] for kp in kp_track])
    ground = float(ankles.min())
    top = max(pose.position[1] for pose in cams)
    standing = top - ground
    if standing <= 0.1:
        raise NumericalError(
            f"camera track implies standing height {standing:.3f} m")
    return HeightCalibration(standing_height=standing, ground_y=ground)


def generate_sequence(motion, duration=4.0, fps=30.0, seed=0, shape=None,
                      radius_scale=1.0, intrinsics=None, noise=None,
                      motion_params=None, render="full", workers=None,
                      yaw=None, origin=None):
    """Generate a fully labeled synthetic sequence.

    Args:
        motion: procedural motion name, a parsed BvhClip, or an
            (n, 15, 3) world keypoint track.
        duration, fps: clip length for procedural motions (clips keep
            their own frame rate; duration only truncates them).
        seed: drives every random choice (motion parameters, placement,
            background, noise); same seed means identical output.
        shape: BodyShape for procedural motions (default average body).
        radius_scale: scales all capsule radii, emulating body variety.
        intrinsics: fisheye model (default 256x256, 180 degree).
        noise: SlamNoise applied to the camera track used for the MHI
            and the recorded camera poses; None keeps the exact track.
        render: "full" (mask + shaded composite), "mask" (no composite),
            or "none" (labels only).
        workers: parallel render threads (output is identical for any
            worker count; EGOSPAN_THREADS caps it).
        yaw, origin: world placement of the whole motion; random when
            omitted.

    Returns:
        list of LabeledFrame.
    """
    if render not in ("full", "mask", "none"):
        raise ConfigError(f"render must be full, mask, or none, got {render!r}")
    if intrinsics is None:
        intrinsics = FisheyeIntrinsics.make()
    rng = np.random.default_rng(seed)
    if isinstance(motion, str):
        if shape is None:
            shape = BodyShape()
    body = CapsuleBody.make(radius_scale=radius_scale)

    kp_track, fps = _keypoint_track(motion, duration, fps, rng, shape,
                                    motion_params)
    if yaw is None:
        yaw = float(rng.uniform(-math.pi, math.pi))
    if origin is None:
        origin = rng.uniform(-0.5, 0.5, 2)
    turn = rot_y(yaw)
    shift = np.array([float(origin[0]), 0.0, float(origin[1])])
    kp_track = [kp @ turn.T + shift for kp in kp_track]

    heads = [head_pose_from_keypoints(kp) for kp in kp_track]
    cams = [attach_rig(kp[HEAD], h) for kp, h in zip(kp_track, heads)]
    for i, (kp, cam) in enumerate(zip(kp_track, cams)):
        clearance = capsule_clearance(kp, body, cam.position)
        if clearance <= 0.0:
            raise NumericalError(
                f"frame {i}: rig camera is {-clearance:.3f} m inside a "
                "capsule; body shape and rig offsets are inconsistent")

    recorded = perturb_track(cams, noise, rng) if noise is not None else cams
    calib = _track_calibration(kp_track, cams, shape)
    mhi_track = [recorded[0]] + list(recorded)

    count = len(kp_track)

    def _render_one(i):
        if render == "none":
            return None, None
        mask, shade = render_frame(kp_track[i], body, cams[i], intrinsics,
                                   with_shading=(render == "full"))
        image = None
        if render == "full":
            image = composite_input(mask, (seed, 104729, i), shade)
        return mask, image

    n_workers = resolve_workers(workers)
    if n_workers > 1 and render != "none" and count > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rendered = list(pool.map(_render_one, range(count)))
    else:
        rendered = [_render_one(i) for i in range(count)]

    frames = []
    for i in range(count):
        mask, image = rendered[i]
        local, tf = normalize_pose(kp_track[i])
        head_local = HeadPose(f=tf.apply_direction(heads[i].f),
                              u=tf.apply_direction(heads[i].u))
        mhi = build_motion_history(mhi_track, i + 1, calib)
        frames.append(LabeledFrame(
            time=i / fps,
            mask=mask,
            input_image=image,
            body=local,
            head=heads[i],
            head_local=head_local,
            camera=recorded[i],
            mhi=mhi,
            norm_scale=tf.scale,
            body_world=kp_track[i],
        ))
    return frames
