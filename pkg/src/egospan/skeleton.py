"""Skeleton handling: BVH mocap parsing, forward kinematics, and the
canonical keypoint set with its normalized body frame.

The canonical body is 15 keypoints. All world math is right-handed,
y up. Mocap clips in the CMU distribution store translations in
1/0.45 inch units; the default unit scale converts them to metres.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, NumericalError, ParseError
from .validation import as_float_array

CMU_UNIT_SCALE = 0.056444

KEYPOINT_NAMES = (
    "pelvis", "neck", "head",
    "l_shoulder", "r_shoulder",
    "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
    "l_hip", "r_hip",
    "l_knee", "r_knee",
    "l_ankle", "r_ankle",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

PELVIS, NECK, HEAD = 0, 1, 2
L_SHOULDER, R_SHOULDER = 3, 4
L_ELBOW, R_ELBOW = 5, 6
L_WRIST, R_WRIST = 7, 8
L_HIP, R_HIP = 9, 10
L_KNEE, R_KNEE = 11, 12
L_ANKLE, R_ANKLE = 13, 14

NORMALIZED_HEIGHT = 1.70

# ((left bone), (right bone)) index pairs whose lengths match on a body
SYMMETRIC_BONE_PAIRS = (
    ((NECK, L_SHOULDER), (NECK, R_SHOULDER)),
    ((L_SHOULDER, L_ELBOW), (R_SHOULDER, R_ELBOW)),
    ((L_ELBOW, L_WRIST), (R_ELBOW, R_WRIST)),
    ((PELVIS, L_HIP), (PELVIS, R_HIP)),
    ((L_HIP, L_KNEE), (R_HIP, R_KNEE)),
    ((L_KNEE, L_ANKLE), (R_KNEE, R_ANKLE)),
)

# drawn when plotting a pose
SKELETON_EDGES = (
    (PELVIS, NECK), (NECK, HEAD),
    (NECK, L_SHOULDER), (NECK, R_SHOULDER),
    (L_SHOULDER, L_ELBOW), (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW), (R_ELBOW, R_WRIST),
    (PELVIS, L_HIP), (PELVIS, R_HIP),
    (L_HIP, L_KNEE), (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE), (R_KNEE, R_ANKLE),
)


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

_CHANNEL_ROT = {"Xrotation": rot_x, "Yrotation": rot_y, "Zrotation": rot_z}
_CHANNEL_POS = {"Xposition": 0, "Yposition": 1, "Zposition": 2}


@dataclass
class BvhJoint:
    name: str
    parent: int
    offset: np.ndarray
    channels: tuple
    channel_start: int
    is_end_site: bool = False


@dataclass
class BvhClip:
    """A parsed BVH file: joint tree plus per-frame channel values."""

    joints: list
    frames: np.ndarray
    frame_time: float
    unit_scale: float = CMU_UNIT_SCALE
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {j.name: i for i, j in enumerate(self.joints)}

    @property
    def num_frames(self):
        return self.frames.shape[0]

    def joint_index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"no joint named {name!r} in clip") from None

    def forward_kinematics(self, frame):
        """World positions (num_joints, 3) in metres for one frame.

        Each joint's frame is its parent's composed with a translation
        by the joint offset (plus position channels) and rotations
        applied in the order the channels are declared.
        """
        if not 0 <= frame < self.num_frames:
            raise DataError(f"frame {frame} out of range 0..{self.num_frames - 1}")
        values = self.frames[frame]
        scale = self.unit_scale
        positions = np.zeros((len(self.joints), 3))
        rotations = [None] * len(self.joints)
        for i, joint in enumerate(self.joints):
            local_t = joint.offset * scale
            local_r = np.eye(3)
            ci = joint.channel_start
            for ch in joint.channels:
                v = values[ci]
                ci += 1
                if ch in _CHANNEL_POS:
                    local_t = local_t.copy()
                    local_t[_CHANNEL_POS[ch]] += v * scale
                else:
                    local_r = local_r @ _CHANNEL_ROT[ch](math.radians(v))
            if joint.parent < 0:
                positions[i] = local_t
                rotations[i] = local_r
            else:
                pr = rotations[joint.parent]
                positions[i] = positions[joint.parent] + pr @ local_t
                rotations[i] = pr @ local_r
        return positions


def _tokenize_bvh(text):
    tokens = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0]
        for tok in body.replace("{", " { ").replace("}", " } ").split():
            tokens.append((tok, lineno))
    return tokens


def parse_bvh(source, unit_scale=CMU_UNIT_SCALE):
    """Parse BVH text (or a path to it) into a BvhClip.

    Args:
        source: BVH text, or a filesystem path ending in .bvh.
        unit_scale: metres per BVH translation unit.
    """
    text = source
    if "\n" not in source and source.endswith(".bvh"):
        try:
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read {source}: {exc}") from None
    tokens = _tokenize_bvh(text)
    pos = 0

    def peek():
        return tokens[pos][0] if pos < len(tokens) else None

    def take(expect=None):
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of file",
                             tokens[-1][1] if tokens else 1)
        tok, lineno = tokens[pos]
        pos += 1
        if expect is not None and tok != expect:
            raise ParseError(f"expected {expect!r}, got {tok!r}", lineno)
        return tok, lineno

    def take_floats(n):
        out = []
        for _ in range(n):
            tok, lineno = take()
            try:
                out.append(float(tok))
            except ValueError:
                raise ParseError(f"expected a number, got {tok!r}", lineno)
        return np.array(out)

    joints = []
    channel_count = 0

    def parse_joint(parent, name):
        nonlocal channel_count
        take("{")
        take("OFFSET")
        offset = take_floats(3)
        channels = ()
        if peek() == "CHANNELS":
            take("CHANNELS")
            tok, lineno = take()
            try:
                n = int(tok)
            except ValueError:
                raise ParseError(f"bad channel count {tok!r}", lineno)
            chs = []
            for _ in range(n):
                ch, lineno = take()
                if ch not in _CHANNEL_ROT and ch not in _CHANNEL_POS:
                    raise ParseError(f"unknown channel {ch!r}", lineno)
                chs.append(ch)
            channels = tuple(chs)
        me = len(joints)
        joints.append(BvhJoint(name=name, parent=parent, offset=offset,
                               channels=channels, channel_start=channel_count))
        channel_count += len(channels)
        while True:
            tok = peek()
            if tok == "JOINT":
                take()
                child_name, _ = take()
                parse_joint(me, child_name)
            elif tok == "End":
                take()
                take("Site")
                take("{")
                take("OFFSET")
                end_offset = take_floats(3)
                take("}")
                joints.append(BvhJoint(name=f"{name}End", parent=me,
                                       offset=end_offset, channels=(),
                                       channel_start=channel_count,
                                       is_end_site=True))
            elif tok == "}":
                take()
                return
            else:
                _, lineno = take()
                raise ParseError(f"unexpected token {tok!r} in joint block", lineno)

    take("HIERARCHY")
    take("ROOT")
    root_name, _ = take()
    parse_joint(-1, root_name)
    take("MOTION")
    tok, lineno = take()
    if tok.rstrip(":") != "Frames":
        raise ParseError(f"expected 'Frames:', got {tok!r}", lineno)
    tok, lineno = take()
    try:
        num_frames = int(tok)
    except ValueError:
        raise ParseError(f"bad frame count {tok!r}", lineno)
    tok, lineno = take()
    if tok != "Frame":
        raise ParseError(f"expected 'Frame Time:', got {tok!r}", lineno)
    tok, lineno = take()
    if tok.rstrip(":") != "Time":
        raise ParseError(f"expected 'Frame Time:', got {tok!r}", lineno)
    tok, lineno = take()
    try:
        frame_time = float(tok)
    except ValueError:
        raise ParseError(f"bad frame time {tok!r}", lineno)

    remaining = len(tokens) - pos
    if remaining != num_frames * channel_count:
        raise ParseError(
            f"motion block has {remaining} values, expected "
            f"{num_frames} frames x {channel_count} channels",
            tokens[pos][1] if pos < len(tokens) else tokens[-1][1])
    flat = take_floats(remaining) if remaining else np.zeros(0)
    frames = flat.reshape(num_frames, channel_count)
    return BvhClip(joints=joints, frames=frames, frame_time=frame_time,
                   unit_scale=unit_scale)


def load_joint_map(path=None):
    """Canonical-keypoint to mocap-joint name table.

    The file holds lines of the form ``pelvis = Hips`` (first matching
    candidate wins; candidates separated by spaces). Defaults to the
    packaged CMU table.
    """
    if path is None:
        from importlib import resources

        text = (resources.files("egospan.data") / "cmu_joints.map").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'name = joints...', got {line!r}", lineno)
        key, _, rest = line.partition("=")
        key = key.strip()
        if key not in KEYPOINT_NAMES:
            raise ParseError(f"unknown keypoint {key!r}", lineno)
        candidates = rest.split()
        if not candidates:
            raise ParseError(f"no joint candidates for {key!r}", lineno)
        table[key] = tuple(candidates)
    missing = set(KEYPOINT_NAMES) - set(table)
    if missing:
        raise DataError(f"joint map missing keypoints: {sorted(missing)}")
    return table


def extract_keypoints(clip, positions, joint_map):
    """Pick the canonical 15 keypoints out of a clip's FK positions."""
    out = np.zeros((NUM_KEYPOINTS, 3))
    names = {j.name for j in clip.joints}
    for i, key in enumerate(KEYPOINT_NAMES):
        for cand in joint_map[key]:
            if cand in names:
                out[i] = positions[clip.joint_index(cand)]
                break
        else:
            raise DataError(
                f"clip has no joint for {key!r} (tried {joint_map[key]})")
    return out


@dataclass(frozen=True)
class SimilarityTransform:
    """p_local = scale * R @ (p_world - center)."""

    scale: float
    rotation: np.ndarray
    center: np.ndarray

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points - self.center) @ self.rotation.T

    def apply_direction(self, d):
        return np.asarray(d, dtype=np.float64) @ self.rotation.T

    def invert(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points / self.scale) @ self.rotation + self.center

    def invert_direction(self, d):
        return np.asarray(d, dtype=np.float64) @ self.rotation


def normalize_pose(keypoints, target_height=NORMALIZED_HEIGHT):
    """Map a world pose into the canonical local body frame.

    The local frame is centered at the hip midpoint, yawed (and rolled)
    so the left-to-right hip axis lies along +x, and uniformly scaled so
    the pose's vertical extent is `target_height`.

    Returns:
        (local_keypoints, SimilarityTransform) where the transform maps
        world to local and can be inverted for global repositioning.
    """
    kp = as_float_array(keypoints, "keypoints", shape=(NUM_KEYPOINTS, 3))
    center = 0.5 * (kp[L_HIP] + kp[R_HIP])
    d = kp[L_HIP] - kp[R_HIP]
    horiz = math.hypot(d[0], d[2])
    if horiz < 1e-9:
        raise NumericalError("hip axis is vertical; pose frame undefined")
    yaw = math.atan2(d[2], d[0])
    roll = -math.atan2(d[1], horiz)
    R = rot_z(roll) @ rot_y(yaw)
    rotated = (kp - center) @ R.T
    extent = float(np.max(rotated[:, 1]) - np.min(rotated[:, 1]))
    if extent < 1e-6:
        raise NumericalError("pose has no vertical extent")
    scale = target_height / extent
    transform = SimilarityTransform(scale=scale, rotation=R, center=center)
    return scale * rotated, transform


def bone_lengths(keypoints, bones):
    """Euclidean lengths of the given (i, j) index pairs."""
    kp = np.asarray(keypoints, dtype=np.float64)
    idx = np.asarray(bones, dtype=int)
    return np.linalg.norm(kp[idx[:, 0]] - kp[idx[:, 1]], axis=-1)


