"""Dataset directory writer and loader.

A dataset is a directory tree designed so that any language can read it
back with nothing beyond file IO:

    root/
      manifest.json             sequence list, intrinsics, seeds, counts
      <sequence dir>/
        mask_00000.pgm          binary PGM (P5), 255 = foreground
        input_00000.ppm         binary PPM (P6), 8-bit RGB, only if
                                the dataset was rendered "full"
        labels.bin              flat little-endian float64 records
        labels.index            text description of the record layout
        mhi.bin                 flat little-endian float64, one motion
                                history per frame
        mhi.index               text shape header

One label record per frame, 116 doubles, in this order:

    time            1   seconds since sequence start
    body           45   normalized body keypoints, row-major (15, 3)
    head_local_f    3   facing direction in the normalized body frame
    head_local_u    3   up direction in the normalized body frame
    head_world_f    3   facing direction in world coordinates
    head_world_u    3   up direction in world coordinates
    cam_rotation    9   world-from-camera rotation, row-major (3, 3)
    cam_position    3   camera origin in world coordinates
    norm_scale      1   world-to-normalized scale factor
    body_world     45   world-frame body keypoints, row-major (15, 3)

Writing is deterministic: the same seed and settings produce a
byte-identical tree, whatever the worker count.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .camera import FisheyeIntrinsics
from .exceptions import ConfigError, DataError, ParseError
from .motionhist import COLUMN_DIM, WINDOW
from .synth import generate_sequence

FORMAT_NAME = "egospan dataset v1"
SEED_STRIDE = 104729

LABEL_LAYOUT = (
    ("time", 1),
    ("body", 45),
    ("head_local_f", 3),
    ("head_local_u", 3),
    ("head_world_f", 3),
    ("head_world_u", 3),
    ("cam_rotation", 9),
    ("cam_position", 3),
    ("norm_scale", 1),
    ("body_world", 45),
)
LABEL_DIM = sum(size for _, size in LABEL_LAYOUT)


def write_pgm(path, mask):
    """Write a binary (P5) PGM; nonzero mask pixels become 255."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DataError(f"mask must be 2-d, got shape {arr.shape}")
    h, w = arr.shape
    data = np.where(arr != 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, image):
    """Write a binary (P6) PPM from an (H, W, 3) float image in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"image must be (H, W, 3), got shape {arr.shape}")
    h, w, _ = arr.shape
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise ParseError(f"{path}: truncated header")
        c = blob[i:i + 1]
        if c == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    if tokens[0] != magic:
        raise ParseError(
            f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ParseError(f"{path}: non-numeric header fields")
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported, got {maxval}")
    payload = blob[i + 1:]
    expect = w * h * channels
    if len(payload) != expect:
        raise ParseError(
            f"{path}: expected {expect} pixel bytes, found {len(payload)}")
    shape = (h, w) if channels == 1 else (h, w, channels)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def read_pgm(path):
    """Read a binary PGM into a (H, W) uint8 mask of zeros and ones."""
    gray = _read_netpbm(path, b"P5", 1)
    return (gray > 127).astype(np.uint8)


def read_ppm(path):
    """Read a binary PPM into an (H, W, 3) float64 image in [0, 1]."""
    return _read_netpbm(path, b"P6", 3).astype(np.float64) / 255.0


def frame_record(frame):
    """Flatten one labeled frame into a 116-double label record."""
    rec = np.empty(LABEL_DIM, dtype=np.float64)
    parts = (
        [frame.time],
        np.asarray(frame.body).reshape(-1),
        frame.head_local.f, frame.head_local.u,
        frame.head.f, frame.head.u,
        np.asarray(frame.camera.rotation).reshape(-1),
        frame.camera.position,
        [frame.norm_scale],
        np.asarray(frame.body_world).reshape(-1),
    )
    pos = 0
    for part in parts:
        part = np.asarray(part, dtype=np.float64).reshape(-1)
        rec[pos:pos + part.size] = part
        pos += part.size
    if pos != LABEL_DIM:
        raise DataError(f"label record came out {pos} wide, not {LABEL_DIM}")
    return rec


@dataclass
class SequenceData:
    """One loaded sequence: images, masks, histories, labels."""

    name: str
    motion: str
    seed: int
    fps: float
    masks: np.ndarray
    images: object
    mhi: np.ndarray
    time: np.ndarray
    body: np.ndarray
    head_local_f: np.ndarray
    head_local_u: np.ndarray
    head_world_f: np.ndarray
    head_world_u: np.ndarray
    cam_rotation: np.ndarray
    cam_position: np.ndarray
    norm_scale: np.ndarray
    body_world: np.ndarray

    @property
    def frames(self):
        return self.body.shape[0]


@dataclass
class Dataset:
    """A loaded dataset directory."""

    root: str
    seed: int
    fps: float
    render: str
    intrinsics: FisheyeIntrinsics
    sequences: list

    @property
    def total_frames(self):
        return sum(seq.frames for seq in self.sequences)

    def split(self, holdout_motions):
        """Partition sequences into (train, held out) by motion name."""
        held = {m.strip() for m in holdout_motions}
        train = [s for s in self.sequences if s.motion not in held]
        out = [s for s in self.sequences if s.motion in held]
        return train, out


def _labels_index_text(frames):
    lines = [f"{FORMAT_NAME} labels", f"frames {frames}",
             f"record {LABEL_DIM}"]
    pos = 0
    for name, size in LABEL_LAYOUT:
        lines.append(f"field {name} {pos} {size}")
        pos += size
    lines.append("end")
    return "\n".join(lines) + "\n"


def _mhi_index_text(frames):
    return (f"{FORMAT_NAME} mhi\nframes {frames}\nrows {WINDOW}\n"
            f"cols {COLUMN_DIM}\nend\n")


def _parse_index(path, kind):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"{FORMAT_NAME} {kind}":
        raise ParseError(f"{path}: not a {kind} index file")
    if lines[-1] != "end":
        raise ParseError(f"{path}: missing end marker")
    values = {}
    for line in lines[1:-1]:
        fields = line.split()
        if len(fields) == 2:
            key, val = fields
            try:
                values[key] = int(val)
            except ValueError:
                raise ParseError(f"{path}: bad value in line {line!r}")
        elif not (fields and fields[0] == "field"):
            raise ParseError(f"{path}: unrecognized line {line!r}")
    return values


def write_dataset(root, motions, frames, seed, fps=30.0, render="full",
                  intrinsics=None, noise=None, radius_scale=1.0,
                  workers=None):
    """Generate sequences and write a dataset directory.

    Args:
        root: target directory, created if missing.
        motions: iterable of procedural motion names; a name may repeat
            to get several sequences of the same kind (each gets its
            own seed).
        frames: frames per sequence (minimum 2).
        seed: dataset seed; sequence i uses seed + 104729 * i.
        fps: sampling rate of the synthetic capture.
        render: "full" writes masks and composite input images, "mask"
            writes masks only.
        intrinsics: fisheye model, default 256 x 256 at 180 degrees.
        noise: optional SlamNoise applied to the recorded camera track.
        radius_scale: capsule radius multiplier for body variety.
        workers: render workers per sequence (EGOSPAN_THREADS caps it).

    Returns:
        the manifest dictionary that was written.
    """
    motions = list(motions)
    if not motions:
        raise ConfigError("need at least one motion name")
    if frames < 2:
        raise ConfigError(f"need at least 2 frames per sequence, got {frames}")
    if render not in ("full", "mask"):
        raise ConfigError(f"render must be full or mask, got {render!r}")
    if intrinsics is None:
        intrinsics = FisheyeIntrinsics.make()
    os.makedirs(root, exist_ok=True)

    entries = []
    for i, motion in enumerate(motions):
        seq_seed = int(seed) + SEED_STRIDE * i
        name = f"seq_{i:03d}_{motion}"
        seq_dir = os.path.join(root, name)
        os.makedirs(seq_dir, exist_ok=True)
        track = generate_sequence(
            motion, duration=frames / fps, fps=fps, seed=seq_seed,
            radius_scale=radius_scale, intrinsics=intrinsics, noise=noise,
            render=render, workers=workers)
        records = np.stack([frame_record(fr) for fr in track])
        histories = np.stack([fr.mhi for fr in track])
        with open(os.path.join(seq_dir, "labels.bin"), "wb") as fh:
            fh.write(records.astype("<f8").tobytes())
        with open(os.path.join(seq_dir, "labels.index"), "w",
                  encoding="ascii") as fh:
            fh.write(_labels_index_text(len(track)))
        with open(os.path.join(seq_dir, "mhi.bin"), "wb") as fh:
            fh.write(histories.astype("<f8").tobytes())
        with open(os.path.join(seq_dir, "mhi.index"), "w",
                  encoding="ascii") as fh:
            fh.write(_mhi_index_text(len(track)))
        for j, fr in enumerate(track):
            write_pgm(os.path.join(seq_dir, f"mask_{j:05d}.pgm"), fr.mask)
            if render == "full":
                write_ppm(os.path.join(seq_dir, f"input_{j:05d}.ppm"),
                          fr.input_image)
        entries.append({"name": name, "motion": motion, "seed": seq_seed,
                        "frames": len(track)})

    manifest = {
        "format": FORMAT_NAME,
        "seed": int(seed),
        "fps": float(fps),
        "render": render,
        "radius_scale": float(radius_scale),
        "intrinsics": {
            "width": intrinsics.width,
            "height": intrinsics.height,
            "fov": intrinsics.fov,
            "focal": intrinsics.focal,
            "cx": intrinsics.cx,
            "cy": intrinsics.cy,
        },
        "history_rows": WINDOW,
        "history_cols": COLUMN_DIM,
        "label_record": LABEL_DIM,
        "label_layout": [[name, size] for name, size in LABEL_LAYOUT],
        "sequences": entries,
        "total_frames": sum(e["frames"] for e in entries),
    }
    with open(os.path.join(root, "manifest.json"), "w",
              encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _unpack_records(records):
    fields = {}
    pos = 0
    for name, size in LABEL_LAYOUT:
        fields[name] = records[:, pos:pos + size]
        pos += size
    return fields


def load_sequence(root, entry, render, fps):
    """Load one sequence directory described by a manifest entry."""
    seq_dir = os.path.join(root, entry["name"])
    frames = int(entry["frames"])

    idx = _parse_index(os.path.join(seq_dir, "labels.index"), "labels")
    if idx.get("frames") != frames or idx.get("record") != LABEL_DIM:
        raise DataError(
            f"{seq_dir}: labels.index disagrees with the manifest")
    raw = np.fromfile(os.path.join(seq_dir, "labels.bin"), dtype="<f8")
    if raw.size != frames * LABEL_DIM:
        raise DataError(
            f"{seq_dir}: labels.bin holds {raw.size} doubles, expected"
            f" {frames * LABEL_DIM}")
    fields = _unpack_records(raw.reshape(frames, LABEL_DIM))

    idx = _parse_index(os.path.join(seq_dir, "mhi.index"), "mhi")
    if (idx.get("frames") != frames or idx.get("rows") != WINDOW
            or idx.get("cols") != COLUMN_DIM):
        raise DataError(f"{seq_dir}: mhi.index disagrees with the manifest")
    mhi = np.fromfile(os.path.join(seq_dir, "mhi.bin"), dtype="<f8")
    if mhi.size != frames * WINDOW * COLUMN_DIM:
        raise DataError(
            f"{seq_dir}: mhi.bin holds {mhi.size} doubles, expected"
            f" {frames * WINDOW * COLUMN_DIM}")
    mhi = mhi.reshape(frames, WINDOW, COLUMN_DIM)

    masks = np.stack([read_pgm(os.path.join(seq_dir, f"mask_{j:05d}.pgm"))
                      for j in range(frames)])
    images = None
    if render == "full":
        images = np.stack(
            [read_ppm(os.path.join(seq_dir, f"input_{j:05d}.ppm"))
             for j in range(frames)])

    return SequenceData(
        name=entry["name"], motion=entry["motion"], seed=int(entry["seed"]),
        fps=float(fps), masks=masks, images=images, mhi=mhi,
        time=fields["time"][:, 0],
        body=fields["body"].reshape(frames, 15, 3),
        head_local_f=fields["head_local_f"],
        head_local_u=fields["head_local_u"],
        head_world_f=fields["head_world_f"],
        head_world_u=fields["head_world_u"],
        cam_rotation=fields["cam_rotation"].reshape(frames, 3, 3),
        cam_position=fields["cam_position"],
        norm_scale=fields["norm_scale"][:, 0],
        body_world=fields["body_world"].reshape(frames, 15, 3),
    )


def load_dataset(root):
    """Load a dataset directory written by write_dataset."""
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no manifest.json under {root!r}")
    with open(path, "r", encoding="ascii") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as err:
            raise ParseError(f"{path}: {err}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise DataError(
            f"{path}: format {manifest.get('format')!r}, expected"
            f" {FORMAT_NAME!r}")
    info = manifest["intrinsics"]
    intrinsics = FisheyeIntrinsics.make(
        width=int(info["width"]), height=int(info["height"]),
        fov=float(info["fov"]))
    if not math.isclose(intrinsics.focal, float(info["focal"])):
        raise DataError(f"{path}: inconsistent intrinsics focal length")
    render = manifest.get("render", "full")
    fps = float(manifest["fps"])
    sequences = [load_sequence(root, entry, render, fps)
                 for entry in manifest["sequences"]]
    total = sum(seq.frames for seq in sequences)
    if total != manifest.get("total_frames"):
        raise DataError(
            f"{path}: manifest total_frames {manifest.get('total_frames')}"
            f" but sequences hold {total}")
    return Dataset(root=str(root), seed=int(manifest["seed"]),
                   fps=float(manifest["fps"]), render=render,
                   intrinsics=intrinsics, sequences=sequences)


def stack_sequences(sequences):
    """Concatenate sequences into flat training arrays.

    Returns a dict with keys mhi (N, rows, 13), masks (N, H, W), body
    (N, 45), f (N, 3), u (N, 3), plus images (N, H, W, 3) when every
    sequence carries input images.
    """
    seqs = list(sequences)
    if not seqs:
        raise DataError("no sequences to stack")
    out = {
        "mhi": np.concatenate([s.mhi for s in seqs]),
        "masks": np.concatenate([s.masks for s in seqs]),
        "body": np.concatenate(
            [s.body.reshape(s.frames, -1) for s in seqs]),
        "f": np.concatenate([s.head_local_f for s in seqs]),
        "u": np.concatenate([s.head_local_u for s in seqs]),
    }
    if all(s.images is not None for s in seqs):
        out["images"] = np.concatenate([s.images for s in seqs])
    return out


def dataset_digest(root):
    """SHA-256 over every file (sorted relative paths and contents)."""
    digest = hashlib.sha256()
    entries = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fname in sorted(filenames):
            full = os.path.join(dirpath, fname)
            entries.append((os.path.relpath(full, root), full))
    entries.sort()
    for rel, full in entries:
        digest.update(rel.encode("utf-8"))
        digest.update(b"\0")
        with open(full, "rb") as fh:
            digest.update(fh.read())
        digest.update(b"\0")
    return digest.hexdigest()
