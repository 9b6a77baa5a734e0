"""Pose-sequence data: binary file I/O, clip windowing, boundary completion,
and a synthetic forward-kinematics motion generator.

Videos are stored as float32 (pixels for 2D, root-relative millimeters for
3D, plus the camera-space root trajectory); compute happens in float64. The
three completion strategies fill a window that sticks out past the video:

  edge    repeat the boundary frame
  expand  duplicate the first/last k real frames once each
  roll    shift the whole window inside the video once more than R frames
          are missing, leaving the target off-center
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"GSP1"
VERSION = 1

IMAGE_SIZE = 1000
FOCAL_PX = 1000.0
PRINCIPAL = (500.0, 500.0)

# 17-joint skeleton, same ordering as the default part grouping:
# 0 pelvis, 1-3 right leg, 4-6 left leg, 7 spine, 8 thorax, 9 neck,
# 10 head, 11-13 left arm, 14-16 right arm.
SKELETON_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# Rest-direction unit vectors in camera coordinates (x right, y down,
# z toward the camera axis) and bone lengths in millimeters.
_REST_DIRS = (
    (0.0, 0.0, 0.0),    # 0 pelvis (root)
    (-1.0, 0.0, 0.0),   # 1 right hip
    (0.0, 1.0, 0.0),    # 2 right knee
    (0.0, 1.0, 0.0),    # 3 right ankle
    (1.0, 0.0, 0.0),    # 4 left hip
    (0.0, 1.0, 0.0),    # 5 left knee
    (0.0, 1.0, 0.0),    # 6 left ankle
    (0.0, -1.0, 0.0),   # 7 spine
    (0.0, -1.0, 0.0),   # 8 thorax
    (0.0, -1.0, 0.0),   # 9 neck
    (0.0, -1.0, 0.0),   # 10 head
    (1.0, 0.0, 0.0),    # 11 left shoulder
    (1.0, 0.0, 0.0),    # 12 left elbow
    (1.0, 0.0, 0.0),    # 13 left wrist
    (-1.0, 0.0, 0.0),   # 14 right shoulder
    (-1.0, 0.0, 0.0),   # 15 right elbow
    (-1.0, 0.0, 0.0),   # 16 right wrist
)

BONE_LENGTHS_MM = (
    0.0,            # pelvis
    130.0, 450.0, 440.0,   # right leg
    130.0, 450.0, 440.0,   # left leg
    230.0, 255.0, 120.0, 115.0,   # spine chain
    180.0, 280.0, 250.0,   # left arm
    180.0, 280.0, 250.0,   # right arm
)


class DataFormatError(ValueError):
    """A binary file does not match its declared layout."""


@dataclass
class PoseSample:
    """One video: paired 2D pixels, root-relative 3D mm, and root path."""

    pose2d: np.ndarray  # (V, J, 2) float32 pixels
    pose3d: np.ndarray  # (V, J, 3) float32 millimeters, root at origin
    root: np.ndarray  # (V, 3) float32 millimeters, camera space

    @property
    def length(self) -> int:
        return self.pose2d.shape[0]

    @property
    def joints(self) -> int:
        return self.pose2d.shape[1]


@dataclass
class PoseDataset:
    sequences: list[PoseSample] = field(default_factory=list)
    joints: int = 17
    image_width: int = IMAGE_SIZE
    image_height: int = IMAGE_SIZE
    focal: float = FOCAL_PX
    fps: float = 50.0

    def __len__(self) -> int:
        return len(self.sequences)


def normalize_screen_coords(xy: np.ndarray, width: int, height: int) -> np.ndarray:
    """Map pixel coordinates to [-1, 1] on x, preserving aspect ratio."""
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = xy[..., 0] / width * 2.0 - 1.0
    out[..., 1] = xy[..., 1] / width * 2.0 - height / width
    return out


# ----------------------------------------------------------------------
# windowing and completion


def window(video: np.ndarray, t: int, frames: int):
    """Clip the ideal window [t-h, t+h] to the video.

    Returns (clip, missing_before, missing_after); the clip may be shorter
    than ``frames`` when the window sticks out past either end.
    """
    if frames % 2 == 0:
        raise ValueError(f"window length must be odd, got {frames}")
    vlen = video.shape[0]
    if not 0 <= t < vlen:
        raise IndexError(f"target index {t} outside video of length {vlen}")
    half = (frames - 1) // 2
    lo, hi = t - half, t + half + 1
    clip = video[max(0, lo) : min(vlen, hi)]
    return clip, max(0, -lo), max(0, hi - vlen)


def complete_edge(clip: np.ndarray, missing) -> np.ndarray:
    """Repeat the first/last frame to fill each missing side."""
    before, after = missing
    if clip.shape[0] == 0:
        raise ValueError("cannot complete an empty clip")
    pieces = []
    if before:
        pieces.append(np.repeat(clip[:1], before, axis=0))
    pieces.append(clip)
    if after:
        pieces.append(np.repeat(clip[-1:], after, axis=0))
    return np.concatenate(pieces, axis=0) if len(pieces) > 1 else clip.copy()


def complete_expand(clip: np.ndarray, missing) -> np.ndarray:
    """Duplicate the k frames nearest each boundary once each, in order.

    Two missing leading frames turn [1,2,3,...] into [1,1,2,2,3,...]; the
    trailing side mirrors this.
    """
    before, after = missing
    n = clip.shape[0]
    if before + after > n:
        raise ValueError(
            f"expanding needs k real frames per k missing: clip has {n}, "
            f"missing ({before}, {after})"
        )
    idx: list[int] = []
    for j in range(before):
        idx += [j, j]
    idx += range(before, n - after)
    for j in range(n - after, n):
        idx += [j, j]
    return clip[np.asarray(idx, dtype=np.intp)]


def complete_roll(video: np.ndarray, t: int, frames: int, threshold: int):
    """Window with rolling: shift inside the video when too much is missing.

    Returns (clip, target_offset). With k missing frames, k <= threshold
    falls back to edge padding (target stays central); k > threshold slides
    the window flush with the video boundary and the target moves off-center.
    """
    vlen = video.shape[0]
    if vlen < frames:
        raise ValueError(
            f"rolling needs the video ({vlen} frames) to cover the window ({frames})"
        )
    clip, before, after = window(video, t, frames)
    center = (frames - 1) // 2
    k = before + after
    if k <= threshold:
        return complete_edge(clip, (before, after)), center
    lo = 0 if before else vlen - frames
    return video[lo : lo + frames], t - lo


@dataclass(frozen=True)
class CompletionPolicy:
    mode: str = "roll"
    threshold: int = 0

    def __post_init__(self):
        if self.mode not in ("edge", "expand", "roll"):
            raise ValueError(f"unknown completion mode {self.mode!r}")
        if self.threshold < 0:
            raise ValueError("rolling threshold must be non-negative")


def _expand_offset(p: int, n: int, before: int, after: int) -> int:
    """Row of original frame ``p`` after expanding an n-frame clip."""
    if p < before:
        return 2 * p
    tail_start = n - after
    if p >= tail_start:
        return before + tail_start + 2 * (p - tail_start)
    return before + p


def extract_clip(video: np.ndarray, t: int, frames: int, policy: CompletionPolicy):
    """Apply the policy; returns (clip, target_offset, rolled).

    ``target_offset`` is the row holding the true target frame. Edge padding
    keeps it central; expanding can shift it when the target itself is within
    the duplicated margin; rolling moves it whenever the window slides.
    """
    center = (frames - 1) // 2
    if policy.mode == "roll":
        clip, offset = complete_roll(video, t, frames, policy.threshold)
        return clip, offset, offset != center
    clip, before, after = window(video, t, frames)
    if policy.mode == "edge":
        return complete_edge(clip, (before, after)), center, False
    offset = _expand_offset(t - max(0, t - (frames - 1) // 2), clip.shape[0], before, after)
    return complete_expand(clip, (before, after)), offset, False


# ----------------------------------------------------------------------
# synthetic motion


def _euler_rotations(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 3) xyz Euler angles."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    one = np.ones_like(ax)
    zero = np.zeros_like(ax)
    rx = np.stack(
        [one, zero, zero, zero, cx, -sx, zero, sx, cx], axis=-1
    ).reshape(angles.shape[:-1] + (3, 3))
    ry = np.stack(
        [cy, zero, sy, zero, one, zero, -sy, zero, cy], axis=-1
    ).reshape(angles.shape[:-1] + (3, 3))
    rz = np.stack(
        [cz, -sz, zero, sz, cz, zero, zero, zero, one], axis=-1
    ).reshape(angles.shape[:-1] + (3, 3))
    return rz @ ry @ rx


def synth_motion(rng: np.random.Generator, length: int, fps: float = 50.0) -> np.ndarray:
    """Forward-kinematics joint positions (V, 17, 3), root at the origin.

    Each joint's local rotation follows a smooth sinusoidal Euler-angle
    trajectory; rotations compose down the kinematic tree, so bone lengths
    are constant by construction.
    """
    joints = len(SKELETON_PARENTS)
    t = np.arange(length, dtype=np.float64) / fps
    amp = rng.uniform(0.05, 0.45, size=(joints, 3))
    freq = rng.uniform(0.1, 0.7, size=(joints, 3))
    phase = rng.uniform(0.0, 2 * np.pi, size=(joints, 3))
    angles = amp * np.sin(2 * np.pi * freq * t[:, None, None] + phase)
    local = _euler_rotations(angles)  # (V, 17, 3, 3)

    dirs = np.asarray(_REST_DIRS)
    lengths = np.asarray(BONE_LENGTHS_MM)
    pos = np.zeros((length, joints, 3))
    world = np.zeros((length, joints, 3, 3))
    for j, parent in enumerate(SKELETON_PARENTS):
        if parent < 0:
            world[:, j] = local[:, j]
            continue
        world[:, j] = world[:, parent] @ local[:, j]
        bone = world[:, j] @ (dirs[j] * lengths[j])
        pos[:, j] = pos[:, parent] + bone
    return pos


def project_points(points: np.ndarray) -> np.ndarray:
    """Pinhole projection of absolute camera-space mm points to pixels."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    u = FOCAL_PX * points[..., 0] / z + PRINCIPAL[0]
    v = FOCAL_PX * points[..., 1] / z + PRINCIPAL[1]
    return np.stack([u, v], axis=-1)


def synth_generate(
    seed: int,
    count: int,
    length: int = 100,
    joints: int = 17,
    noise: float = 2.0,
    fps: float = 50.0,
) -> PoseDataset:
    """Procedural dataset: FK skeletons on smooth root paths, projected to 2D.

    The 3D pose and root are quantized to float32 first and the 2D pixels are
    projected from the quantized values, so at noise 0 the stored 2D is the
    exact projection of the stored 3D.
    """
    if joints != len(SKELETON_PARENTS):
        raise ValueError(f"synthetic skeleton has {len(SKELETON_PARENTS)} joints")
    rng = np.random.default_rng(seed)
    ds = PoseDataset(joints=joints, fps=fps)
    t = np.arange(length, dtype=np.float64) / fps
    for _ in range(count):
        rel = synth_motion(rng, length, fps)
        depth = rng.uniform(3000.0, 6000.0)
        sway = rng.uniform(100.0, 400.0, size=3)
        sfreq = rng.uniform(0.1, 0.4, size=3)
        sphase = rng.uniform(0.0, 2 * np.pi, size=3)
        root = np.stack(
            [sway[i] * np.sin(2 * np.pi * sfreq[i] * t + sphase[i]) for i in range(3)],
            axis=-1,
        )
        root[:, 2] += depth

        rel32 = rel.astype(np.float32)
        root32 = root.astype(np.float32)
        abs3d = root32[:, None, :].astype(np.float64) + rel32.astype(np.float64)
        px = project_points(abs3d)
        if noise > 0:
            px = px + rng.normal(0.0, noise, size=px.shape)
        ds.sequences.append(
            PoseSample(px.astype(np.float32), rel32, root32)
        )
    return ds


# ----------------------------------------------------------------------
# binary format


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def save_dataset(dataset: PoseDataset, path) -> None:
    for s in dataset.sequences:
        if s.joints != dataset.joints:
            raise ValueError("all sequences must share the dataset joint count")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(
            struct.pack(
                "<IIIIIdd",
                VERSION,
                len(dataset.sequences),
                dataset.joints,
                dataset.image_width,
                dataset.image_height,
                dataset.focal,
                dataset.fps,
            )
        )
        for s in dataset.sequences:
            fh.write(struct.pack("<I", s.length))
            fh.write(np.ascontiguousarray(s.pose2d, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.pose3d, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.root, dtype="<f4").tobytes())


def load_dataset(path) -> PoseDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataFormatError(
                f"bad magic {magic!r}: not a {MAGIC.decode()} dataset file"
            )
        version, count, joints, width, height, focal, fps = struct.unpack(
            "<IIIIIdd", _read_exact(fh, struct.calcsize("<IIIIIdd"))
        )
        if version != VERSION:
            raise DataFormatError(f"unsupported dataset version {version}")
        ds = PoseDataset(
            joints=joints,
            image_width=width,
            image_height=height,
            focal=focal,
            fps=fps,
        )
        for _ in range(count):
            (vlen,) = struct.unpack("<I", _read_exact(fh, 4))
            p2 = np.frombuffer(
                _read_exact(fh, vlen * joints * 2 * 4), dtype="<f4"
            ).reshape(vlen, joints, 2)
            p3 = np.frombuffer(
                _read_exact(fh, vlen * joints * 3 * 4), dtype="<f4"
            ).reshape(vlen, joints, 3)
            root = np.frombuffer(_read_exact(fh, vlen * 3 * 4), dtype="<f4").reshape(
                vlen, 3
            )
            ds.sequences.append(PoseSample(p2.copy(), p3.copy(), root.copy()))
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after the last sequence")
    return ds


def write_manifest(dataset: PoseDataset, data_path, manifest_path) -> None:
    doc = {
        "path": str(data_path),
        "joints": dataset.joints,
        "fps": dataset.fps,
        "image": [dataset.image_width, dataset.image_height],
        "focal": dataset.focal,
        "sequences": [
            {"index": i, "frames": s.length, "joints": s.joints}
            for i, s in enumerate(dataset.sequences)
        ],
    }
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
