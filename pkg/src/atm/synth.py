"""Synthetic moving-blob clips, the ``.atmc`` clip file format, and PGM
renderings of the four frame operations.

For the direction tasks, each class is the frame-reversal of its partner
class under the same seed, so the unordered set of frames carries no label
information: an order-blind classifier cannot beat chance.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .interact import MulParams, op_add, op_div_log, op_mul_local, op_sub

TASKS = {"direction2": 2, "direction4": 4, "speed2": 2}


@dataclass(frozen=True)
class SynthClipSpec:
    task: str = "direction2"
    frames: int = 8
    size: int = 28
    radius: float = 2.0  # Gaussian sigma in pixels
    velocity: float = 2.0  # pixels per frame
    noise: float = 0.0
    seed: int = 0
    label: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        if not 0 <= self.label < TASKS[self.task]:
            raise ValueError(f"label {self.label} invalid for {self.task}")
        if self.frames < 1 or self.size < 1 or self.radius <= 0 or self.velocity < 0 or self.noise < 0:
            raise ValueError("frames, size, radius must be positive; velocity, noise non-negative")

    @property
    def num_classes(self) -> int:
        return TASKS[self.task]


@dataclass
class ClipBatch:
    clips: np.ndarray  # (B, T, C, H, W), values in [0, 1]
    labels: np.ndarray  # (B,) int

    def __post_init__(self):
        self.clips = np.asarray(self.clips, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.clips.ndim != 5 or len(self.labels) != len(self.clips):
            raise ValueError("clips must be (B, T, C, H, W) with one label per clip")
        if self.clips.size and (self.clips.min() < 0 or self.clips.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)


def _render(size: int, centers: np.ndarray, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = centers[:, 0, None, None], centers[:, 1, None, None]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))


def _trajectory(rng, spec: SynthClipSpec, step: np.ndarray) -> np.ndarray:
    """Centres (T, 2) moving by ``step`` per frame, drawn to stay inside the frame."""
    T, r = spec.frames, spec.radius
    lo, hi = r, spec.size - 1 - r
    travel = step * (T - 1)
    start = np.empty(2)
    for ax in range(2):
        a, b = lo - min(travel[ax], 0.0), hi - max(travel[ax], 0.0)
        if a > b:
            raise ValueError(f"trajectory of {abs(travel[ax]):g}px does not fit a "
                             f"{spec.size}px frame with radius {r:g}")
        start[ax] = rng.uniform(a, b)
    return start + np.arange(T)[:, None] * step


_DIRS = np.array([[0.0, 1.0], [1.0, 0.0]])  # right, down


def gen_clip(spec: SynthClipSpec) -> np.ndarray:
    """Clip ``(T, 1, size, size)`` in [0, 1]; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    reverse = False
    if spec.task == "speed2":
        axis_dir = _DIRS[rng.integers(2)] * (1.0 if rng.integers(2) == 0 else -1.0)
        step = axis_dir * spec.velocity * (2.0 if spec.label == 1 else 1.0)
    else:
        # even labels move forward along an axis, odd labels are their reversal
        step = _DIRS[spec.label // 2] * spec.velocity
        reverse = spec.label % 2 == 1
    centers = _trajectory(rng, spec, step)
    frames = _render(spec.size, centers, spec.radius)
    if spec.noise > 0:
        frames = frames + rng.normal(0.0, spec.noise, frames.shape)
    frames = np.clip(frames, 0.0, 1.0)[:, None]
    return frames[::-1].copy() if reverse else frames


def split_seeds(split: str, n: int, num_classes: int) -> list[tuple[int, int]]:
    """(label, seed) pairs for a split: exact class balance, disjoint seed ranges."""
    if n % num_classes:
        raise ValueError(f"split size {n} is not a multiple of {num_classes} classes")
    offset = {"train": 0, "test": 1_000_000, "val": 2_000_000}[split]
    return [(i % num_classes, offset + i // num_classes) for i in range(n)]


def gen_dataset(base: SynthClipSpec, split: str, n: int) -> ClipBatch:
    pairs = split_seeds(split, n, base.num_classes)
    clips = np.stack([gen_clip(replace(base, label=lab, seed=s)) for lab, s in pairs])
    return ClipBatch(clips, np.array([lab for lab, _ in pairs]))


# ------------------------------------------------------------ clip files
MAGIC = b"ATMC"
VERSION = 1
_HEADER = struct.Struct("<4sB5I")
_MAX_PAYLOAD = 1 << 31


class ClipFormatError(ValueError):
    pass


class BadMagicError(ClipFormatError):
    pass


class UnsupportedVersionError(ClipFormatError):
    pass


class TruncatedClipError(ClipFormatError):
    pass


class DimOverflowError(ClipFormatError):
    pass


def _check_dims(dims):
    if any(d < 1 for d in dims):
        raise DimOverflowError(f"dimensions must be positive, got {dims}")
    if any(d > 0xFFFFFFFF for d in dims) or 4 * int(np.prod(dims, dtype=object)) > _MAX_PAYLOAD:
        raise DimOverflowError(f"dimensions {dims} overflow the payload limit")


def encode_clip(clip: np.ndarray, label: int) -> bytes:
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ValueError(f"clip must be (T, C, H, W), got {clip.shape}")
    _check_dims(clip.shape)
    if clip.size and (clip.min() < 0 or clip.max() > 1):
        raise ValueError("clip values must lie in [0, 1]")
    header = _HEADER.pack(MAGIC, VERSION, *clip.shape, int(label))
    return header + np.ascontiguousarray(clip, dtype="<f4").tobytes()


def decode_clip(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedClipError("header truncated")
    _, version, T, C, H, W, label = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    _check_dims((T, C, H, W))
    need = 4 * T * C * H * W
    payload = buf[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedClipError(f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise ClipFormatError(f"{len(payload) - need} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, C, H, W)
    return data.astype(np.float64), label


def write_clip(path, clip: np.ndarray, label: int):
    Path(path).write_bytes(encode_clip(clip, label))


def read_clip(path) -> tuple[np.ndarray, int]:
    return decode_clip(Path(path).read_bytes())


def write_dataset(root, split: str, base: SynthClipSpec, n: int) -> list[Path]:
    """Write ``<root>/<split>/<label>/<seed>.atmc`` for every clip of the split."""
    paths = []
    for lab, seed in split_seeds(split, n, base.num_classes):
        d = Path(root) / split / str(lab)
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{seed}.atmc"
        write_clip(p, gen_clip(replace(base, label=lab, seed=seed)), lab)
        paths.append(p)
    return paths


def read_dataset(root, split: str) -> ClipBatch:
    files = sorted(Path(root, split).glob("*/*.atmc"),
                   key=lambda p: (int(p.stem), int(p.parent.name)))
    if not files:
        raise FileNotFoundError(f"no clips under {Path(root, split)}")
    clips, labels = zip(*(read_clip(f) for f in files))
    return ClipBatch(np.stack(clips), np.array(labels))


# ---------------------------------------------------------------- images
def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM image must be a 2-D uint8 array")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    raw = buf[m.end():]
    if len(raw) != w * h:
        raise ValueError(f"PGM payload has {len(raw)} bytes, expected {w * h}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def normalize_u8(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def op_maps(frame_a: np.ndarray, frame_b: np.ndarray, p: MulParams = MulParams(),
            eps: float = 1.0) -> dict[str, np.ndarray]:
    """Raw (unnormalised) maps of the four ops on two single-channel frames."""
    a, b = np.asarray(frame_a, dtype=np.float64), np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frames must be equal-size 2-D arrays, got {a.shape} and {b.shape}")
    a3, b3 = a[None], b[None]
    centre = p.neighborhood ** 2 // 2
    return {
        "add": op_add(a3, b3).data[0],
        "sub": op_sub(a3, b3).data[0],
        "mul": op_mul_local(a3, b3, p).data[centre],
        "div": op_div_log(a3, b3, eps).data[0],
    }


def visualize_ops(frame_a, frame_b, p: MulParams = MulParams(), eps: float = 1.0,
                  out_dir=None) -> dict[str, np.ndarray]:
    """8-bit renderings of the four ops; written as ``<op>.pgm`` when ``out_dir`` is given."""
    images = {k: normalize_u8(v) for k, v in op_maps(frame_a, frame_b, p, eps).items()}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, img in images.items():
            (out / f"{k}.pgm").write_bytes(encode_pgm(img))
    return images
