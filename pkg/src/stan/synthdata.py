"""Synthetic glyph-motion clips with captions, and their binary file format.

A small glyph moves over a noisy background. Classes are motion programs;
three of them are exact time reversals of three others (the reversed clip
reuses the very same rendered frames), so no function that is symmetric in
the frames can tell the members of a reverse pair apart.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .numerics import rng_stream

MOTIONS = (
    "left_right",
    "right_left",
    "top_bottom",
    "bottom_top",
    "clockwise",
    "counter_clockwise",
    "static",
    "blink",
)
# forward class -> its time reversal
REVERSE_OF = {0: 1, 2: 3, 4: 5}
PAIRED_CLASSES = frozenset(REVERSE_OF) | frozenset(REVERSE_OF.values())

SHAPES = ("square", "plus", "cross", "ring")
INTENSITIES = (1.0, 0.7, 0.45)  # the caption's "color" attribute

SHAPE_TOKEN0 = 1
COLOR_TOKEN0 = SHAPE_TOKEN0 + len(SHAPES)
MOTION_TOKEN0 = COLOR_TOKEN0 + len(INTENSITIES)
STOP_TOKEN = MOTION_TOKEN0 + len(MOTIONS)

GLYPH = 3
NOISE_MAX = 0.1

_MASKS = {
    "square": np.ones((3, 3), dtype=bool),
    "plus": np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    "cross": np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=bool),
    "ring": np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=bool),
}


@dataclass
class SyntheticClip:
    frames: np.ndarray  # float32 [T, 1, H, W] in [0, 1]
    label: int
    caption: list[int]

    @property
    def shape_id(self) -> int:
        return self.caption[0] - SHAPE_TOKEN0

    @property
    def color_id(self) -> int:
        return self.caption[1] - COLOR_TOKEN0

    @property
    def attributes(self) -> tuple[int, int, int]:
        return self.shape_id, self.color_id, self.label


def make_caption(shape: int, color: int, motion: int) -> list[int]:
    return [SHAPE_TOKEN0 + shape, COLOR_TOKEN0 + color, MOTION_TOKEN0 + motion, STOP_TOKEN]


def _trajectory(motion: int, T: int, H: int, W: int, rng: np.random.Generator):
    """Top-left glyph corner per frame, plus a visibility flag per frame."""
    ymax, xmax = H - GLYPH, W - GLYPH
    visible = np.ones(T, dtype=bool)
    t = np.arange(T)
    if motion in (0, 2):
        start = int(rng.integers(0, 3))
        end = int(rng.integers(xmax - 2, xmax + 1)) if motion == 0 else int(rng.integers(ymax - 2, ymax + 1))
        moving = np.rint(start + (end - start) * t / (T - 1)).astype(int)
        fixed = np.full(T, int(rng.integers(0, (ymax if motion == 0 else xmax) + 1)))
        ys, xs = (fixed, moving) if motion == 0 else (moving, fixed)
    elif motion == 4:
        cy = ymax / 2 + rng.uniform(-0.5, 0.5)
        cx = xmax / 2 + rng.uniform(-0.5, 0.5)
        rmax = min(cy, cx, ymax - cy, xmax - cx)
        r = rng.uniform(0.8 * rmax, rmax)
        # start near the top with a small phase jitter
        theta = -0.5 * np.pi + rng.uniform(-0.25 * np.pi, 0.25 * np.pi) + 1.5 * np.pi * t / (T - 1)
        ys = np.clip(np.rint(cy + r * np.sin(theta)), 0, ymax).astype(int)
        xs = np.clip(np.rint(cx + r * np.cos(theta)), 0, xmax).astype(int)
    elif motion in (6, 7):
        ys = np.full(T, int(rng.integers(0, ymax + 1)))
        xs = np.full(T, int(rng.integers(0, xmax + 1)))
        if motion == 7:
            visible = (t % 2) == int(rng.integers(0, 2))
    else:
        raise ValueError(f"motion {motion} is rendered as a reversal, not directly")
    return ys, xs, visible


def render_clip(motion: int, shape: int, color: int, T: int, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    frames = rng.uniform(0.0, NOISE_MAX, size=(T, 1, H, W))
    mask = _MASKS[SHAPES[shape]]
    ys, xs, visible = _trajectory(motion, T, H, W, rng)
    for i in range(T):
        if visible[i]:
            patch = frames[i, 0, ys[i] : ys[i] + GLYPH, xs[i] : xs[i] + GLYPH]
            patch[mask] = INTENSITIES[color]
    return frames.astype(np.float32)


def generate_dataset(seed: int, n_per_class: int, config: ModelConfig, split: int = 0) -> list[SyntheticClip]:
    """``n_per_class`` clips of each of the eight motion classes, grouped by class.

    Shape and color cycle with the clip index so that every (shape, color)
    combination is equally represented; a reversed clip keeps its source's
    shape and color. ``split`` selects an independent draw (train 0, eval 1).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if config.T < 3:
        raise ValueError("motion needs at least 3 frames")
    T, H, W = config.T, config.frame_h, config.frame_w
    by_class: dict[int, list[SyntheticClip]] = {}
    for motion in (0, 2, 4, 6, 7):
        clips = []
        for n in range(n_per_class):
            shape, color = n % len(SHAPES), (n // len(SHAPES)) % len(INTENSITIES)
            rng = rng_stream(seed, "data", split, motion, n)
            frames = render_clip(motion, shape, color, T, H, W, rng)
            clips.append(SyntheticClip(frames, motion, make_caption(shape, color, motion)))
        by_class[motion] = clips
        if motion in REVERSE_OF:
            rev = REVERSE_OF[motion]
            by_class[rev] = [
                SyntheticClip(np.ascontiguousarray(c.frames[::-1]), rev, make_caption(c.shape_id, c.color_id, rev))
                for c in clips
            ]
    return [clip for motion in range(len(MOTIONS)) for clip in by_class[motion]]


def stack_frames(clips: list[SyntheticClip]) -> np.ndarray:
    return np.stack([c.frames for c in clips]).astype(np.float64)


# -- file format ------------------------------------------------------------

DATASET_MAGIC = b"STANDS1\x00"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")


class DatasetFileError(ValueError):
    pass


class DatasetFormatError(DatasetFileError):
    pass


class DatasetVersionError(DatasetFileError):
    pass


class DatasetCorruptionError(DatasetFileError):
    pass


def save_dataset(clips: list[SyntheticClip], path) -> None:
    if not clips:
        raise ValueError("nothing to save")
    T, C, H, W = clips[0].frames.shape
    if C != 1:
        raise ValueError("dataset files hold single-channel frames")
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(clips), T, H, W)]
    for c in clips:
        if c.frames.shape != (T, 1, H, W):
            raise ValueError("all clips must share one frame shape")
        parts.append(np.ascontiguousarray(c.frames, dtype="<f4").tobytes())
        parts.append(struct.pack("<IB", c.label, len(c.caption)))
        parts.append(struct.pack(f"<{len(c.caption)}I", *c.caption))
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> list[SyntheticClip]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size or buf[:8] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (magic {buf[:8]!r})")
    _, version, n, T, H, W = _HEADER.unpack_from(buf, 0)
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"{path}: version {version}, expected {DATASET_VERSION}")
    pos = _HEADER.size
    frame_bytes = 4 * T * H * W
    clips = []
    try:
        for _ in range(n):
            if pos + frame_bytes > len(buf):
                raise DatasetCorruptionError(f"{path}: truncated frames")
            frames = np.frombuffer(buf, dtype="<f4", count=T * H * W, offset=pos).reshape(T, 1, H, W)
            pos += frame_bytes
            label, length = struct.unpack_from("<IB", buf, pos)
            pos += 5
            caption = list(struct.unpack_from(f"<{length}I", buf, pos))
            pos += 4 * length
            clips.append(SyntheticClip(frames.astype(np.float32), label, caption))
    except struct.error as exc:
        raise DatasetCorruptionError(f"{path}: truncated clip record") from exc
    if pos != len(buf):
        raise DatasetCorruptionError(f"{path}: {len(buf) - pos} trailing bytes")
    return clips
