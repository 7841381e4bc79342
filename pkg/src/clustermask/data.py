"""Synthetic shapes scenes and the CMTD binary format.

Geometry is drawn from a scalar splitmix64 stream using integer arithmetic
only; pixel noise comes from the counter-based splitmix64 uniforms in
``_kernels``. Both are platform independent, so a seed fully determines a
scene. See ``docs/format.md`` for the byte layout.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .losses import PanopticTarget
from .panoptic import PanopticMap

BACKGROUND = 0
RECTANGLE, CIRCLE, TRIANGLE = 1, 2, 3
CLASS_NAMES = ("background", "rectangle", "circle", "triangle")
NUM_CLASSES = len(CLASS_NAMES)
THING_CLASSES = (RECTANGLE, CIRCLE, TRIANGLE)
THING_MASK = sum(1 << c for c in THING_CLASSES)
SHAPE_CLASS = {"rectangle": RECTANGLE, "circle": CIRCLE, "triangle": TRIANGLE}

BASE_COLORS = np.array(
    [
        [0.15, 0.15, 0.15],
        [0.85, 0.25, 0.20],
        [0.25, 0.80, 0.30],
        [0.25, 0.35, 0.90],
    ]
)
NOISE_AMPLITUDE = 0.1
MAX_ATTEMPTS = 100

MAGIC = b"CMTD"
MAP_MAGIC = b"CMTP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class GenerationError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SplitMix64:
    """Scalar splitmix64 stream over Python ints."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]`` (modulo reduction)."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    max_shapes: int = 4
    shape_kinds: tuple[str, ...] = ("rectangle", "circle", "triangle")

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise GenerationError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        if not 1 <= self.max_shapes <= 8:
            raise GenerationError(f"max_shapes must be in [1, 8], got {self.max_shapes}")
        unknown = [k for k in self.shape_kinds if k not in SHAPE_CLASS]
        if unknown or not self.shape_kinds:
            raise GenerationError(f"unknown shape kinds {unknown or '(none)'}")


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    target: PanopticTarget

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def same_as(self, other: "Sample") -> bool:
        return (
            self.image.dtype == other.image.dtype
            and self.image.tobytes() == other.image.tobytes()
            and np.array_equal(self.target.masks, other.target.masks)
            and np.array_equal(self.target.classes, other.target.classes)
        )


# --------------------------------------------------------------------------
# Scene generation
# --------------------------------------------------------------------------


def _rectangle(rng: SplitMix64, H: int, W: int, lo: int, hi: int) -> np.ndarray:
    h, w = rng.randint(lo, min(hi, H)), rng.randint(lo, min(hi, W))
    top, left = rng.randint(0, H - h), rng.randint(0, W - w)
    m = np.zeros((H, W), dtype=bool)
    m[top : top + h, left : left + w] = True
    return m


def _circle(rng: SplitMix64, H: int, W: int, lo: int, hi: int) -> np.ndarray:
    r = rng.randint(max(1, lo // 2), max(1, hi // 2))
    cy, cx = rng.randint(r, H - 1 - r), rng.randint(r, W - 1 - r)
    ii, jj = np.ogrid[:H, :W]
    return (ii - cy) ** 2 + (jj - cx) ** 2 <= r * r


def _triangle(rng: SplitMix64, H: int, W: int, lo: int, hi: int) -> np.ndarray:
    # apex centered on the top edge of an h x b box, base on the bottom row
    h, b = rng.randint(max(lo, 2), min(hi, H)), rng.randint(max(lo, 2), min(hi, W))
    top, left = rng.randint(0, H - h), rng.randint(0, W - b)
    ii, xx = np.ogrid[:h, :b]
    inside = np.abs(2 * xx - (b - 1)) * (h - 1) <= (b - 1) * ii
    m = np.zeros((H, W), dtype=bool)
    m[top : top + h, left : left + b] = inside
    return m


_DRAW = {RECTANGLE: _rectangle, CIRCLE: _circle, TRIANGLE: _triangle}


def _dilate(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    grown = out.copy()
    grown[:, 1:] |= out[:, :-1]
    grown[:, :-1] |= out[:, 1:]
    return grown


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Sample:
    """Place 1..max_shapes shapes that neither overlap nor touch, then paint with noise."""
    config.validate()
    H, W = config.height, config.width
    rng = SplitMix64(seed)
    side = min(H, W)
    lo, hi = max(2, side // 8), max(2, 3 * side // 8)
    count = rng.randint(1, config.max_shapes)
    occupied = np.zeros((H, W), dtype=bool)
    masks, classes = [], []
    for _ in range(count):
        cls = SHAPE_CLASS[config.shape_kinds[rng.randint(0, len(config.shape_kinds) - 1)]]
        blocked = _dilate(occupied)
        for _attempt in range(MAX_ATTEMPTS):
            m = _DRAW[cls](rng, H, W, lo, hi)
            if m.any() and not (m & blocked).any():
                masks.append(m)
                classes.append(cls)
                occupied |= m
                break
    if not masks:
        raise GenerationError(f"could not place any shape in a {H}x{W} scene")

    label = np.zeros((H, W), dtype=np.int64)
    for m, c in zip(masks, classes):
        label[m] = c
    noise = _kernels.splitmix_uniform(rng.next_u64(), H * W * 3).reshape(H, W, 3)
    image = BASE_COLORS[label] + (2.0 * noise - 1.0) * NOISE_AMPLITUDE
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, target=PanopticTarget(np.stack(masks), np.array(classes)))


def generate_dataset(count: int, seed: int, config: SceneConfig = SceneConfig()) -> list[Sample]:
    """Sample ``i`` uses seed ``seed + i``."""
    return [generate_scene(seed + i, config) for i in range(count)]


def gt_panoptic_map(target: PanopticTarget, background_class: int = BACKGROUND) -> PanopticMap:
    """Shapes become segments 1..K in order; uncovered pixels form one stuff segment."""
    seg = np.zeros((target.height, target.width), dtype=np.int32)
    segments = []
    for k in range(target.K):
        seg[target.masks[k]] = k + 1
        segments.append((k + 1, int(target.classes[k])))
    if (seg == 0).any():
        seg[seg == 0] = target.K + 1
        segments.append((target.K + 1, background_class))
    return PanopticMap(seg, segments)


def class_histogram(samples: Iterable[Sample]) -> dict[int, int]:
    hist = {c: 0 for c in range(NUM_CLASSES)}
    for s in samples:
        for c in s.target.classes:
            hist[int(c)] += 1
    return hist


# --------------------------------------------------------------------------
# Binary I/O
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetHeader:
    sample_count: int
    class_count: int = NUM_CLASSES
    thing_mask: int = THING_MASK
    version: int = VERSION

    @property
    def thing_classes(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.class_count) if self.thing_mask >> c & 1)


def _encode_masks(masks: np.ndarray, classes: np.ndarray) -> bytes:
    parts = [struct.pack("<I", len(classes))]
    for m, c in zip(masks, classes):
        parts.append(struct.pack("<I", int(c)))
        parts.append(np.ascontiguousarray(m, dtype=np.uint8).tobytes())
    return b"".join(parts)


def encode_dataset(samples: Sequence[Sample], class_count: int = NUM_CLASSES, thing_mask: int = THING_MASK) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(samples), class_count, thing_mask)]
    for s in samples:
        H, W = s.height, s.width
        if s.image.shape != (H, W, 3) or s.target.masks.shape[1:] != (H, W):
            raise ValueError(f"sample image {s.image.shape} and masks {s.target.masks.shape} disagree")
        parts.append(struct.pack("<II", H, W))
        parts.append(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        parts.append(_encode_masks(s.target.masks, s.target.classes))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def masks(self, H: int, W: int, class_count: int | None) -> tuple[np.ndarray, np.ndarray]:
        K = self.u32("mask count")
        masks = np.zeros((K, H, W), dtype=bool)
        classes = np.zeros(K, dtype=np.int64)
        for k in range(K):
            at = self.pos
            classes[k] = self.u32("class id")
            if class_count is not None and classes[k] >= class_count:
                raise FormatError(f"class id {classes[k]} outside {class_count} classes", at)
            at = self.pos
            raw = np.frombuffer(self.take(H * W, "mask bytes"), dtype=np.uint8)
            if raw.max(initial=0) > 1:
                raise FormatError("mask bytes must be 0 or 1", at)
            masks[k] = raw.reshape(H, W).astype(bool)
        return masks, classes


def _read_header(r: _Reader) -> DatasetHeader:
    magic, version, count, class_count, thing_mask = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    return DatasetHeader(sample_count=count, class_count=class_count, thing_mask=thing_mask, version=version)


def decode_dataset(buf: bytes) -> tuple[DatasetHeader, list[Sample]]:
    r = _Reader(buf)
    header = _read_header(r)
    samples = []
    for _ in range(header.sample_count):
        H, W = r.u32("height"), r.u32("width")
        image = np.frombuffer(r.take(H * W * 12, "image"), dtype="<f4").reshape(H, W, 3).astype(np.float32)
        at = r.pos
        masks, classes = r.masks(H, W, header.class_count)
        try:
            target = PanopticTarget(masks, classes)
        except ValueError as exc:
            raise FormatError(str(exc), at) from None
        samples.append(Sample(image=image, target=target))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last sample", r.pos)
    return header, samples


def write_dataset(path: str | os.PathLike, samples: Sequence[Sample], **header) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(samples, **header))


def read_dataset(path: str | os.PathLike) -> list[Sample]:
    return read_dataset_with_header(path)[1]


def read_dataset_with_header(path: str | os.PathLike) -> tuple[DatasetHeader, list[Sample]]:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def encode_panoptic_maps(maps: Sequence[PanopticMap]) -> bytes:
    """"CMTP", u32 version, u32 count; per map: u32 H, u32 W, then the mask section."""
    parts = [MAP_MAGIC, struct.pack("<II", VERSION, len(maps))]
    for pm in maps:
        H, W = pm.shape
        parts.append(struct.pack("<II", H, W))
        masks = np.stack([pm.segment_id == s for s, _ in pm.segments]) if pm.segments else np.zeros((0, H, W), bool)
        parts.append(_encode_masks(masks, np.array([c for _, c in pm.segments], dtype=np.int64)))
    return b"".join(parts)


def decode_panoptic_maps(buf: bytes) -> list[PanopticMap]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAP_MAGIC:
        raise FormatError(f"bad magic, expected {MAP_MAGIC!r}", 0)
    if r.u32("version") != VERSION:
        raise FormatError("unsupported version", 4)
    out = []
    for _ in range(r.u32("map count")):
        H, W = r.u32("height"), r.u32("width")
        at = r.pos
        masks, classes = r.masks(H, W, None)
        if K := len(classes):
            if masks.sum(axis=0).max() > 1:
                raise FormatError("segments overlap", at)
        seg = np.zeros((H, W), dtype=np.int32)
        for k in range(K):
            seg[masks[k]] = k + 1
        out.append(PanopticMap(seg, [(k + 1, int(c)) for k, c in enumerate(classes)]))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last map", r.pos)
    return out


def write_panoptic_maps(path: str | os.PathLike, maps: Sequence[PanopticMap]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_panoptic_maps(maps))


def read_panoptic_maps(path: str | os.PathLike) -> list[PanopticMap]:
    with open(path, "rb") as fh:
        return decode_panoptic_maps(fh.read())
